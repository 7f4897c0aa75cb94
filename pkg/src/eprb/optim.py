"""Parameter estimation from boundary-driven measurements.

The objective is a regularized least-squares misfit between the elliptic
field and measured trajectories, minimized over the admissible parameter
box.  Two solvers are provided: a full-order projected quasi-Newton
reference, and a trust-region descent over the certified reduced model
whose radius is the relative cost-error bound.  The reduced model is kept
local: it is enriched with state and sensitivity snapshots at accepted
iterates and its saturation constant is recalibrated there, so each outer
iteration costs one full-order solve.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import fmin_l_bfgs_b

from .estimators import certified_estimate, cost_error_bound, hierarchical_gap, weighted_norm_sq
from .fe import AssembledOperators, FeSpace
from .fom import NewtonConfig, NewtonDivergedError, PositivityLostError, solve_fom
from .greedy import FomCache, GreedyConfig, GreedyDriver
from .problem import ProblemDefinition, TimeGrid
from .rom import (
    HierarchicalRom,
    ReducedBasis,
    RomTrajectory,
    attach_cost_data,
    solve_rom,
    solve_rom_sensitivities,
)

__all__ = [
    "CostConfig",
    "MeasurementData",
    "synthetic_measurement",
    "FomObjective",
    "ReducedObjective",
    "ReducedEvaluation",
    "TrConfig",
    "TrRecord",
    "OptimResult",
    "agc_point",
    "solve_tr_subproblem",
    "run_tr_rb",
    "run_fo_reference",
]


@dataclass(frozen=True)
class CostConfig:
    """Weights of the tracking functional and its Tikhonov term."""

    alpha_j: float
    lambda_reg: float
    mu_ref: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mu_ref", np.asarray(self.mu_ref, dtype=float))
        if self.alpha_j < 0.0 or self.lambda_reg < 0.0:
            raise ValueError("cost weights must be nonnegative")
        if self.mu_ref.shape != (4,):
            raise ValueError("reference parameter must have four entries")


@dataclass
class MeasurementData:
    """Observed elliptic trajectory w^k at the interior-plus-right nodes.

    ``mu_star`` records the generating parameter when the data is synthetic,
    so results can report recovery errors; it is never used by the solvers.
    """

    w: np.ndarray  # (K, dim_V0)
    mu_star: Optional[np.ndarray] = None
    noise_var: float = 0.0
    seed: Optional[int] = None


def synthetic_measurement(
    mu_star,
    problem: ProblemDefinition,
    space: FeSpace,
    ops: AssembledOperators,
    grid: TimeGrid,
    noise_var: float = 0.0,
    seed: Optional[int] = None,
    newton: NewtonConfig = NewtonConfig(),
) -> MeasurementData:
    """Generate measurements by solving at mu_star and adding nodal noise."""
    mu_star = np.asarray(mu_star, dtype=float)
    traj = solve_fom(mu_star, problem, space, ops, grid, newton)
    w = traj.q.copy()
    if noise_var > 0.0:
        rng = np.random.default_rng(seed)
        w += rng.normal(0.0, np.sqrt(noise_var), size=w.shape)
    return MeasurementData(w=w, mu_star=mu_star, noise_var=float(noise_var), seed=seed)


class FomObjective:
    """Full-order cost and gradient with cached trajectories.

    The gradient uses the forward sensitivity equations; every distinct
    parameter costs one nonlinear trajectory solve plus four linear sweeps.
    """

    def __init__(
        self,
        problem: ProblemDefinition,
        space: FeSpace,
        ops: AssembledOperators,
        grid: TimeGrid,
        data: MeasurementData,
        cost: CostConfig,
        cache: Optional[FomCache] = None,
        newton: NewtonConfig = NewtonConfig(),
    ):
        self.ops = ops
        self.grid = grid
        self.data = data
        self.cost_cfg = cost
        self.cache = cache if cache is not None else FomCache(problem, space, ops, grid, newton)
        if data.w.shape != (grid.n_steps, space.dim_V0):
            raise ValueError("measurement shape does not match grid and space")

    @property
    def evaluations(self) -> int:
        return self.cache.solve_count

    def misfit(self, mu) -> float:
        traj = self.cache.state(mu)
        return weighted_norm_sq(traj.q - self.data.w, self.ops.M_q, self.grid.weights)

    def cost(self, mu) -> float:
        c = self.cost_cfg
        reg = float(np.sum((np.asarray(mu, dtype=float) - c.mu_ref) ** 2))
        return 0.5 * c.alpha_j * self.misfit(mu) + 0.5 * c.lambda_reg * reg

    def gradient(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        c = self.cost_cfg
        traj = self.cache.state(mu)
        sens = self.cache.sensitivities(mu)
        mdiff = (self.ops.M_q @ (traj.q - self.data.w).T).T
        g = np.array(
            [np.einsum("k,kn,kn->", self.grid.weights, mdiff, sens.s_q[i]) for i in range(4)]
        )
        return c.alpha_j * g + c.lambda_reg * (mu - c.mu_ref)

    def cost_and_gradient(self, mu):
        return self.cost(mu), self.gradient(mu)


@dataclass
class ReducedEvaluation:
    """One certified reduced evaluation: cost, misfit, and the error band."""

    mu: np.ndarray
    cost: float
    misfit: float
    delta_q: float
    delta_j: float
    ratio: float  # delta_j / cost, the relative bound steering the radius


class ReducedObjective:
    """Online cost, gradient, and certified cost-error bound for one model.

    Every public method works in reduced dimensions only; the data terms
    enter through the projections attached to the small operator block.
    Evaluations are memoized per instance, so the control loop can revisit
    a parameter without re-solving.
    """

    def __init__(
        self,
        stack: HierarchicalRom,
        grid: TimeGrid,
        cost: CostConfig,
        length: float,
        sigma_q: float,
        newton: NewtonConfig = NewtonConfig(),
    ):
        if stack.small.data_proj is None or stack.small.data_sq is None:
            raise ValueError("reduced operators carry no measurement projections")
        self.stack = stack
        self.grid = grid
        self.cost_cfg = cost
        self.length = float(length)
        self.sigma_q = float(sigma_q)
        self.newton = newton
        self._evals: dict[tuple, Optional[ReducedEvaluation]] = {}
        self._grads: dict[tuple, np.ndarray] = {}
        self._trajs: dict[tuple, RomTrajectory] = {}

    def _misfit(self, traj: RomTrajectory) -> float:
        rom = self.stack.small
        quad = (
            np.einsum("kl,lm,km->k", traj.q, rom.M_q_r, traj.q)
            - 2.0 * np.einsum("kl,kl->k", traj.q, rom.data_proj)
            + rom.data_sq
        )
        return float(max(self.grid.weights @ quad, 0.0))

    def _solve_small(self, mu) -> RomTrajectory:
        key = tuple(float(x) for x in mu)
        if key not in self._trajs:
            self._trajs[key] = solve_rom(mu, self.stack.small, self.grid, self.newton)
        return self._trajs[key]

    def cost(self, mu) -> float:
        mu = np.asarray(mu, dtype=float)
        c = self.cost_cfg
        reg = float(np.sum((mu - c.mu_ref) ** 2))
        return 0.5 * c.alpha_j * self._misfit(self._solve_small(mu)) + 0.5 * c.lambda_reg * reg

    def evaluate(self, mu) -> Optional[ReducedEvaluation]:
        """Certified evaluation; None if a reduced solve diverges at mu."""
        mu = np.asarray(mu, dtype=float)
        key = tuple(float(x) for x in mu)
        if key in self._evals:
            return self._evals[key]
        try:
            small = self._solve_small(mu)
            big = solve_rom(mu, self.stack.big, self.grid, self.newton)
        except (NewtonDivergedError, PositivityLostError):
            self._evals[key] = None
            return None
        _, gap_q = hierarchical_gap(small, big, self.stack, self.grid)
        delta_q = certified_estimate(gap_q, self.sigma_q)
        jt = self._misfit(small)
        c = self.cost_cfg
        reg = float(np.sum((mu - c.mu_ref) ** 2))
        cost = 0.5 * c.alpha_j * jt + 0.5 * c.lambda_reg * reg
        delta_j = cost_error_bound(delta_q, jt, c.alpha_j, self.length)
        if cost > 0.0:
            ratio = delta_j / cost
        else:
            ratio = 0.0 if delta_j == 0.0 else np.inf
        out = ReducedEvaluation(mu=mu, cost=cost, misfit=jt, delta_q=delta_q, delta_j=delta_j, ratio=ratio)
        self._evals[key] = out
        return out

    def gradient(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        key = tuple(float(x) for x in mu)
        if key in self._grads:
            return self._grads[key]
        c = self.cost_cfg
        rom = self.stack.small
        traj = self._solve_small(mu)
        _, s_q = solve_rom_sensitivities(mu, rom, traj, self.grid)
        resid = traj.q @ rom.M_q_r.T - rom.data_proj
        g = np.array([np.einsum("k,kl,kl->", self.grid.weights, resid, s_q[i]) for i in range(4)])
        g = c.alpha_j * g + c.lambda_reg * (mu - c.mu_ref)
        self._grads[key] = g
        return g

    def cost_and_gradient(self, mu):
        return self.cost(mu), self.gradient(mu)


@dataclass(frozen=True)
class TrConfig:
    """Knobs of the trust-region descent; radii are relative error bounds."""

    eps_tr: float = 1e-5  # stationarity tolerance of the projected gradient
    delta0: float = 0.1
    max_outer: int = 30
    shrink: float = 0.5
    grow: float = 2.0
    very_successful_fraction: float = 0.25  # bound this far inside widens the radius
    skip_enrichment_fraction: float = 0.01  # bound this small keeps the model as is
    armijo_c: float = 1e-4
    backtrack_shrink: float = 0.5
    max_backtracks: int = 30
    inner_tol: float = 1e-8
    inner_max_iter: int = 50
    boundary_fraction: float = 0.99  # iterates past this fraction stop the subproblem


@dataclass
class TrRecord:
    """One outer iteration of the trust-region loop, as written to traces."""

    iteration: int
    mu: np.ndarray
    cost_model: float
    delta_j: float
    radius: float
    sigma_q: float
    accepted: bool
    enriched: bool
    fom_solves: int
    l_y: int
    l_q: int


@dataclass
class OptimResult:
    mu_opt: np.ndarray
    cost: float
    iterations: int
    fom_evaluations: int
    converged: bool
    wall_time: float
    stationarity: float
    e_abs: Optional[float] = None
    e_rel: Optional[float] = None
    history: Optional[list] = field(default=None, repr=False)


def _recovery_errors(mu_opt, data: MeasurementData):
    if data.mu_star is None:
        return None, None
    e_abs = float(np.linalg.norm(mu_opt - data.mu_star))
    return e_abs, e_abs / float(np.linalg.norm(data.mu_star))


def agc_point(objective: ReducedObjective, mu, delta, bounds, tr: TrConfig = TrConfig()):
    """Projected backtracking step along the negative reduced gradient.

    The accepted point satisfies the Armijo decrease and keeps the relative
    error bound inside the radius; if no step does, the current point is
    returned unchanged.
    """
    mu = np.asarray(mu, dtype=float)
    lo, hi = bounds
    ev0 = objective.evaluate(mu)
    if ev0 is None:
        raise RuntimeError(f"reduced model diverged at the current iterate {mu.tolist()}")
    g = objective.gradient(mu)
    s = 1.0
    for _ in range(tr.max_backtracks + 1):
        trial = np.clip(mu - s * g, lo, hi)
        step = trial - mu
        if not np.any(step):
            break
        ev = objective.evaluate(trial)
        if (
            ev is not None
            and ev.cost <= ev0.cost + tr.armijo_c * float(g @ step)
            and ev.ratio <= delta
        ):
            return trial, ev
        s *= tr.backtrack_shrink
    return mu.copy(), ev0


def solve_tr_subproblem(objective: ReducedObjective, mu_start, ev_start, delta, bounds, tr: TrConfig = TrConfig()):
    """Projected BFGS descent inside the radius, started from the AGC point.

    Terminates at inner stationarity, at the radius boundary, or at the
    iteration cap; every accepted iterate decreases the reduced cost and
    keeps the relative bound feasible, so the start value is never exceeded.
    """
    lo, hi = bounds
    x = np.asarray(mu_start, dtype=float).copy()
    ev = ev_start
    g = objective.gradient(x)
    H = np.eye(x.size)
    status = "iteration-cap"
    moved = False
    for _ in range(tr.inner_max_iter):
        pg = x - np.clip(x - g, lo, hi)
        if float(np.linalg.norm(pg)) <= tr.inner_tol:
            status = "stationary"
            break
        d = -(H @ g)
        if float(g @ d) >= 0.0:
            d = -g
            H = np.eye(x.size)
        s = 1.0
        accepted = None
        for _ in range(tr.max_backtracks + 1):
            trial = np.clip(x + s * d, lo, hi)
            step = trial - x
            if not np.any(step):
                break
            evt = objective.evaluate(trial)
            if (
                evt is not None
                and evt.cost <= ev.cost + tr.armijo_c * float(g @ step)
                and evt.ratio <= delta
            ):
                accepted = (trial, evt)
                break
            s *= tr.backtrack_shrink
        if accepted is None:
            status = "stalled"
            break
        x_new, ev_new = accepted
        g_new = objective.gradient(x_new)
        sk = x_new - x
        yk = g_new - g
        sy = float(sk @ yk)
        if sy > 1e-12 * float(np.linalg.norm(sk)) * float(np.linalg.norm(yk)):
            rho = 1.0 / sy
            A = np.eye(x.size) - rho * np.outer(sk, yk)
            H = A @ H @ A.T + rho * np.outer(sk, sk)
        x, ev, g = x_new, ev_new, g_new
        moved = True
        if ev.ratio >= tr.boundary_fraction * delta:
            status = "boundary"
            break
    if moved and (ev.ratio > delta + 1e-12 or ev.cost > ev_start.cost + 1e-12 * (1.0 + abs(ev_start.cost))):
        raise RuntimeError("subproblem returned an infeasible or ascending iterate")
    return x, ev, status


def _local_model_config(mu0, newton: NewtonConfig) -> GreedyConfig:
    # tol is only a placeholder here; enrichment passes its own threshold.
    # One new mode per field per accepted step keeps the model genuinely
    # reduced at the iterate, so the single-point saturation ratio compares
    # approximation errors instead of shared noise floors.
    return GreedyConfig(
        tol=1e-12,
        max_basis=60,
        training_set=np.atleast_2d(mu0),
        initial_mu=mu0,
        init_max_modes=10,
        enrich_max_modes=1,
        newton=newton,
    )


def _reduced_objective(driver: GreedyDriver, data: MeasurementData, cost: CostConfig, length: float, newton: NewtonConfig) -> ReducedObjective:
    attach_cost_data(driver.stack.small, driver.small, driver.ops, data.w)
    return ReducedObjective(driver.stack, driver.grid, cost, length, driver.calibration.sigma_q, newton)


def run_tr_rb(
    problem: ProblemDefinition,
    space: FeSpace,
    ops: AssembledOperators,
    grid: TimeGrid,
    data: MeasurementData,
    cost: CostConfig,
    mu_init=None,
    tr: TrConfig = TrConfig(),
    local: Optional[GreedyConfig] = None,
    newton: NewtonConfig = NewtonConfig(),
    cache: Optional[FomCache] = None,
    warm_basis: Optional[ReducedBasis] = None,
) -> OptimResult:
    """Trust-region descent over the certified reduced model.

    The radius bounds the relative cost error of the model.  Candidate
    steps are screened with the two-sided bound before any full-order
    work; undecided candidates are settled against the enriched model.
    One full-order solve per accepted step provides the stationarity
    check, the enrichment snapshots, and the recalibration data at once.
    """
    t0 = time.perf_counter()
    mu = np.asarray(cost.mu_ref if mu_init is None else mu_init, dtype=float).copy()
    problem.check_mu(mu)
    if cache is None:
        cache = FomCache(problem, space, ops, grid, newton)
    fom_obj = FomObjective(problem, space, ops, grid, data, cost, cache=cache, newton=newton)
    cfg_local = _local_model_config(mu, newton) if local is None else local
    lo, hi = problem.mu_low, problem.mu_high

    def stationarity(m):
        return float(np.linalg.norm(m - np.clip(m - fom_obj.gradient(m), lo, hi)))

    delta = tr.delta0
    records: list[TrRecord] = []
    crit = stationarity(mu)
    converged = crit <= tr.eps_tr
    it = 0
    driver = None
    while not converged and it < tr.max_outer:
        if driver is None:
            driver = GreedyDriver(cfg_local, problem, space, ops, grid, cache)
            if warm_basis is None:
                driver.initial_spaces()
            else:
                driver.seed_spaces(warm_basis)
            driver.enforce_saturation()
        elif not np.array_equal(driver.cfg.training_set, np.atleast_2d(mu)):
            # keep the saturation constant calibrated at the current iterate
            driver.set_training(mu)
            driver.enforce_saturation()
        robj = _reduced_objective(driver, data, cost, problem.length, newton)
        mu_agc, ev_agc = agc_point(robj, mu, delta, (lo, hi), tr)
        mu_t, ev_t, _ = solve_tr_subproblem(robj, mu_agc, ev_agc, delta, (lo, hi), tr)
        # slack covers cross-model evaluation noise near a flat optimum
        thr = ev_agc.cost + 1e-10 * (1.0 + abs(ev_agc.cost))
        sufficient = ev_t.cost + ev_t.delta_j <= thr
        necessary = ev_t.cost - ev_t.delta_j <= thr
        enriched = False
        ratio_next = ev_t.ratio
        if not necessary:
            accept = False
        elif sufficient and ev_t.ratio <= tr.skip_enrichment_fraction * delta:
            accept = True
        else:
            driver.set_training(mu_t)
            driver.enrich_primary(mu_t, np.inf, np.inf, tol=0.0, include_sensitivities=True)
            driver.refresh()
            driver.enforce_saturation()
            enriched = True
            ev_next = _reduced_objective(driver, data, cost, problem.length, newton).evaluate(mu_t)
            if ev_next is None:
                accept = False
            else:
                ratio_next = ev_next.ratio
                accept = sufficient or ev_next.cost <= thr
        stalled = accept and np.linalg.norm(mu_t - mu) <= 1e-13 * (1.0 + np.linalg.norm(mu))
        if accept:
            mu = mu_t.copy()
            if ratio_next <= tr.very_successful_fraction * delta:
                delta *= tr.grow
            crit = stationarity(mu)
            converged = crit <= tr.eps_tr
        else:
            delta *= tr.shrink
        it += 1
        records.append(
            TrRecord(
                iteration=it,
                mu=mu.copy(),
                cost_model=ev_t.cost,
                delta_j=ev_t.delta_j,
                radius=delta,
                sigma_q=driver.calibration.sigma_q,
                accepted=bool(accept),
                enriched=enriched,
                fom_solves=cache.solve_count,
                l_y=driver.Py.shape[1],
                l_q=driver.Pq.shape[1],
            )
        )
        if stalled and not converged:
            # an accepted step without movement means the model cannot
            # resolve further descent; more iterations only repeat it
            warnings.warn(f"trust-region loop stalled at stationarity {crit:.3e}", stacklevel=2)
            break
    if not converged and it >= tr.max_outer:
        warnings.warn(
            f"trust-region loop hit the iteration cap at stationarity {crit:.3e}", stacklevel=2
        )
    e_abs, e_rel = _recovery_errors(mu, data)
    return OptimResult(
        mu_opt=mu,
        cost=fom_obj.cost(mu),
        iterations=it,
        fom_evaluations=cache.solve_count,
        converged=converged,
        wall_time=time.perf_counter() - t0,
        stationarity=crit,
        e_abs=e_abs,
        e_rel=e_rel,
        history=records,
    )


def run_fo_reference(
    problem: ProblemDefinition,
    space: FeSpace,
    ops: AssembledOperators,
    grid: TimeGrid,
    data: MeasurementData,
    cost: CostConfig,
    mu_init=None,
    eps_tr: float = 1e-5,
    max_iter: int = 200,
    newton: NewtonConfig = NewtonConfig(),
    cache: Optional[FomCache] = None,
) -> OptimResult:
    """Projected quasi-Newton reference on the full-order objective."""
    t0 = time.perf_counter()
    mu0 = np.asarray(cost.mu_ref if mu_init is None else mu_init, dtype=float)
    problem.check_mu(mu0)
    fom_obj = FomObjective(problem, space, ops, grid, data, cost, cache=cache, newton=newton)
    bounds = list(zip(problem.mu_low, problem.mu_high))
    x, f, info = fmin_l_bfgs_b(
        fom_obj.cost_and_gradient,
        mu0,
        bounds=bounds,
        pgtol=eps_tr,
        factr=10.0,
        maxiter=max_iter,
    )
    mu_opt = np.asarray(x, dtype=float)
    crit = float(
        np.linalg.norm(mu_opt - np.clip(mu_opt - fom_obj.gradient(mu_opt), problem.mu_low, problem.mu_high))
    )
    e_abs, e_rel = _recovery_errors(mu_opt, data)
    return OptimResult(
        mu_opt=mu_opt,
        cost=float(f),
        iterations=int(info["nit"]),
        fom_evaluations=int(info["funcalls"]),
        converged=info["warnflag"] == 0,
        wall_time=time.perf_counter() - t0,
        stationarity=crit,
        e_abs=e_abs,
        e_rel=e_rel,
        history=None,
    )
