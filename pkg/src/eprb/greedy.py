"""Weak greedy construction of the nested reduced-basis spaces.

The driver alternates four moves until the certified indicator is below
tolerance on the whole training set: enrich the primary basis pair at the
worst training parameter, rebuild the enlarged pair (kept a few modes
richer and exactly nested), re-enforce the saturation property by
recalibrating the constants with true errors, and pick the next worst
parameter from the cheap online indicator alone.  Full-order trajectories
are cached by parameter, so the expensive sweep happens once per value.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .deim import DeimInterpolant, build_deim
from .estimators import (
    SaturationCalibration,
    calibrate_saturation,
    certified_estimate,
    hierarchical_gap,
    true_errors,
    weighted_norm_sq,
)
from .fe import AssembledOperators, FeSpace
from .fom import (
    NewtonConfig,
    NewtonDivergedError,
    PositivityLostError,
    SensitivityTrajectory,
    StateTrajectory,
    coupling_snapshots,
    solve_fom,
    solve_sensitivities,
)
from .pod import PodRule, orthonormalize_against, pod
from .problem import ProblemDefinition, TimeGrid
from .rom import (
    EnlargedBasis,
    HierarchicalRom,
    ReducedBasis,
    RomTrajectory,
    build_hierarchical,
    solve_rom,
    solve_rom_batch,
)

__all__ = [
    "GreedyConfig",
    "GreedyDriver",
    "GreedyResult",
    "IterationRecord",
    "FomCache",
    "initial_spaces",
    "error_indicator",
    "run_weak_greedy",
]


@dataclass
class GreedyConfig:
    """Targets and enrichment rules of the greedy driver."""

    tol: float
    max_basis: int
    training_set: np.ndarray  # (n_train, 4)
    initial_mu: np.ndarray | None = None  # default: midpoint of the box
    pod_energy: float = 1e-10  # energy rule shared by all snapshot PODs
    init_max_modes: int = 20
    enrich_max_modes: int = 5  # new modes per field per outer iteration
    extra_modes: int = 2  # enlargement headroom per field
    saturation_increment: int = 1
    max_saturation_rounds: int = 10
    saturation_rel_floor: float = 1e-7  # errors this far below the state scale are noise
    max_outer: int = 50
    deim_energy: float = 1e-10
    deim_cap_factor: int = 3  # cap l_f at factor * (l_y + l_q)
    newton: NewtonConfig = field(default_factory=NewtonConfig)

    def __post_init__(self):
        if self.tol <= 0.0:
            raise ValueError("tolerance must be positive")
        if self.max_basis <= 0:
            raise ValueError("basis cap must be positive")
        self.training_set = np.atleast_2d(np.asarray(self.training_set, dtype=float))
        if self.training_set.shape[0] == 0:
            raise ValueError("training set must be nonempty")


@dataclass
class _SweepData:
    """Products of one batched training sweep with fixed bases."""

    mus: np.ndarray
    calibration: SaturationCalibration
    gaps_y: np.ndarray
    gaps_q: np.ndarray


@dataclass
class IterationRecord:
    """State of the run at one indicator evaluation."""

    iteration: int
    mu_hat: np.ndarray
    e_hat: float
    l_y: int
    l_q: int
    m_y: int
    m_q: int
    sigma_y: float
    sigma_q: float


@dataclass
class GreedyResult:
    basis: ReducedBasis
    enlarged: EnlargedBasis
    deim: DeimInterpolant
    stack: HierarchicalRom
    calibration: SaturationCalibration
    history: list[IterationRecord]
    converged: bool
    e_hat: float
    fom_solves: int
    enrichment_mus: list[np.ndarray]


class FomCache:
    """Full-order trajectories keyed by parameter tuple.

    ``solve_count`` counts distinct nonlinear trajectory solves; sensitivity
    sweeps are linear follow-ups and tracked separately.
    """

    def __init__(
        self,
        problem: ProblemDefinition,
        space: FeSpace,
        ops: AssembledOperators,
        grid: TimeGrid,
        newton: NewtonConfig = NewtonConfig(),
    ):
        self.problem = problem
        self.space = space
        self.ops = ops
        self.grid = grid
        self.newton = newton
        self.solve_count = 0
        self.sensitivity_count = 0
        self._states: dict[tuple, StateTrajectory] = {}
        self._sens: dict[tuple, SensitivityTrajectory] = {}

    @staticmethod
    def key(mu) -> tuple:
        return tuple(float(x) for x in np.asarray(mu, dtype=float))

    def state(self, mu) -> StateTrajectory:
        k = self.key(mu)
        if k not in self._states:
            self._states[k] = solve_fom(
                np.asarray(mu, dtype=float), self.problem, self.space, self.ops, self.grid, self.newton
            )
            self.solve_count += 1
        return self._states[k]

    def sensitivities(self, mu) -> SensitivityTrajectory:
        k = self.key(mu)
        if k not in self._sens:
            traj = self.state(mu)
            self._sens[k] = solve_sensitivities(
                traj.mu, traj, self.problem, self.space, self.ops, self.grid
            )
            self.sensitivity_count += 1
        return self._sens[k]


def error_indicator(mu, stack: HierarchicalRom, calibration: SaturationCalibration, grid: TimeGrid, newton: NewtonConfig = NewtonConfig()):
    """Certified online indicator (e, delta_y, delta_q); None if the ROM diverges.

    Two reduced solves and the Gram-block gap; no full-order work.
    """
    try:
        small = solve_rom(mu, stack.small, grid, newton)
        big = solve_rom(mu, stack.big, grid, newton)
    except (NewtonDivergedError, PositivityLostError) as exc:
        warnings.warn(f"reduced solve failed at mu={np.asarray(mu)}: {exc}; skipping", stacklevel=2)
        return None
    gap_y, gap_q = hierarchical_gap(small, big, stack, grid)
    d_y = certified_estimate(gap_y, calibration.sigma_y)
    d_q = certified_estimate(gap_q, calibration.sigma_q)
    return 0.5 * (d_y + d_q), d_y, d_q


_DROP_TOL = 1e-8


def _project_pool(X: np.ndarray, basis: np.ndarray, gram):
    """Orthogonal complement of the basis span with noise columns removed.

    Columns whose S-norm shrank below _DROP_TOL of their original size are
    roundoff after the projection; normalizing them would plant garbage
    directions in the basis.  Returns the kept columns and the keep mask.
    """
    apply = (lambda v: gram @ v) if gram is not None else (lambda v: v)
    before = np.sqrt(np.abs(np.einsum("ij,ij->j", X, apply(X))))
    Xp = orthonormalize_against(X, basis, gram)
    after = np.sqrt(np.abs(np.einsum("ij,ij->j", Xp, apply(Xp))))
    keep = after > _DROP_TOL * np.maximum(before, np.finfo(float).tiny)
    return Xp[:, keep], keep


def _lexicographic_argmax(values: np.ndarray, mus: np.ndarray) -> int:
    """Index of the largest value; exact ties go to the smallest parameter."""
    best = np.max(values)
    ties = np.flatnonzero(values == best)
    if ties.size == 1:
        return int(ties[0])
    order = sorted(ties, key=lambda i: tuple(mus[i]))
    return int(order[0])


class GreedyDriver:
    """Stateful owner of the basis pair, enlargement, interpolant, and stack.

    ``run`` drives the full training-set greedy; the maintenance methods
    (``initial_spaces``, ``enrich_primary``, ``refresh``,
    ``enforce_saturation``) are also usable on their own to keep a local
    model calibrated at a moving parameter, as the trust-region optimizer
    does with a one-element training set.
    """

    def __init__(self, config: GreedyConfig, problem: ProblemDefinition, space: FeSpace, ops: AssembledOperators, grid: TimeGrid, cache: FomCache | None = None):
        self.cfg = config
        self.problem = problem
        self.space = space
        self.ops = ops
        self.grid = grid
        self.cache = cache if cache is not None else FomCache(problem, space, ops, grid, config.newton)
        mu0 = problem.midpoint_mu() if config.initial_mu is None else np.asarray(config.initial_mu, dtype=float)
        problem.check_mu(mu0)
        self.mu0 = mu0
        # mutable run state
        self.Py = np.zeros((space.dim_V, 0))
        self.Pq = np.zeros((space.dim_V0, 0))
        self.Ey = np.zeros((space.dim_V, 0))
        self.Eq = np.zeros((space.dim_V0, 0))
        self.extra_y = config.extra_modes
        self.extra_q = config.extra_modes
        self.enrichment_mus: list[np.ndarray] = []
        # snapshot pools feeding the enlarged-space rebuilds: (columns, weights)
        self._ext_pool_y: list[tuple[np.ndarray, np.ndarray]] = []
        self._ext_pool_q: list[tuple[np.ndarray, np.ndarray]] = []
        self._deim_mus: list[np.ndarray] = []
        self.deim_extra = 0
        self.deim: DeimInterpolant | None = None
        self.stack: HierarchicalRom | None = None
        self.calibration: SaturationCalibration | None = None
        self._last_sweep: _SweepData | None = None
        self.history: list[IterationRecord] = []

    # -- basis bookkeeping -------------------------------------------------

    @property
    def small(self) -> ReducedBasis:
        return ReducedBasis(self.space, self.Py, self.Pq)

    @property
    def enlarged(self) -> EnlargedBasis:
        return EnlargedBasis(self.small, self.Ey, self.Eq)

    def _add_pool_entry(self, mu, with_sensitivities: bool):
        traj = self.cache.state(mu)
        w = self.grid.weights
        if with_sensitivities:
            sens = self.cache.sensitivities(mu)
            cols_y = np.hstack([traj.y.T] + [sens.s_y[i].T for i in range(4)])
            cols_q = np.hstack([traj.q.T] + [sens.s_q[i].T for i in range(4)])
            wy = np.tile(w, 5)
            wq = np.tile(w, 5)
        else:
            cols_y, cols_q, wy, wq = traj.y.T, traj.q.T, w, w
        self._ext_pool_y.append((cols_y, wy))
        self._ext_pool_q.append((cols_q, wq))

    def _register_deim(self, mu):
        mu = np.asarray(mu, dtype=float)
        if not any(np.array_equal(mu, m) for m in self._deim_mus):
            self._deim_mus.append(mu)

    def _rebuild_extension(self):
        """Recompute the enlargement from its pool, orthogonal to the small basis."""
        for which in ("y", "q"):
            pool = self._ext_pool_y if which == "y" else self._ext_pool_q
            basis = self.Py if which == "y" else self.Pq
            gram = self.ops.S_y if which == "y" else self.ops.S_q
            target = self.extra_y if which == "y" else self.extra_q
            X = np.hstack([c for c, _ in pool])
            w = np.concatenate([v for _, v in pool])
            Xp, keep = _project_pool(X, basis, gram)
            w = w[keep]
            with warnings.catch_warnings():
                # rank shortfall just yields a thinner enlargement
                warnings.simplefilter("ignore")
                modes, _ = pod(Xp, gram, PodRule(rank=target), weights=w)
            if which == "y":
                self.Ey = modes
            else:
                self.Eq = modes

    def _refresh_deim(self):
        pool = np.hstack([coupling_snapshots(self.cache.state(mu)) for mu in self._deim_mus])
        cap = max(1, self.cfg.deim_cap_factor * (self.Py.shape[1] + self.Pq.shape[1]))
        if float(np.max(np.abs(pool), initial=0.0)) < 1e-14:
            # vanishing nonlinearity: any one-point interpolant reproduces it
            unit = np.zeros((self.space.dim_V0, 1))
            unit[0, 0] = 1.0
            self.deim = build_deim(unit, PodRule(rank=1))
            return
        rule = PodRule(energy_tol=self.cfg.deim_energy, max_modes=cap)
        if self.deim_extra:
            sigmas = np.linalg.svd(pool, compute_uv=False)
            nrank = int(np.count_nonzero(sigmas > sigmas[0] * 1e-13))
            rule = PodRule(rank=min(rule.select(sigmas, nrank) + self.deim_extra, nrank), max_modes=cap)
        self.deim = build_deim(pool, rule)

    def _rebuild_stack(self):
        self.stack = build_hierarchical(
            self.problem, self.space, self.ops, self.grid, self.small, self.enlarged.big(), self.deim
        )

    def refresh(self):
        """Bring interpolant, enlargement, and stack up to date with the bases."""
        self._refresh_deim()
        self._rebuild_extension()
        self._rebuild_stack()

    def set_training(self, mus):
        """Retarget the sweep, e.g. at the current iterate of an optimizer."""
        self.cfg.training_set = np.atleast_2d(np.asarray(mus, dtype=float))

    # -- algorithm phases --------------------------------------------------

    def initial_spaces(self):
        traj = self.cache.state(self.mu0)
        rule = PodRule(energy_tol=self.cfg.pod_energy, max_modes=self.cfg.init_max_modes)
        self.Py, _ = pod(traj.y.T, self.ops.S_y, rule, weights=self.grid.weights)
        self.Pq, _ = pod(traj.q.T, self.ops.S_q, rule, weights=self.grid.weights)
        self.enrichment_mus.append(np.asarray(self.mu0, dtype=float))
        self._add_pool_entry(self.mu0, with_sensitivities=True)
        self._register_deim(self.mu0)
        self.refresh()

    def seed_spaces(self, basis: ReducedBasis):
        """Start from an existing basis pair instead of the mu0 POD."""
        if basis.y_modes.shape[0] != self.space.dim_V or basis.q_modes.shape[0] != self.space.dim_V0:
            raise ValueError("seed basis does not match the discretization")
        self.Py = np.array(basis.y_modes, dtype=float)
        self.Pq = np.array(basis.q_modes, dtype=float)
        self.enrichment_mus.append(np.asarray(self.mu0, dtype=float))
        self._add_pool_entry(self.mu0, with_sensitivities=True)
        self._register_deim(self.mu0)
        self.refresh()

    def _sweep_training(self) -> "_SweepData":
        """One batched pass over the training set: true errors and gaps.

        The reduced solves are vectorized across parameters; the full-order
        trajectories come from the cache (solved once per parameter).
        """
        mus = self.cfg.training_set
        bs = solve_rom_batch(mus, self.stack.small, self.grid, self.cfg.newton)
        bb = solve_rom_batch(mus, self.stack.big, self.grid, self.cfg.newton)
        ok = ~(bs.failed | bb.failed)
        if not ok.any():
            raise RuntimeError("every training parameter failed in the reduced sweep")
        if not ok.all():
            warnings.warn(
                f"reduced solves failed at {np.count_nonzero(~ok)} training parameters; skipped",
                stacklevel=2,
            )
        big_basis = self.enlarged.big()
        kept, es_y, eb_y, es_q, eb_q, gaps_y, gaps_q = [], [], [], [], [], [], []
        floors_y, floors_q = [], []
        rel_floor = self.cfg.saturation_rel_floor
        no_iters = np.zeros(self.grid.n_steps, dtype=int)
        for i in np.flatnonzero(ok):
            mu = mus[i]
            fom = self.cache.state(mu)
            ts = RomTrajectory(mu=mu, y=bs.y[i], q=bs.q[i], newton_iters=no_iters)
            tb = RomTrajectory(mu=mu, y=bb.y[i], q=bb.q[i], newton_iters=no_iters)
            ey_s, eq_s = true_errors(fom, ts, self.small, self.ops, self.grid)
            ey_b, eq_b = true_errors(fom, tb, big_basis, self.ops, self.grid)
            gy, gq = hierarchical_gap(ts, tb, self.stack, self.grid)
            kept.append(mu)
            es_y.append(ey_s)
            eb_y.append(ey_b)
            es_q.append(eq_s)
            eb_q.append(eq_b)
            gaps_y.append(gy)
            gaps_q.append(gq)
            floors_y.append(rel_floor * np.sqrt(weighted_norm_sq(fom.y, self.ops.S_y, self.grid.weights)))
            floors_q.append(rel_floor * np.sqrt(weighted_norm_sq(fom.q, self.ops.S_q, self.grid.weights)))
        return _SweepData(
            mus=np.asarray(kept),
            calibration=calibrate_saturation(
                np.asarray(kept), es_y, eb_y, es_q, eb_q, floors_y=floors_y, floors_q=floors_q
            ),
            gaps_y=np.asarray(gaps_y),
            gaps_q=np.asarray(gaps_q),
        )

    def enforce_saturation(self):
        data = self._sweep_training()
        rounds = 0
        while data.calibration.sigma_y >= 1.0 or data.calibration.sigma_q >= 1.0:
            cal = data.calibration
            if rounds >= self.cfg.max_saturation_rounds:
                raise RuntimeError(
                    f"saturation not restored after {rounds} enlargement rounds "
                    f"(sigma_y={cal.sigma_y:.3g}, sigma_q={cal.sigma_q:.3g})"
                )
            for which, sigma, ratios in (
                ("y", cal.sigma_y, cal.ratios_y),
                ("q", cal.sigma_q, cal.ratios_q),
            ):
                if sigma < 1.0:
                    continue
                violators = cal.training_mus[ratios >= 1.0]
                for mu in violators:
                    self._add_pool_entry(mu, with_sensitivities=False)
                    # both models share the interpolant; a violator outside its
                    # pool floors both errors and no enlargement separates them
                    self._register_deim(mu)
                if which == "y":
                    self.extra_y += self.cfg.saturation_increment
                else:
                    self.extra_q += self.cfg.saturation_increment
            # a finer interpolant lowers the bias common to both models,
            # which no extension width can reduce
            self.deim_extra += self.cfg.saturation_increment
            self.refresh()
            data = self._sweep_training()
            rounds += 1
        self.calibration = data.calibration
        self._last_sweep = data

    def argmax_indicator(self):
        """Worst training parameter by the online indicator.

        Reuses the reduced solutions of the calibration sweep (the bases have
        not changed since); only the certified scaling is applied here, so no
        full-order solve can occur.
        """
        data = self._last_sweep
        d_y = data.gaps_y / np.sqrt(1.0 - data.calibration.sigma_y)
        d_q = data.gaps_q / np.sqrt(1.0 - data.calibration.sigma_q)
        values = 0.5 * (d_y + d_q)
        idx = _lexicographic_argmax(values, data.mus)
        mu_hat = data.mus[idx].copy()
        return mu_hat, float(values[idx]), float(d_y[idx]), float(d_q[idx])

    def _deltas_at(self, mu):
        out = error_indicator(mu, self.stack, self.calibration, self.grid, self.cfg.newton)
        if out is None:
            return np.inf, np.inf
        return out[1], out[2]

    def enrich_primary(
        self, mu_hat, delta_y: float, delta_q: float, tol: float | None = None, include_sensitivities: bool = False
    ) -> None:
        """Append state modes at mu_hat until its per-field estimate is below tol.

        A nonpositive ``tol`` keeps every candidate mode up to the POD rule
        without intermediate indicator checks; the caller refreshes the
        dependent structures afterwards.  With ``include_sensitivities`` the
        candidate pool also holds the parameter sensitivities, which makes
        the reduced gradient consistent with the full one at mu_hat.
        """
        tol = self.cfg.tol if tol is None else tol
        check = tol > 0.0
        traj = self.cache.state(mu_hat)
        self.enrichment_mus.append(np.asarray(mu_hat, dtype=float))
        self._add_pool_entry(mu_hat, with_sensitivities=True)
        self._register_deim(mu_hat)
        if include_sensitivities:
            sens = self.cache.sensitivities(mu_hat)
            pool_y = np.hstack([traj.y.T] + [sens.s_y[i].T for i in range(4)])
            pool_q = np.hstack([traj.q.T] + [sens.s_q[i].T for i in range(4)])
            pool_w = np.tile(self.grid.weights, 5)
        else:
            pool_y, pool_q, pool_w = traj.y.T, traj.q.T, self.grid.weights
        for which, entry_delta in (("y", delta_y), ("q", delta_q)):
            if entry_delta <= tol:
                continue
            snaps = pool_y if which == "y" else pool_q
            basis = self.Py if which == "y" else self.Pq
            gram = self.ops.S_y if which == "y" else self.ops.S_q
            cand, kept = _project_pool(snaps, basis, gram)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                modes, _ = pod(
                    cand,
                    gram,
                    PodRule(energy_tol=self.cfg.pod_energy, max_modes=self.cfg.enrich_max_modes),
                    weights=pool_w[kept],
                )
            for j in range(modes.shape[1]):
                if self.Py.shape[1] + self.Pq.shape[1] >= self.cfg.max_basis:
                    return
                if which == "y":
                    self.Py = np.hstack([self.Py, modes[:, j : j + 1]])
                else:
                    self.Pq = np.hstack([self.Pq, modes[:, j : j + 1]])
                if not check:
                    continue
                self._rebuild_extension()
                self._rebuild_stack()
                d_y, d_q = self._deltas_at(mu_hat)
                if (d_y if which == "y" else d_q) <= tol:
                    break

    def _record(self, iteration, mu_hat, e_hat):
        self.history.append(
            IterationRecord(
                iteration=iteration,
                mu_hat=np.asarray(mu_hat, dtype=float).copy(),
                e_hat=float(e_hat),
                l_y=self.Py.shape[1],
                l_q=self.Pq.shape[1],
                m_y=self.enlarged.m_y,
                m_q=self.enlarged.m_q,
                sigma_y=self.calibration.sigma_y,
                sigma_q=self.calibration.sigma_q,
            )
        )

    def run(self) -> GreedyResult:
        self.initial_spaces()
        self.enforce_saturation()
        mu_hat, e_hat, d_y, d_q = self.argmax_indicator()
        self._record(0, mu_hat, e_hat)
        it = 0
        while e_hat > self.cfg.tol and self.Py.shape[1] + self.Pq.shape[1] < self.cfg.max_basis:
            if it >= self.cfg.max_outer:
                warnings.warn(f"outer iteration cap {self.cfg.max_outer} reached", stacklevel=2)
                break
            it += 1
            self.enrich_primary(mu_hat, d_y, d_q)
            self.refresh()
            self.enforce_saturation()
            mu_hat, e_hat, d_y, d_q = self.argmax_indicator()
            self._record(it, mu_hat, e_hat)
        return GreedyResult(
            basis=self.small,
            enlarged=self.enlarged,
            deim=self.deim,
            stack=self.stack,
            calibration=self.calibration,
            history=self.history,
            converged=bool(e_hat <= self.cfg.tol),
            e_hat=float(e_hat),
            fom_solves=self.cache.solve_count,
            enrichment_mus=self.enrichment_mus,
        )


def initial_spaces(config: GreedyConfig, problem: ProblemDefinition, space: FeSpace, ops: AssembledOperators, grid: TimeGrid, cache: FomCache | None = None):
    """Build the starting basis pair, its enlargement, and the interpolant."""
    driver = GreedyDriver(config, problem, space, ops, grid, cache)
    driver.initial_spaces()
    return driver.small, driver.enlarged, driver.deim


def run_weak_greedy(config: GreedyConfig, problem: ProblemDefinition, space: FeSpace, ops: AssembledOperators, grid: TimeGrid, cache: FomCache | None = None) -> GreedyResult:
    """Drive the full enrichment loop to certification or the basis cap."""
    return GreedyDriver(config, problem, space, ops, grid, cache).run()
