"""Galerkin reduced-order model with interpolated nonlinearity.

Projection uses a pair of bases (parabolic field in V, elliptic field in
V0) that are orthonormal in the respective energy inner products, and the
shared coupling interpolant.  All online data is reduced-dimensional; the
lifting matrices stay outside the operator container so the online solve
cannot touch a full-order array even by accident.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .deim import DeimInterpolant
from .fe import AssembledOperators, FeSpace, initial_load
from .fom import NewtonConfig, NewtonDivergedError, coupling, coupling_partials
from .problem import ProblemDefinition, TimeGrid

__all__ = [
    "ReducedBasis",
    "EnlargedBasis",
    "RomOperators",
    "HierarchicalRom",
    "RomTrajectory",
    "BatchRomResult",
    "project_operators",
    "attach_cost_data",
    "build_hierarchical",
    "solve_rom",
    "solve_rom_batch",
    "solve_rom_sensitivities",
    "lift",
]


@dataclass(frozen=True)
class ReducedBasis:
    """Basis pair tagged with the FE space it extends.

    ``y_modes`` is S_y-orthonormal, ``q_modes`` is S_q-orthonormal.
    """

    space: FeSpace
    y_modes: np.ndarray  # (dim_V, l_y)
    q_modes: np.ndarray  # (dim_V0, l_q)

    @property
    def l_y(self) -> int:
        return self.y_modes.shape[1]

    @property
    def l_q(self) -> int:
        return self.q_modes.shape[1]

    def truncated(self, l_y: int, l_q: int) -> "ReducedBasis":
        return ReducedBasis(self.space, self.y_modes[:, :l_y], self.q_modes[:, :l_q])


@dataclass(frozen=True)
class EnlargedBasis:
    """Nested enlargement: the big basis shares its leading columns with the
    small one, the extra columns are S-orthonormal and orthogonal to them."""

    small: ReducedBasis
    y_extra: np.ndarray  # (dim_V, m_y - l_y)
    q_extra: np.ndarray  # (dim_V0, m_q - l_q)

    @property
    def m_y(self) -> int:
        return self.small.l_y + self.y_extra.shape[1]

    @property
    def m_q(self) -> int:
        return self.small.l_q + self.q_extra.shape[1]

    def big(self) -> ReducedBasis:
        return ReducedBasis(
            self.small.space,
            np.hstack([self.small.y_modes, self.y_extra]),
            np.hstack([self.small.q_modes, self.q_extra]),
        )


@dataclass
class RomOperators:
    """Projected operators of one basis pair; strictly reduced-dimensional."""

    l_y: int
    l_q: int
    M_y_r: np.ndarray
    A1_r: np.ndarray
    M_q_r: np.ndarray
    A2_r: np.ndarray
    G_y: np.ndarray  # (l_y, n_pts) projected mass times interpolation
    G_q: np.ndarray  # (l_q, n_pts)
    eval_y: np.ndarray  # (n_pts, l_y) reduced coeffs -> y at points
    eval_q: np.ndarray  # (n_pts, l_q)
    b_r: np.ndarray  # (K, l_q) projected per-step boundary vectors
    y0_r: np.ndarray  # (l_y,) projected initial load
    data_proj: Optional[np.ndarray] = None  # (K, l_q): basis^T M_q w^k
    data_sq: Optional[np.ndarray] = None  # (K,): w^k^T M_q w^k


@dataclass
class RomTrajectory:
    mu: np.ndarray
    y: np.ndarray  # (K, l_y) reduced coefficients
    q: np.ndarray  # (K, l_q)
    newton_iters: np.ndarray


@dataclass
class HierarchicalRom:
    """Nested ROM pair plus the Gram blocks the online gap estimate needs."""

    small: RomOperators
    big: RomOperators
    gram_y_ll: np.ndarray
    gram_y_ml: np.ndarray
    gram_y_mm: np.ndarray
    gram_q_ll: np.ndarray
    gram_q_ml: np.ndarray
    gram_q_mm: np.ndarray


def project_operators(
    problem: ProblemDefinition,
    space: FeSpace,
    ops: AssembledOperators,
    grid: TimeGrid,
    basis: ReducedBasis,
    deim: DeimInterpolant,
) -> RomOperators:
    Py, Pq = basis.y_modes, basis.q_modes
    u_vals = grid.sample_input(problem.u)
    # b_k = -u(t_k) e_L, so the projection only needs the basis row at x = L
    b_r = -u_vals[:, None] * Pq[ops.boundary_index][None, :]
    My_pad = (ops.M_y @ np.vstack([np.zeros((1, deim.n_modes)), deim.basis]))
    return RomOperators(
        l_y=basis.l_y,
        l_q=basis.l_q,
        M_y_r=Py.T @ (ops.M_y @ Py),
        A1_r=Py.T @ (ops.A1 @ Py),
        M_q_r=Pq.T @ (ops.M_q @ Pq),
        A2_r=Pq.T @ (ops.A2 @ Pq),
        G_y=deim.point_matrix_inverse_applied(Py.T @ My_pad),
        G_q=deim.point_matrix_inverse_applied(Pq.T @ (ops.M_q @ deim.basis)),
        eval_y=Py[deim.padded_indices, :],
        eval_q=Pq[deim.indices, :],
        b_r=b_r,
        y0_r=Py.T @ initial_load(problem, space),
    )


def attach_cost_data(rom: RomOperators, basis: ReducedBasis, ops: AssembledOperators, w: np.ndarray) -> None:
    """Precompute the data-dependent cost terms on the reduced side."""
    Mw = (ops.M_q @ w.T).T  # (K, dim_V0)
    rom.data_proj = Mw @ basis.q_modes
    rom.data_sq = np.einsum("kn,kn->k", w, Mw)


def build_hierarchical(
    problem: ProblemDefinition,
    space: FeSpace,
    ops: AssembledOperators,
    grid: TimeGrid,
    small: ReducedBasis,
    big: ReducedBasis,
    deim: DeimInterpolant,
) -> HierarchicalRom:
    Sy, Sq = ops.S_y, ops.S_q
    SyPl, SqPl = Sy @ small.y_modes, Sq @ small.q_modes
    return HierarchicalRom(
        small=project_operators(problem, space, ops, grid, small, deim),
        big=project_operators(problem, space, ops, grid, big, deim),
        gram_y_ll=small.y_modes.T @ SyPl,
        gram_y_ml=big.y_modes.T @ SyPl,
        gram_y_mm=big.y_modes.T @ (Sy @ big.y_modes),
        gram_q_ll=small.q_modes.T @ SqPl,
        gram_q_ml=big.q_modes.T @ SqPl,
        gram_q_mm=big.q_modes.T @ (Sq @ big.q_modes),
    )


def _rom_residual(mu, rom, dt, y_prev, yr, qr, b_k):
    f_pts = coupling(rom.eval_y @ yr, rom.eval_q @ qr)
    r_y = rom.M_y_r @ (yr - y_prev) + mu[0] * dt * (rom.A1_r @ yr) - mu[1] * dt * (rom.G_y @ f_pts)
    r_q = mu[2] * (rom.A2_r @ qr) + mu[3] * (rom.G_q @ f_pts) + b_k
    return np.concatenate((r_y, r_q))


def _rom_jacobian(mu, rom, dt, yr, qr):
    y_pts = rom.eval_y @ yr
    q_pts = rom.eval_q @ qr
    d_y, d_q = coupling_partials(y_pts, q_pts)
    J = np.empty((rom.l_y + rom.l_q, rom.l_y + rom.l_q))
    ly = rom.l_y
    J[:ly, :ly] = rom.M_y_r + mu[0] * dt * rom.A1_r - mu[1] * dt * (rom.G_y * d_y) @ rom.eval_y
    J[:ly, ly:] = -mu[1] * dt * (rom.G_y * d_q) @ rom.eval_q
    J[ly:, :ly] = mu[3] * (rom.G_q * d_y) @ rom.eval_y
    J[ly:, ly:] = mu[2] * rom.A2_r + mu[3] * (rom.G_q * d_q) @ rom.eval_q
    return J


def solve_rom(mu, rom: RomOperators, grid: TimeGrid, cfg: NewtonConfig = NewtonConfig()) -> RomTrajectory:
    """Reduced analogue of the full-order time stepping (same Newton rules)."""
    mu = np.asarray(mu, dtype=float)
    K = grid.n_steps
    ly, lq = rom.l_y, rom.l_q
    y = np.empty((K, ly))
    q = np.empty((K, lq))
    iters = np.zeros(K, dtype=int)

    y[0] = np.linalg.solve(rom.M_y_r, rom.y0_r)
    q[0] = _rom_initial_elliptic(mu, rom, y[0], cfg)

    dt = grid.dt
    for k in range(1, K):
        yk, qk = y[k - 1].copy(), q[k - 1].copy()
        r = _rom_residual(mu, rom, dt, y[k - 1], yk, qk, rom.b_r[k])
        rn = float(np.linalg.norm(r))
        it = 0
        while rn > cfg.abs_tol:
            if it >= cfg.max_iter:
                raise NewtonDivergedError(k + 1, rn)
            J = _rom_jacobian(mu, rom, dt, yk, qk)
            dx = np.linalg.solve(J, -r)
            ok = False
            s = 1.0
            for _ in range(cfg.max_backtracks + 1):
                y_try = yk + s * dx[:ly]
                q_try = qk + s * dx[ly:]
                r_try = _rom_residual(mu, rom, dt, y[k - 1], y_try, q_try, rom.b_r[k])
                rn_try = float(np.linalg.norm(r_try))
                if np.isfinite(rn_try) and rn_try <= (1.0 - cfg.armijo_c * s) * rn:
                    ok = True
                    break
                s *= 0.5
            if not ok:
                raise NewtonDivergedError(k + 1, rn)
            yk, qk, r, rn = y_try, q_try, r_try, rn_try
            it += 1
        y[k], q[k], iters[k] = yk, qk, it
    return RomTrajectory(mu=mu, y=y, q=q, newton_iters=iters)


@dataclass
class BatchRomResult:
    """Stacked reduced trajectories for a parameter sweep.

    ``failed`` flags parameters whose Newton iteration did not converge;
    their trajectory rows are not meaningful.
    """

    mus: np.ndarray  # (B, 4)
    y: np.ndarray  # (B, K, l_y)
    q: np.ndarray  # (B, K, l_q)
    failed: np.ndarray  # (B,) bool


def _batch_residual(mu, rom, dt, Y_prev, Y, Q, b_k):
    f = coupling(Y @ rom.eval_y.T, Q @ rom.eval_q.T)
    r_y = (
        (Y - Y_prev) @ rom.M_y_r.T
        + (dt * mu[:, 0])[:, None] * (Y @ rom.A1_r.T)
        - (dt * mu[:, 1])[:, None] * (f @ rom.G_y.T)
    )
    r_q = mu[:, 2][:, None] * (Q @ rom.A2_r.T) + mu[:, 3][:, None] * (f @ rom.G_q.T) + b_k[None, :]
    return np.concatenate((r_y, r_q), axis=1)


def _batch_jacobian(mu, rom, dt, Y, Q):
    d_y, d_q = coupling_partials(Y @ rom.eval_y.T, Q @ rom.eval_q.T)
    B = Y.shape[0]
    ly, lq = rom.l_y, rom.l_q
    J = np.empty((B, ly + lq, ly + lq))
    J[:, :ly, :ly] = rom.M_y_r + (dt * mu[:, 0])[:, None, None] * rom.A1_r - (dt * mu[:, 1])[
        :, None, None
    ] * np.einsum("lp,bp,pm->blm", rom.G_y, d_y, rom.eval_y)
    J[:, :ly, ly:] = -(dt * mu[:, 1])[:, None, None] * np.einsum("lp,bp,pm->blm", rom.G_y, d_q, rom.eval_q)
    J[:, ly:, :ly] = mu[:, 3][:, None, None] * np.einsum("lp,bp,pm->blm", rom.G_q, d_y, rom.eval_y)
    J[:, ly:, ly:] = mu[:, 2][:, None, None] * rom.A2_r + mu[:, 3][:, None, None] * np.einsum(
        "lp,bp,pm->blm", rom.G_q, d_q, rom.eval_q
    )
    return J


def _batch_newton(residual, jacobian, X0, cfg):
    """Damped Newton on a stack of independent systems of equal shape.

    ``residual``/``jacobian`` map (indices, values) to stacked arrays for the
    selected batch rows.  Returns (values, failed mask).
    """
    X = X0.copy()
    B = X.shape[0]
    failed = np.zeros(B, dtype=bool)
    idx = np.arange(B)
    r = residual(idx, X)
    rn = np.linalg.norm(r, axis=1)
    active = rn > cfg.abs_tol
    it = 0
    while active.any():
        if it >= cfg.max_iter:
            failed[active] = True
            break
        ai = idx[active]
        J = jacobian(ai, X[ai])
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                dX = np.linalg.solve(J, -r[ai][..., None])[..., 0]
            except np.linalg.LinAlgError:
                # fall back to row-by-row so one singular system cannot
                # poison the whole batch
                dX = np.empty_like(r[ai])
                for j in range(ai.size):
                    try:
                        dX[j] = np.linalg.solve(J[j], -r[ai[j]])
                    except np.linalg.LinAlgError:
                        dX[j] = np.nan
        s = np.ones(ai.size)
        accepted = np.zeros(ai.size, dtype=bool)
        X_trial = X[ai].copy()
        r_trial = r[ai].copy()
        rn_trial = rn[ai].copy()
        for _ in range(cfg.max_backtracks + 1):
            todo = ~accepted
            if not todo.any():
                break
            cand = X[ai[todo]] + s[todo, None] * dX[todo]
            rc = residual(ai[todo], cand)
            rnc = np.linalg.norm(rc, axis=1)
            ok = np.isfinite(rnc) & (rnc <= (1.0 - cfg.armijo_c * s[todo]) * rn[ai[todo]])
            sel = np.flatnonzero(todo)[ok]
            X_trial[sel] = cand[ok]
            r_trial[sel] = rc[ok]
            rn_trial[sel] = rnc[ok]
            accepted[sel] = True
            s[np.flatnonzero(todo)[~ok]] *= 0.5
        failed[ai[~accepted]] = True
        moved = ai[accepted]
        keep = accepted
        X[moved] = X_trial[keep]
        r[moved] = r_trial[keep]
        rn[moved] = rn_trial[keep]
        active = (rn > cfg.abs_tol) & ~failed
        it += 1
    return X, failed


def solve_rom_batch(mus, rom: RomOperators, grid: TimeGrid, cfg: NewtonConfig = NewtonConfig()) -> BatchRomResult:
    """Sweep companion of solve_rom: one vectorized Newton across parameters.

    Produces the same trajectories as per-parameter solve_rom calls (to
    solver tolerance); nonconverged parameters are flagged, not raised.
    """
    mus = np.atleast_2d(np.asarray(mus, dtype=float))
    B = mus.shape[0]
    K = grid.n_steps
    ly, lq = rom.l_y, rom.l_q
    y = np.empty((B, K, ly))
    q = np.empty((B, K, lq))
    y[:, 0] = np.linalg.solve(rom.M_y_r, rom.y0_r)[None, :]

    y_pts0 = y[0, 0] @ rom.eval_y.T

    def res0(ai, Q):
        f = coupling(y_pts0[None, :], Q @ rom.eval_q.T)
        return mus[ai, 2][:, None] * (Q @ rom.A2_r.T) + mus[ai, 3][:, None] * (f @ rom.G_q.T) + rom.b_r[0][None, :]

    def jac0(ai, Q):
        _, d_q = coupling_partials(np.broadcast_to(y_pts0, (ai.size, y_pts0.size)), Q @ rom.eval_q.T)
        return mus[ai, 2][:, None, None] * rom.A2_r + mus[ai, 3][:, None, None] * np.einsum(
            "lp,bp,pm->blm", rom.G_q, d_q, rom.eval_q
        )

    q0, failed = _batch_newton(res0, jac0, np.zeros((B, lq)), cfg)
    q[:, 0] = q0

    dt = grid.dt
    for k in range(1, K):
        Y_prev = y[:, k - 1]
        b_k = rom.b_r[k]

        def res(ai, X):
            return _batch_residual(mus[ai], rom, dt, Y_prev[ai], X[:, :ly], X[:, ly:], b_k)

        def jac(ai, X):
            return _batch_jacobian(mus[ai], rom, dt, X[:, :ly], X[:, ly:])

        X0 = np.concatenate((y[:, k - 1], q[:, k - 1]), axis=1)
        X, step_failed = _batch_newton(res, jac, X0, cfg)
        failed |= step_failed
        y[:, k] = X[:, :ly]
        q[:, k] = X[:, ly:]
    return BatchRomResult(mus=mus, y=y, q=q, failed=failed)


def solve_rom_sensitivities(mu, rom: RomOperators, traj: RomTrajectory, grid: TimeGrid):
    """Reduced parameter sensitivities by forward differentiation.

    Mirrors the full-order version: each step reuses the Jacobian at the
    converged reduced state for four right-hand sides.  Returns arrays
    (4, K, l_y) and (4, K, l_q) of reduced coefficient derivatives.
    """
    mu = np.asarray(mu, dtype=float)
    K = grid.n_steps
    ly, lq = rom.l_y, rom.l_q
    dt = grid.dt
    s_y = np.zeros((4, K, ly))
    s_q = np.zeros((4, K, lq))

    # initial y is parameter independent; differentiate the elliptic solve
    y0, q0 = traj.y[0], traj.q[0]
    y_pts = rom.eval_y @ y0
    q_pts = rom.eval_q @ q0
    f_pts = coupling(y_pts, q_pts)
    _, d_q = coupling_partials(y_pts, q_pts)
    J_q = mu[2] * rom.A2_r + mu[3] * (rom.G_q * d_q) @ rom.eval_q
    rhs0 = np.zeros((lq, 4))
    rhs0[:, 2] = -(rom.A2_r @ q0)
    rhs0[:, 3] = -(rom.G_q @ f_pts)
    s_q[:, 0, :] = np.linalg.solve(J_q, rhs0).T

    for k in range(1, K):
        yk, qk = traj.y[k], traj.q[k]
        f_pts = coupling(rom.eval_y @ yk, rom.eval_q @ qk)
        J = _rom_jacobian(mu, rom, dt, yk, qk)
        rhs = np.zeros((ly + lq, 4))
        rhs[:ly] = rom.M_y_r @ s_y[:, k - 1, :].T
        rhs[:ly, 0] -= dt * (rom.A1_r @ yk)
        rhs[:ly, 1] += dt * (rom.G_y @ f_pts)
        rhs[ly:, 2] = -(rom.A2_r @ qk)
        rhs[ly:, 3] = -(rom.G_q @ f_pts)
        sol = np.linalg.solve(J, rhs)
        s_y[:, k, :] = sol[:ly].T
        s_q[:, k, :] = sol[ly:].T
    return s_y, s_q


def _rom_initial_elliptic(mu, rom, y1, cfg):
    qr = np.zeros(rom.l_q)
    y_pts = rom.eval_y @ y1

    def res(qv):
        return mu[2] * (rom.A2_r @ qv) + mu[3] * (rom.G_q @ coupling(y_pts, rom.eval_q @ qv)) + rom.b_r[0]

    r = res(qr)
    rn = float(np.linalg.norm(r))
    it = 0
    while rn > cfg.abs_tol:
        if it >= cfg.max_iter:
            raise NewtonDivergedError(1, rn)
        _, d_q = coupling_partials(y_pts, rom.eval_q @ qr)
        J = mu[2] * rom.A2_r + mu[3] * (rom.G_q * d_q) @ rom.eval_q
        dq = np.linalg.solve(J, -r)
        ok = False
        s = 1.0
        for _ in range(cfg.max_backtracks + 1):
            q_try = qr + s * dq
            r_try = res(q_try)
            rn_try = float(np.linalg.norm(r_try))
            if np.isfinite(rn_try) and rn_try <= (1.0 - cfg.armijo_c * s) * rn:
                ok = True
                break
            s *= 0.5
        if not ok:
            raise NewtonDivergedError(1, rn)
        qr, r, rn = q_try, r_try, rn_try
        it += 1
    return qr


def lift(basis: ReducedBasis, traj: RomTrajectory):
    """Expand reduced coefficients to full nodal trajectories."""
    return traj.y @ basis.y_modes.T, traj.q @ basis.q_modes.T
