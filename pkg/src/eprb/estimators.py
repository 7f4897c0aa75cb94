"""Hierarchical error estimation for the reduced model.

The time-integrated state error E and its computable surrogate, the gap
between two nested reduced solutions, are measured in the energy norms
(S_y for the parabolic field, S_q for the elliptic one) with trapezoid
weights in time.  Under the saturation assumption

    E_big^2 <= sigma * E_small^2,   sigma < 1,

the gap sandwiches the true error,

    gap^2 / (1 + sigma) <= E_small^2 <= gap^2 / (1 - sigma),

so gap / sqrt(1 - sigma) is a certified upper bound with effectivity at
most sqrt((1 + sigma) / (1 - sigma)).  sigma is calibrated as the largest
squared error ratio seen on a training set.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .fe import AssembledOperators
from .fom import StateTrajectory
from .problem import TimeGrid
from .rom import HierarchicalRom, ReducedBasis, RomTrajectory, lift

__all__ = [
    "weighted_norm_sq",
    "true_errors",
    "hierarchical_gap",
    "certified_estimate",
    "effectivity",
    "saturation_ratio",
    "SaturationCalibration",
    "calibrate_saturation",
    "cost_error_bound",
    "ErrorReport",
]

# squared norms below this count as exactly zero (both errors vanished)
_ZERO_SQ = 1e-26


def weighted_norm_sq(values: np.ndarray, gram, weights: np.ndarray) -> float:
    """sum_k weights[k] * ||values[k]||_gram^2 for a (K, n) trajectory."""
    Gv = (gram @ values.T).T if gram is not None else values
    return float(np.einsum("k,kn,kn->", weights, values, Gv))


def true_errors(
    fom: StateTrajectory,
    rom_traj: RomTrajectory,
    basis: ReducedBasis,
    ops: AssembledOperators,
    grid: TimeGrid,
):
    """Time-integrated energy-norm distances (E_y, E_q) of ROM vs FOM."""
    y_l, q_l = lift(basis, rom_traj)
    ey = weighted_norm_sq(fom.y - y_l, ops.S_y, grid.weights)
    eq = weighted_norm_sq(fom.q - q_l, ops.S_q, grid.weights)
    return float(np.sqrt(max(ey, 0.0))), float(np.sqrt(max(eq, 0.0)))


def _gap_field(small_c, big_c, g_ll, g_ml, g_mm, weights) -> float:
    # ||x_m - x_l||^2 expanded in reduced coordinates; tiny negatives from
    # roundoff are clamped before the square root
    quad = (
        np.einsum("km,mn,kn->k", big_c, g_mm, big_c)
        - 2.0 * np.einsum("km,ml,kl->k", big_c, g_ml, small_c)
        + np.einsum("kl,ln,kn->k", small_c, g_ll, small_c)
    )
    total = float(weights @ np.maximum(quad, 0.0))
    return float(np.sqrt(max(total, 0.0)))


def hierarchical_gap(
    small: RomTrajectory,
    big: RomTrajectory,
    stack: HierarchicalRom,
    grid: TimeGrid,
):
    """Online gap (gap_y, gap_q) between the nested reduced solutions.

    Works entirely on reduced coefficients and the precomputed Gram blocks;
    no full-order array is involved.
    """
    gy = _gap_field(small.y, big.y, stack.gram_y_ll, stack.gram_y_ml, stack.gram_y_mm, grid.weights)
    gq = _gap_field(small.q, big.q, stack.gram_q_ll, stack.gram_q_ml, stack.gram_q_mm, grid.weights)
    return gy, gq


def certified_estimate(gap: float, sigma: float) -> float:
    """Upper error bound gap / sqrt(1 - sigma); requires sigma in [0, 1)."""
    if not 0.0 <= sigma < 1.0:
        raise ValueError(f"saturation constant must lie in [0, 1), got {sigma}")
    return gap / np.sqrt(1.0 - sigma)


def effectivity(estimate: float, true_error: float) -> float:
    """Overestimation ratio; 0/0 counts as 1, bound without error is flagged."""
    if true_error**2 <= _ZERO_SQ:
        if estimate**2 <= _ZERO_SQ:
            return 1.0
        warnings.warn("estimator positive although the true error vanished", stacklevel=2)
        return np.inf
    return estimate / true_error


def saturation_ratio(err_small: float, err_big: float) -> float:
    """Squared error ratio E_big^2 / E_small^2 with the 0/0 -> 0 convention."""
    if err_small**2 <= _ZERO_SQ:
        return 0.0
    return err_big**2 / err_small**2


@dataclass
class SaturationCalibration:
    """Trained saturation constants and induced worst-case effectivities."""

    sigma_y: float
    sigma_q: float
    eta_bar_y: float
    eta_bar_q: float
    training_mus: np.ndarray
    ratios_y: np.ndarray
    ratios_q: np.ndarray


def _eta_bar(sigma: float) -> float:
    return float(np.sqrt((1.0 + sigma) / (1.0 - sigma))) if sigma < 1.0 else np.inf


def _ratios(err_small, err_big, floors) -> np.ndarray:
    # pairs with both errors below the floor sit at the precision limit of
    # the solves; their ratio is noise over noise and carries no information
    # about the saturation property, so they are exempted from calibration
    out = []
    for i, (a, b) in enumerate(zip(err_small, err_big)):
        floor = 0.0 if floors is None else float(floors[i])
        out.append(0.0 if a <= floor and b <= floor else saturation_ratio(a, b))
    return np.array(out)


def calibrate_saturation(
    mus,
    errors_y_small,
    errors_y_big,
    errors_q_small,
    errors_q_big,
    floors_y=None,
    floors_q=None,
) -> SaturationCalibration:
    ry = _ratios(errors_y_small, errors_y_big, floors_y)
    rq = _ratios(errors_q_small, errors_q_big, floors_q)
    sy = float(ry.max()) if ry.size else 0.0
    sq = float(rq.max()) if rq.size else 0.0
    return SaturationCalibration(
        sigma_y=sy,
        sigma_q=sq,
        eta_bar_y=_eta_bar(sy),
        eta_bar_q=_eta_bar(sq),
        training_mus=np.asarray(mus, dtype=float),
        ratios_y=ry,
        ratios_q=rq,
    )


def cost_error_bound(est_q: float, j_tilde: float, alpha_j: float, length: float) -> float:
    """Bound on |J_full - J_reduced| from the certified q-error.

    Uses the Poincare constant (L/pi)^2 of the one-sided Dirichlet interval
    to convert the H1-seminorm error into the L2 misfit norm.
    """
    c_p = (length / np.pi) ** 2
    return 0.5 * alpha_j * c_p**2 * est_q**2 + alpha_j * c_p * est_q * float(np.sqrt(max(j_tilde, 0.0)))


@dataclass
class ErrorReport:
    """Per-parameter estimator diagnostics, one row of the sweep report."""

    mu: np.ndarray
    err_y: float
    err_q: float
    err_y_big: float
    err_q_big: float
    gap_y: float
    gap_q: float
    est_y: float
    est_q: float
    eff_y: float
    eff_q: float
    ratio_y: float
    ratio_q: float
