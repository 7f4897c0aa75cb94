"""Proper orthogonal decomposition in a weighted inner product.

Given snapshots X, a Gram matrix S and optional column weights w, the POD
modes are the leading eigenvectors of the weighted snapshot Gramian.  They
are computed from the SVD of L^T X diag(sqrt(w)) with S = L L^T, which
yields S-orthonormal modes to machine precision even near the numerical
rank (a plain Gramian eigendecomposition loses orthogonality there).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sps
from scipy.linalg import solve_triangular

__all__ = ["PodRule", "pod", "orthonormalize_against", "orthonormality_defect"]

_RANK_TOL = 1e-13


@dataclass(frozen=True)
class PodRule:
    """Mode-count rule: fixed rank, or smallest r capturing the energy share
    sum_{i<=r} sigma_i^2 >= (1 - energy_tol) * sum_i sigma_i^2."""

    rank: int | None = None
    energy_tol: float | None = None
    max_modes: int | None = None

    def __post_init__(self):
        if self.rank is None and self.energy_tol is None:
            raise ValueError("PodRule needs a rank or an energy tolerance")

    def select(self, sigmas: np.ndarray, numerical_rank: int) -> int:
        if self.rank is not None:
            r = self.rank
            if r > numerical_rank:
                warnings.warn(
                    f"requested {r} modes but numerical rank is {numerical_rank}; truncating",
                    stacklevel=3,
                )
            r = min(r, numerical_rank)
        else:
            energy = sigmas**2
            total = float(energy.sum())
            if total == 0.0:
                return 0
            cum = np.cumsum(energy)
            r = int(np.searchsorted(cum, (1.0 - self.energy_tol) * total) + 1)
            r = min(r, numerical_rank)
        if self.max_modes is not None:
            r = min(r, self.max_modes)
        return r


def _cholesky_of(gram) -> np.ndarray | None:
    if gram is None:
        return None
    dense = gram.toarray() if sps.issparse(gram) else np.asarray(gram, dtype=float)
    return np.linalg.cholesky(dense)


def pod(snapshots: np.ndarray, gram, rule: PodRule, weights: np.ndarray | None = None):
    """Return (modes, sigmas): S-orthonormal modes and all singular values.

    ``gram=None`` means the Euclidean inner product.  ``weights`` scales the
    snapshot columns (e.g. time-quadrature weights), so truncation error is
    optimal in the corresponding weighted sum of squared S-norms.
    """
    X = np.asarray(snapshots, dtype=float)
    if X.ndim != 2:
        raise ValueError("snapshots must be a 2d array (dim, count)")
    if weights is not None:
        X = X * np.sqrt(np.asarray(weights, dtype=float))[None, :]
    L = _cholesky_of(gram)
    Z = X if L is None else L.T @ X
    if Z.shape[1] == 0:
        return np.zeros((X.shape[0], 0)), np.zeros(0)
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    numerical_rank = int(np.sum(s > (s[0] * _RANK_TOL if s.size else 0.0)))
    r = rule.select(s, numerical_rank)
    Ur = U[:, :r]
    modes = Ur if L is None else solve_triangular(L.T, Ur, lower=False)
    return modes, s


def orthonormalize_against(snapshots: np.ndarray, basis: np.ndarray, gram) -> np.ndarray:
    """Project the basis span out of the snapshots (two Gram-Schmidt passes)."""
    X = np.asarray(snapshots, dtype=float).copy()
    if basis.shape[1] == 0:
        return X
    apply = (lambda v: gram @ v) if gram is not None else (lambda v: v)
    for _ in range(2):
        X -= basis @ (basis.T @ apply(X))
    return X


def orthonormality_defect(modes: np.ndarray, gram) -> float:
    G = modes.T @ (gram @ modes if gram is not None else modes)
    return float(np.max(np.abs(G - np.eye(modes.shape[1])))) if modes.shape[1] else 0.0
