"""Discrete empirical interpolation of the coupling nonlinearity.

One interpolant is built from snapshots of f = sqrt(y) sinh(q) sampled at
the V0 mesh nodes (the value at x = 0 is identically zero because q
vanishes there, so the parabolic block reuses the same interpolant with a
zero-padded basis).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .pod import PodRule, pod

__all__ = ["DeimInterpolant", "build_deim"]


@dataclass
class DeimInterpolant:
    basis: np.ndarray  # (dim_V0, n_modes), Euclidean-orthonormal
    indices: np.ndarray  # (n_modes,) interpolation dofs in V0 numbering
    _lu: tuple

    @property
    def n_modes(self) -> int:
        return self.basis.shape[1]

    @property
    def padded_basis(self) -> np.ndarray:
        """Basis extended by the x = 0 node, where f vanishes identically."""
        return np.vstack([np.zeros((1, self.n_modes)), self.basis])

    @property
    def padded_indices(self) -> np.ndarray:
        return self.indices + 1

    def coefficients(self, values_at_points: np.ndarray) -> np.ndarray:
        """Interpolation coefficients from samples at the selected dofs."""
        return lu_solve(self._lu, values_at_points)

    def interpolate(self, values_at_points: np.ndarray) -> np.ndarray:
        return self.basis @ self.coefficients(values_at_points)

    def point_matrix_inverse_applied(self, mat: np.ndarray) -> np.ndarray:
        """Return mat @ (P^T basis)^{-1} without forming the inverse."""
        return lu_solve(self._lu, mat.T, trans=1).T


def build_deim(snapshots: np.ndarray, rule: PodRule) -> DeimInterpolant:
    """Euclidean POD of the nonlinearity snapshots plus greedy point search.

    The first point is the largest entry of the first mode; each further
    point maximizes the residual of interpolating the next mode with the
    points selected so far.
    """
    basis, _ = pod(snapshots, None, rule)
    if basis.shape[1] == 0:
        raise ValueError("nonlinearity snapshots have rank zero; cannot interpolate")
    indices = [int(np.argmax(np.abs(basis[:, 0])))]
    for j in range(1, basis.shape[1]):
        c = np.linalg.solve(basis[indices, :j], basis[indices, j])
        residual = basis[:, j] - basis[:, :j] @ c
        indices.append(int(np.argmax(np.abs(residual))))
    indices = np.array(indices, dtype=np.intp)
    if np.unique(indices).size != indices.size:
        raise RuntimeError("interpolation points are not distinct")
    lu = lu_factor(basis[indices, :])
    return DeimInterpolant(basis=basis, indices=indices, _lu=lu)
