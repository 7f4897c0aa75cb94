"""POD and interpolation oracles on small matrices and FE Gramians."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eprb.deim import build_deim
from eprb.fe import assemble, build_space
from eprb.pod import PodRule, orthonormality_defect, orthonormalize_against, pod

from conftest import make_problem


def fe_gram(n_cells=12):
    space = build_space(1.0, n_cells, 1)
    return assemble(make_problem(), space).S_y, space


class TestPod:
    def test_repeated_vector_gives_normalized_mode(self):
        S, space = fe_gram()
        v = np.sin(space.nodes) + 2.0
        X = np.tile(v[:, None], (1, 5))
        modes, sigmas = pod(X, S, PodRule(rank=3))
        assert modes.shape[1] == 1  # numerical rank is one
        norm = np.sqrt(v @ (S @ v))
        npt.assert_allclose(np.abs(modes[:, 0]), np.abs(v) / norm, rtol=1e-12)
        assert sigmas[1] < 1e-12 * sigmas[0]

    def test_rank_rule_reconstructs_snapshots(self):
        S, space = fe_gram()
        rng = np.random.default_rng(0)
        X = rng.standard_normal((space.dim_V, 4))
        modes, _ = pod(X, S, PodRule(rank=4))
        X_rec = modes @ (modes.T @ (S @ X))
        npt.assert_allclose(X_rec, X, atol=1e-10)

    def test_orthonormality(self):
        S, space = fe_gram()
        rng = np.random.default_rng(1)
        X = rng.standard_normal((space.dim_V, 9))
        modes, _ = pod(X, S, PodRule(rank=9))
        assert orthonormality_defect(modes, S) < 1e-12

    @given(st.integers(1, 8), st.integers(0, 1000))
    @settings(max_examples=25, deadline=None)
    def test_orthonormality_random(self, n_snaps, seed):
        S, space = fe_gram(8)
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((space.dim_V, n_snaps))
        modes, _ = pod(X, S, PodRule(energy_tol=1e-10))
        assert orthonormality_defect(modes, S) < 1e-10

    def test_energy_rule_minimal(self):
        S, space = fe_gram()
        rng = np.random.default_rng(2)
        X = rng.standard_normal((space.dim_V, 8))
        tol = 1e-2
        modes, sigmas = pod(X, S, PodRule(energy_tol=tol))
        r = modes.shape[1]
        energy = sigmas**2
        assert energy[:r].sum() >= (1 - tol) * energy.sum()
        if r > 1:
            assert energy[: r - 1].sum() < (1 - tol) * energy.sum()

    def test_rank_request_beyond_numerical_rank_warns(self):
        S, space = fe_gram()
        v = np.ones(space.dim_V)
        X = np.outer(v, [1.0, 2.0, 3.0])
        with pytest.warns(UserWarning, match="numerical rank"):
            modes, _ = pod(X, S, PodRule(rank=3))
        assert modes.shape[1] == 1

    def test_weighted_truncation_energy(self):
        S, space = fe_gram()
        rng = np.random.default_rng(3)
        X = rng.standard_normal((space.dim_V, 7))
        w = rng.random(7) + 0.5
        r = 3
        modes, sigmas = pod(X, S, PodRule(rank=r), weights=w)
        resid = X - modes @ (modes.T @ (S @ X))
        tail = sum(w[k] * (resid[:, k] @ (S @ resid[:, k])) for k in range(7))
        npt.assert_allclose(tail, (sigmas[r:] ** 2).sum(), rtol=1e-9, atol=1e-12)

    def test_empty_snapshots(self):
        S, space = fe_gram()
        modes, sigmas = pod(np.zeros((space.dim_V, 0)), S, PodRule(energy_tol=1e-10))
        assert modes.shape == (space.dim_V, 0)
        assert sigmas.size == 0

    def test_orthonormalize_against_basis(self):
        S, space = fe_gram()
        rng = np.random.default_rng(4)
        basis, _ = pod(rng.standard_normal((space.dim_V, 3)), S, PodRule(rank=3))
        X = rng.standard_normal((space.dim_V, 5))
        X_perp = orthonormalize_against(X, basis, S)
        npt.assert_allclose(basis.T @ (S @ X_perp), 0.0, atol=1e-12)


class TestDeim:
    def test_single_snapshot_point_at_maximum(self):
        v = np.array([0.1, -2.5, 0.3, 1.0])
        interp = build_deim(v[:, None], PodRule(rank=1))
        assert interp.n_modes == 1
        assert interp.indices[0] == 1  # largest magnitude entry
        npt.assert_allclose(interp.interpolate(v[interp.indices]), v, rtol=1e-13)

    def test_full_rank_reconstructs_snapshots(self):
        rng = np.random.default_rng(5)
        X = rng.standard_normal((30, 6))
        interp = build_deim(X, PodRule(rank=6))
        npt.assert_allclose(interp.interpolate(X[interp.indices]), X, atol=1e-10)

    def test_indices_distinct_and_in_range(self):
        rng = np.random.default_rng(6)
        X = np.cumsum(rng.standard_normal((25, 10)), axis=0)
        interp = build_deim(X, PodRule(energy_tol=1e-12))
        assert np.unique(interp.indices).size == interp.n_modes
        assert interp.indices.min() >= 0 and interp.indices.max() < 25

    def test_padded_variant_first_row_zero(self):
        rng = np.random.default_rng(7)
        interp = build_deim(rng.standard_normal((12, 4)), PodRule(rank=4))
        npt.assert_array_equal(interp.padded_basis[0], 0.0)
        npt.assert_array_equal(interp.padded_indices, interp.indices + 1)

    def test_rank_zero_snapshots_rejected(self):
        with pytest.raises(ValueError, match="rank zero"):
            build_deim(np.zeros((10, 3)), PodRule(rank=2))

    def test_interpolation_exact_on_basis_span(self):
        rng = np.random.default_rng(8)
        X = rng.standard_normal((20, 5))
        interp = build_deim(X, PodRule(rank=3))
        c = rng.standard_normal(3)
        v = interp.basis @ c
        npt.assert_allclose(interp.interpolate(v[interp.indices]), v, atol=1e-12)
