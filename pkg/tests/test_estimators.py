"""Hierarchical error estimators: online gap oracle, sandwich, cost bound."""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eprb.deim import build_deim
from eprb.estimators import (
    calibrate_saturation,
    certified_estimate,
    cost_error_bound,
    effectivity,
    hierarchical_gap,
    saturation_ratio,
    true_errors,
    weighted_norm_sq,
)
from eprb.fe import assemble, build_space
from eprb.fom import coupling_snapshots, solve_fom
from eprb.pod import PodRule, pod
from eprb.problem import TimeGrid, step_signal
from eprb.rom import ReducedBasis, build_hierarchical, lift, solve_rom

from conftest import make_problem


@pytest.fixture(scope="module")
def setting():
    prob = make_problem(u=step_signal(0.75, -1.0, 1.0))
    space = build_space(prob.length, 20, 1)
    ops = assemble(prob, space)
    grid = TimeGrid.uniform(prob.final_time, 25)
    train = [np.array(m, dtype=float) for m in [(1.5, 2.0, 2.5, 3.0), (3.0, 1.5, 4.0, 2.0), (2.0, 4.0, 1.5, 4.5)]]
    trajs = [solve_fom(mu, prob, space, ops, grid) for mu in train]
    y_snap = np.hstack([t.y.T for t in trajs])
    q_snap = np.hstack([t.q.T for t in trajs])
    w3 = np.tile(grid.weights, 3)
    small = ReducedBasis(
        space,
        pod(y_snap, ops.S_y, PodRule(rank=3), weights=w3)[0],
        pod(q_snap, ops.S_q, PodRule(rank=2), weights=w3)[0],
    )
    big = ReducedBasis(
        space,
        pod(y_snap, ops.S_y, PodRule(rank=5), weights=w3)[0],
        pod(q_snap, ops.S_q, PodRule(rank=4), weights=w3)[0],
    )
    deim = build_deim(np.hstack([coupling_snapshots(t) for t in trajs]), PodRule(energy_tol=1e-13))
    stack = build_hierarchical(prob, space, ops, grid, small, big, deim)
    return prob, space, ops, grid, train, trajs, small, big, stack


def test_weighted_norm_matches_explicit_loop():
    rng = np.random.default_rng(3)
    vals = rng.standard_normal((4, 6))
    G = rng.standard_normal((6, 6))
    G = G @ G.T + 6 * np.eye(6)
    w = rng.uniform(0.1, 1.0, 4)
    expect = sum(w[k] * vals[k] @ G @ vals[k] for k in range(4))
    npt.assert_allclose(weighted_norm_sq(vals, G, w), expect, rtol=1e-12)


def test_weighted_norm_without_gram_is_euclidean():
    vals = np.array([[3.0, 4.0], [0.0, 2.0]])
    w = np.array([1.0, 0.5])
    assert weighted_norm_sq(vals, None, w) == pytest.approx(25.0 + 0.5 * 4.0)


def test_gap_matches_lifted_difference(setting):
    prob, space, ops, grid, train, trajs, small, big, stack = setting
    mu = np.array([2.4, 2.9, 3.1, 2.2])
    ts = solve_rom(mu, stack.small, grid)
    tb = solve_rom(mu, stack.big, grid)
    gy, gq = hierarchical_gap(ts, tb, stack, grid)
    ys, qs = lift(small, ts)
    yb, qb = lift(big, tb)
    gy_ref = np.sqrt(weighted_norm_sq(yb - ys, ops.S_y, grid.weights))
    gq_ref = np.sqrt(weighted_norm_sq(qb - qs, ops.S_q, grid.weights))
    assert abs(gy - gy_ref) <= 1e-10
    assert abs(gq - gq_ref) <= 1e-10


def test_gap_zero_for_identical_bases(setting):
    prob, space, ops, grid, train, trajs, small, big, stack = setting
    same = build_hierarchical(
        prob, space, ops, grid, small, small, build_deim(np.hstack([coupling_snapshots(t) for t in trajs]), PodRule(energy_tol=1e-13))
    )
    mu = train[0]
    ts = solve_rom(mu, same.small, grid)
    tb = solve_rom(mu, same.big, grid)
    gy, gq = hierarchical_gap(ts, tb, same, grid)
    assert gy <= 1e-11 and gq <= 1e-11


def test_certified_estimate_scaling():
    assert certified_estimate(1.5, 0.75) == pytest.approx(3.0)
    assert certified_estimate(2.0, 0.0) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        certified_estimate(1.0, 1.0)
    with pytest.raises(ValueError):
        certified_estimate(1.0, -0.1)


def test_effectivity_conventions():
    assert effectivity(2.0, 1.0) == pytest.approx(2.0)
    assert effectivity(0.0, 0.0) == 1.0
    with pytest.warns(UserWarning):
        assert effectivity(1e-3, 0.0) == np.inf


def test_saturation_ratio_conventions():
    assert saturation_ratio(2.0, 1.0) == pytest.approx(0.25)
    assert saturation_ratio(0.0, 0.0) == 0.0
    assert saturation_ratio(1e-12, 5e-13) == pytest.approx(0.25)
    # below the zero threshold both errors count as vanished
    assert saturation_ratio(1e-14, 1e-14) == 0.0


def test_calibration_takes_worst_ratio():
    mus = np.arange(8).reshape(2, 4)
    cal = calibrate_saturation(mus, [1.0, 2.0], [0.5, 0.2], [1.0, 1.0], [0.3, 0.6])
    assert cal.sigma_y == pytest.approx(0.25)
    assert cal.sigma_q == pytest.approx(0.36)
    assert cal.eta_bar_q == pytest.approx(np.sqrt(1.36 / 0.64))
    assert cal.eta_bar_y >= 1.0


def test_cost_bound_hand_value():
    # alpha_j = 2 and length = pi make the Poincare factor exactly one
    assert cost_error_bound(0.5, 4.0, 2.0, np.pi) == pytest.approx(0.25 + 2.0)
    assert cost_error_bound(0.0, 4.0, 2.0, np.pi) == 0.0


@given(st.floats(0.0, 0.99), st.floats(0.0, 10.0))
@settings(max_examples=50, deadline=None)
def test_estimate_dominates_gap(sigma, gap):
    assert certified_estimate(gap, sigma) >= gap


def test_gap_identity_and_triangle(setting):
    """gap^2 = E_l^2 - 2<e_l, e_m> + E_m^2 exactly, and |E_l - E_m| <= gap <= E_l + E_m."""
    prob, space, ops, grid, train, trajs, small, big, stack = setting
    es_y, eb_y, es_q, eb_q = [], [], [], []
    for mu, fom in zip(train, trajs):
        ts = solve_rom(mu, stack.small, grid)
        tb = solve_rom(mu, stack.big, grid)
        ey_s, eq_s = true_errors(fom, ts, small, ops, grid)
        ey_b, eq_b = true_errors(fom, tb, big, ops, grid)
        gy, gq = hierarchical_gap(ts, tb, stack, grid)
        ys, qs = lift(small, ts)
        yb, qb = lift(big, tb)
        for gap, e_s, e_b, diff_s, diff_b, gram in (
            (gy, ey_s, ey_b, fom.y - ys, fom.y - yb, ops.S_y),
            (gq, eq_s, eq_b, fom.q - qs, fom.q - qb, ops.S_q),
        ):
            cross = float(np.einsum("k,kn,kn->", grid.weights, diff_s, (gram @ diff_b.T).T))
            # identity has cancellation; slack scales with the summands
            slack = 1e-12 * (e_s**2 + e_b**2 + abs(cross))
            npt.assert_allclose(gap**2, e_s**2 - 2.0 * cross + e_b**2, rtol=1e-6, atol=slack)
            assert abs(e_s - e_b) <= gap + 1e-10
            assert gap <= e_s + e_b + 1e-10
        es_y.append(ey_s)
        eb_y.append(ey_b)
        es_q.append(eq_s)
        eb_q.append(eq_b)
    cal = calibrate_saturation(train, es_y, eb_y, es_q, eb_q)
    # the richer basis wins on its own training set
    assert 0.0 <= cal.sigma_y < 1.0 and 0.0 <= cal.sigma_q < 1.0
    assert cal.eta_bar_y >= 1.0 and cal.eta_bar_q >= 1.0


def test_true_errors_zero_for_lifted_rom(setting):
    prob, space, ops, grid, train, trajs, small, big, stack = setting
    mu = train[1]
    ts = solve_rom(mu, stack.small, grid)
    y_l, q_l = lift(small, ts)
    fake = type(trajs[0])(
        mu=mu,
        y=y_l,
        q=q_l,
        b=trajs[1].b,
        newton_iters=trajs[1].newton_iters,
        min_y=float(y_l.min()),
        positivity_violated=False,
        within_state_bounds=True,
        state_bound=trajs[1].state_bound,
        residual_history=None,
    )
    ey, eq = true_errors(fake, ts, small, ops, grid)
    assert ey <= 1e-12 and eq <= 1e-12
