"""End-to-end gates at the reported experiment scale.

Each gate prints exactly one pass/fail line with its measured numbers
(run with ``-s`` to see them on success).  The expensive builds are
module fixtures: one certified model per input signal and one recovery
setup per measurement scenario, shared across the gates that need them.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from eprb.estimators import (
    certified_estimate,
    hierarchical_gap,
    saturation_ratio,
    true_errors,
    weighted_norm_sq,
)
from eprb.fe import assemble, build_space
from eprb.fom import solve_fom
from eprb.greedy import FomCache, GreedyConfig, run_weak_greedy
from eprb.optim import (
    CostConfig,
    FomObjective,
    ReducedObjective,
    TrConfig,
    run_fo_reference,
    run_tr_rb,
    synthetic_measurement,
)
from eprb.problem import ProblemDefinition, TimeGrid, constant_signal, named_signal
from eprb.rom import attach_cost_data, lift, solve_rom

TOL = 1e-4
MU_HAT = np.array([3.0, 3.0, 3.0, 3.0])


def _gate(ok: bool, label: str, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}", flush=True)
    assert ok, f"{label}: {detail}"


def production_setting(u, final_time: float, n_cells: int = 200, n_steps: int = 201):
    one = lambda x: np.ones_like(x)
    prob = ProblemDefinition(
        length=1.0,
        final_time=final_time,
        kappa1=one,
        kappa2=one,
        y_init=lambda x: 5.0 * np.ones_like(x),
        u=u,
        mu_low=np.ones(4),
        mu_high=np.full(4, 5.0),
    )
    space = build_space(prob.length, n_cells, 1)
    ops = assemble(prob, space)
    grid = TimeGrid.uniform(final_time, n_steps)
    return prob, space, ops, grid


def lattice(points: int) -> np.ndarray:
    axes = [np.linspace(1.0, 5.0, points)] * 4
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# --- certified reduced models, one per input signal -----------------------

@pytest.fixture(scope="module", params=["u1", "u2", "u3"])
def certification(request):
    name = request.param
    prob, space, ops, grid = production_setting(named_signal(name), 1.0)
    cfg = GreedyConfig(tol=TOL, max_basis=50, training_set=lattice(5))
    res = run_weak_greedy(cfg, prob, space, ops, grid)
    rng = np.random.default_rng(0)
    mus = rng.uniform(prob.mu_low, prob.mu_high, size=(100, 4))
    big_basis = res.enlarged.big()
    n = mus.shape[0]
    err_y, err_q = np.zeros(n), np.zeros(n)
    err_y_big, err_q_big = np.zeros(n), np.zeros(n)
    gap_y, gap_q = np.zeros(n), np.zeros(n)
    for i, mu in enumerate(mus):
        fom = solve_fom(mu, prob, space, ops, grid)
        ts = solve_rom(mu, res.stack.small, grid)
        tb = solve_rom(mu, res.stack.big, grid)
        err_y[i], err_q[i] = true_errors(fom, ts, res.basis, ops, grid)
        err_y_big[i], err_q_big[i] = true_errors(fom, tb, big_basis, ops, grid)
        gap_y[i], gap_q[i] = hierarchical_gap(ts, tb, res.stack, grid)
    return SimpleNamespace(
        name=name,
        res=res,
        mus=mus,
        err_y=err_y,
        err_q=err_q,
        err_y_big=err_y_big,
        err_q_big=err_q_big,
        gap_y=gap_y,
        gap_q=gap_q,
    )


def test_criterion_1_greedy_certification(certification):
    c = certification
    res = c.res
    total = res.basis.l_y + res.basis.l_q
    max_y, max_q = float(c.err_y.max()), float(c.err_q.max())
    ok = (
        res.converged
        and res.e_hat <= TOL
        and max_y <= 1e-4
        and max_q <= 1e-4
        and total <= 16
    )
    _gate(
        ok,
        f"criterion 1 ({c.name})",
        f"e_hat={res.e_hat:.3e} max test errors=({max_y:.3e},{max_q:.3e}) "
        f"l_y+l_q={total} in {len(res.history)} outer iterations",
    )


def test_criterion_2_estimator_sandwich(certification):
    c = certification
    cal = c.res.calibration
    slack = 1e-10
    ok = True
    checked = 0
    eff_lo, eff_hi = np.inf, 0.0
    fields = (
        (cal.sigma_y, cal.eta_bar_y, c.err_y, c.err_y_big, c.gap_y),
        (cal.sigma_q, cal.eta_bar_q, c.err_q, c.err_q_big, c.gap_q),
    )
    for sigma, eta_bar, err, err_big, gap in fields:
        for i in range(err.size):
            # the sandwich is only claimed where the trained saturation
            # property actually holds at the test parameter
            if saturation_ratio(err[i], err_big[i]) > sigma:
                continue
            est = certified_estimate(gap[i], sigma)
            ok &= gap[i] / np.sqrt(1.0 + sigma) - slack <= err[i] <= est + slack
            ok &= est >= err[i] - slack
            ok &= est <= eta_bar * err[i] + slack
            if err[i] > 1e3 * slack:
                eff = est / err[i]
                eff_lo, eff_hi = min(eff_lo, eff), max(eff_hi, eff)
            checked += 1
    ok &= checked > 0
    _gate(
        ok,
        f"criterion 2 ({c.name})",
        f"sandwich and efficiency bounds on {checked}/200 saturated field"
        f" samples, efficiencies in [{eff_lo:.3f},{eff_hi:.3f}]"
        f" vs eta_bar=({cal.eta_bar_y:.3f},{cal.eta_bar_q:.3f})",
    )


# --- recovery scenarios ---------------------------------------------------

@pytest.fixture(scope="module")
def step_setting():
    return production_setting(named_signal("step3"), 2.0)


@pytest.fixture(scope="module")
def step_data(step_setting):
    prob, space, ops, grid = step_setting
    data = synthetic_measurement(
        np.array([2.0, 3.0, 4.0, 5.0]), prob, space, ops, grid, noise_var=1e-3, seed=0
    )
    cost = CostConfig(alpha_j=1e5, lambda_reg=1e-7, mu_ref=MU_HAT)
    return data, cost


@pytest.fixture(scope="module")
def step_model(step_setting, step_data):
    prob, space, ops, grid = step_setting
    data, cost = step_data
    cfg = GreedyConfig(tol=TOL, max_basis=50, training_set=lattice(3))
    res = run_weak_greedy(cfg, prob, space, ops, grid)
    attach_cost_data(res.stack.small, res.basis, ops, data.w)
    robj = ReducedObjective(res.stack, grid, cost, prob.length, res.calibration.sigma_q)
    return res, robj


def test_criterion_3_cost_bound_validity(step_setting, step_data, step_model):
    prob, space, ops, grid = step_setting
    data, cost = step_data
    _, robj = step_model
    fobj = FomObjective(prob, space, ops, grid, data, cost)
    rng = np.random.default_rng(42)
    mus = rng.uniform(1.0, 5.0, size=(20, 4))
    ok = True
    worst = 0.0
    for mu in mus:
        ev = robj.evaluate(mu)
        ok &= ev is not None
        if ev is None:
            continue
        gap_j = abs(fobj.cost(mu) - ev.cost)
        ok &= gap_j <= ev.delta_j
        if ev.delta_j > 0.0:
            worst = max(worst, gap_j / ev.delta_j)
    _gate(
        ok,
        "criterion 3",
        f"|J_full - J_reduced| <= Delta_J on 20 random draws, "
        f"worst bound fill {worst:.2e}",
    )


@pytest.fixture(scope="module")
def recovery_step(step_setting, step_data):
    prob, space, ops, grid = step_setting
    data, cost = step_data
    res_fo = run_fo_reference(prob, space, ops, grid, data, cost, mu_init=MU_HAT, eps_tr=1e-5)
    cache = FomCache(prob, space, ops, grid)
    res_tr = run_tr_rb(
        prob, space, ops, grid, data, cost,
        mu_init=MU_HAT, tr=TrConfig(eps_tr=1e-5, max_outer=30), cache=cache,
    )
    return res_fo, res_tr, cache


def test_criterion_4_parameter_recovery(recovery_step):
    res_fo, res_tr, _ = recovery_step
    ok = (
        res_fo.e_rel <= 0.01
        and res_tr.e_rel <= 0.01
        and res_tr.iterations <= 10
        and res_tr.fom_evaluations <= 12
        and res_tr.fom_evaluations < res_fo.fom_evaluations
    )
    _gate(
        ok,
        "criterion 4 (step)",
        f"e_rel FO={res_fo.e_rel:.4f} TR={res_tr.e_rel:.4f}; TR {res_tr.iterations} "
        f"iterations, {res_tr.fom_evaluations} vs {res_fo.fom_evaluations} full solves",
    )


def test_criterion_4_variant_recovery(step_setting):
    prob, space, ops, grid = step_setting
    data = synthetic_measurement(
        np.array([4.0, 4.0, 2.0, 1.5]), prob, space, ops, grid, noise_var=1e-3, seed=0
    )
    cost = CostConfig(alpha_j=1e5, lambda_reg=1e-7, mu_ref=MU_HAT)
    res_fo = run_fo_reference(prob, space, ops, grid, data, cost, mu_init=MU_HAT, eps_tr=1e-5)
    res_tr = run_tr_rb(
        prob, space, ops, grid, data, cost, mu_init=MU_HAT, tr=TrConfig(eps_tr=1e-5, max_outer=30)
    )
    ok = res_fo.e_rel <= 0.005 and res_tr.e_rel <= 0.005
    _gate(
        ok,
        "criterion 4 (variant)",
        f"e_rel FO={res_fo.e_rel:.4f} TR={res_tr.e_rel:.4f} at the second hidden parameter",
    )


def test_optimizers_agree_and_certify(recovery_step, step_setting, step_data):
    res_fo, res_tr, cache = recovery_step
    prob, space, ops, grid = step_setting
    data, cost = step_data
    dist = float(np.linalg.norm(res_tr.mu_opt - res_fo.mu_opt))
    ok = dist <= 1e-2
    # the accepted iterates were solved for the stationarity check, so the
    # certification audit reuses the cache and costs no extra full solves
    fobj = FomObjective(prob, space, ops, grid, data, cost, cache=cache)
    audited = 0
    for rec in res_tr.history:
        if not rec.accepted:
            continue
        gap_j = abs(fobj.cost(rec.mu) - rec.cost_model)
        ok &= gap_j <= rec.delta_j
        audited += 1
    _gate(
        ok,
        "optimizer agreement",
        f"|mu_TR - mu_FO| = {dist:.2e}, certified at {audited} accepted iterates",
    )


def test_criterion_5_identifiability_negative_control():
    prob, space, ops, grid = production_setting(named_signal("sinusoid"), 2.0)
    data = synthetic_measurement(
        np.array([2.0, 3.0, 4.0, 5.0]), prob, space, ops, grid, noise_var=1e-3, seed=0
    )
    cost = CostConfig(alpha_j=1e5, lambda_reg=1e-7, mu_ref=MU_HAT)
    res_fo = run_fo_reference(prob, space, ops, grid, data, cost, mu_init=MU_HAT, eps_tr=1e-5)
    tr = TrConfig(eps_tr=1e-5, max_outer=30)
    res_tr = run_tr_rb(prob, space, ops, grid, data, cost, mu_init=MU_HAT, tr=tr)
    stopped_fo = res_fo.converged or res_fo.iterations >= 200
    stopped_tr = res_tr.converged or res_tr.iterations >= tr.max_outer
    ok = (
        stopped_fo
        and stopped_tr
        and 0.05 <= res_fo.e_rel <= 0.3
        and 0.05 <= res_tr.e_rel <= 0.3
    )
    _gate(
        ok,
        "criterion 5",
        f"oscillating input stalls both: e_rel FO={res_fo.e_rel:.3f} "
        f"TR={res_tr.e_rel:.3f}, stationarity ({res_fo.stationarity:.1e},"
        f"{res_tr.stationarity:.1e})",
    )


# --- small-instance oracles ----------------------------------------------

def test_criterion_6_small_instance_oracles():
    import warnings

    from eprb.deim import build_deim
    from eprb.fom import coupling_snapshots
    from eprb.pod import PodRule, pod
    from eprb.rom import ReducedBasis, build_hierarchical

    prob, space, ops, grid = production_setting(
        named_signal("u2"), 1.0, n_cells=20, n_steps=25
    )
    mu = np.array([1.8, 2.6, 3.4, 2.1])
    traj = solve_fom(mu, prob, space, ops, grid)
    # request every mode up to numerical rank; the truncation warning for
    # asking beyond it is expected here
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        full_rank = PodRule(rank=grid.n_steps)
        full_y = pod(traj.y.T, ops.S_y, full_rank, weights=grid.weights)[0]
        full_q = pod(traj.q.T, ops.S_q, full_rank, weights=grid.weights)[0]
        deim = build_deim(coupling_snapshots(traj), full_rank)
    small = ReducedBasis(space, full_y[:, :4], full_q[:, :3])
    big = ReducedBasis(space, full_y, full_q)
    stack = build_hierarchical(prob, space, ops, grid, small, big, deim)

    # full-rank reduced solve reproduces the full-order trajectory
    tb = solve_rom(mu, stack.big, grid)
    y_l, q_l = lift(big, tb)
    ok_rom = bool(np.abs(y_l - traj.y).max() <= 1e-8 and np.abs(q_l - traj.q).max() <= 1e-8)

    # online gap equals the lifted-difference norm computed full order
    ts = solve_rom(mu, stack.small, grid)
    gy, gq = hierarchical_gap(ts, tb, stack, grid)
    ys, qs = lift(small, ts)
    gy_ref = np.sqrt(weighted_norm_sq(y_l - ys, ops.S_y, grid.weights))
    gq_ref = np.sqrt(weighted_norm_sq(q_l - qs, ops.S_q, grid.weights))
    ok_gap = bool(abs(gy - gy_ref) <= 1e-10 and abs(gq - gq_ref) <= 1e-10)

    # online reduced cost equals the cost of the lifted trajectory
    data = synthetic_measurement(np.array([2.0, 3.0, 4.0, 4.5]), prob, space, ops, grid)
    cost = CostConfig(alpha_j=1e5, lambda_reg=1e-8, mu_ref=MU_HAT)
    attach_cost_data(stack.small, small, ops, data.w)
    robj = ReducedObjective(stack, grid, cost, prob.length, 0.25)
    misfit = weighted_norm_sq(qs - data.w, ops.M_q, grid.weights)
    lifted_cost = 0.5 * cost.alpha_j * misfit + 0.5 * cost.lambda_reg * float(
        np.sum((mu - MU_HAT) ** 2)
    )
    ok_cost = bool(abs(robj.cost(mu) - lifted_cost) <= 1e-10 * max(1.0, abs(lifted_cost)))

    # adjoint-free sensitivity gradient against central differences
    fobj = FomObjective(prob, space, ops, grid, data, cost)
    g = fobj.gradient(mu)
    h = 1e-6
    g_fd = np.empty(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        g_fd[i] = (fobj.cost(mu + e) - fobj.cost(mu - e)) / (2.0 * h)
    ok_grad = bool(np.allclose(g, g_fd, rtol=1e-5, atol=1e-8 * np.linalg.norm(g)))

    ok = ok_rom and ok_gap and ok_cost and ok_grad
    _gate(
        ok,
        "criterion 6",
        f"oracles rom={ok_rom} gap={ok_gap} cost={ok_cost} gradient={ok_grad}",
    )


def test_criterion_7_zero_input_conservation():
    prob, space, ops, grid = production_setting(constant_signal(0.0), 1.0)
    traj = solve_fom(np.array([1.7, 4.2, 2.9, 3.6]), prob, space, ops, grid)
    dev_y = float(np.abs(traj.y - 5.0).max())
    dev_q = float(np.abs(traj.q).max())
    ok = dev_y <= 1e-10 and dev_q <= 1e-10
    _gate(
        ok,
        "criterion 7",
        f"zero input keeps y at its initial value (dev {dev_y:.1e}) and q at rest "
        f"(max {dev_q:.1e})",
    )
