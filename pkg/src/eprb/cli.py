"""Command line experiment driver.

Three subcommands cover the workflow: ``greedy`` certifies a reduced
model over the training box and measures it on a random test set,
``optimize`` recovers parameters from noisy measurements with both the
full-order reference and the trust-region loop, ``solve`` dumps a single
trajectory.  Every run writes CSV tables, an artifact container, and
(optionally) SVG figures into the output directory; all quantities are
reproducible from the config file and the seed.  Wall-clock timings go
to separate files since they are machine-dependent.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, build_setting, config_hash, load_config, training_lattice
from .container import ArtifactContainer, load_container, save_container
from .estimators import true_errors
from .fom import solve_fom
from .greedy import FomCache, GreedyConfig, error_indicator, run_weak_greedy
from .optim import CostConfig, FomObjective, TrConfig, run_fo_reference, run_tr_rb, synthetic_measurement
from .rom import ReducedBasis, RomTrajectory, solve_rom, solve_rom_batch

__all__ = ["main", "cmd_greedy", "cmd_optimize", "cmd_solve"]


# --- shared I/O helpers ---------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _out_dir(cfg: ExperimentConfig, override) -> Path:
    out = Path(override) if override is not None else Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# --- greedy certification -------------------------------------------------

def cmd_greedy(cfg: ExperimentConfig, out_dir=None, seed: int | None = None) -> Path:
    out = _out_dir(cfg, out_dir)
    seed = 0 if seed is None else seed
    chash = config_hash(cfg)
    problem, space, ops, grid = build_setting(cfg)
    gcfg = GreedyConfig(tol=cfg.greedy.tol, max_basis=cfg.greedy.max_basis, training_set=training_lattice(cfg))
    cache = FomCache(problem, space, ops, grid)

    t0 = time.perf_counter()
    res = run_weak_greedy(gcfg, problem, space, ops, grid, cache)
    build_time = time.perf_counter() - t0

    _write_csv(
        out / "greedy_history.csv",
        ["iteration", "mu1", "mu2", "mu3", "mu4", "e_hat", "l_y", "l_q", "m_y", "m_q", "sigma_y", "sigma_q"],
        [
            [r.iteration, *r.mu_hat, r.e_hat, r.l_y, r.l_q, r.m_y, r.m_q, r.sigma_y, r.sigma_q]
            for r in res.history
        ],
    )

    rng = np.random.default_rng(seed)
    n_test = cfg.greedy.test_count
    mus = rng.uniform(problem.mu_low, problem.mu_high, size=(n_test, 4))
    err_y = np.zeros(n_test)
    err_q = np.zeros(n_test)
    est_y = np.full(n_test, np.nan)
    est_q = np.full(n_test, np.nan)
    fe_time = rb_time = 0.0
    if n_test:
        t0 = time.perf_counter()
        batch = solve_rom_batch(mus, res.stack.small, grid)
        rb_time = (time.perf_counter() - t0) / n_test
        no_iters = np.zeros(grid.n_steps, dtype=int)
        t0 = time.perf_counter()
        for i, mu in enumerate(mus):
            fom = solve_fom(mu, problem, space, ops, grid)
            if batch.failed[i]:
                traj = solve_rom(mu, res.stack.small, grid)
            else:
                traj = RomTrajectory(mu=mu, y=batch.y[i], q=batch.q[i], newton_iters=no_iters)
            err_y[i], err_q[i] = true_errors(fom, traj, res.basis, ops, grid)
            ind = error_indicator(mu, res.stack, res.calibration, grid)
            if ind is not None:
                est_y[i], est_q[i] = ind[1], ind[2]
        fe_time = (time.perf_counter() - t0) / n_test - rb_time

    def _max_eff(est, err):
        ok = np.isfinite(est) & (err > 0.0)
        return float(np.max(est[ok] / err[ok])) if ok.any() else float("nan")

    cal = res.calibration
    table = [
        ("converged", int(res.converged)),
        ("e_hat", res.e_hat),
        ("l_y", res.basis.l_y),
        ("l_q", res.basis.l_q),
        ("m_y", res.enlarged.m_y),
        ("m_q", res.enlarged.m_q),
        ("deim_modes", res.deim.n_modes),
        ("fom_solves", res.fom_solves),
        ("sigma_y", cal.sigma_y),
        ("sigma_q", cal.sigma_q),
        ("eta_bar_y", cal.eta_bar_y),
        ("eta_bar_q", cal.eta_bar_q),
        ("test_count", n_test),
        ("max_test_error_y", float(err_y.max()) if n_test else float("nan")),
        ("max_test_error_q", float(err_q.max()) if n_test else float("nan")),
        ("max_test_efficiency_y", _max_eff(est_y, err_y)),
        ("max_test_efficiency_q", _max_eff(est_q, err_q)),
    ]
    _write_csv(out / "greedy_table.csv", ["quantity", "value"], table)
    _write_csv(
        out / "greedy_timings.csv",
        ["quantity", "seconds"],
        [("build_time", build_time), ("avg_fe_solve", fe_time), ("avg_rb_solve", rb_time)],
    )

    container = ArtifactContainer(
        meta={"kind": "greedy", "config_hash": chash, "dim_V": space.dim_V, "dim_V0": space.dim_V0},
        arrays={
            "y_modes": res.basis.y_modes,
            "q_modes": res.basis.q_modes,
            "y_extra": res.enlarged.y_extra,
            "q_extra": res.enlarged.q_extra,
            "deim_basis": res.deim.basis,
            "deim_indices": res.deim.indices,
            "saturation": np.array([cal.sigma_y, cal.sigma_q]),
            "enrichment_mus": np.array(res.enrichment_mus),
            "test_mus": mus,
            "test_errors": np.stack([err_y, err_q], axis=1) if n_test else np.zeros((0, 2)),
        },
    )
    save_container(container, out / "greedy_model.eprb")

    if cfg.output.plots:
        plt = _pyplot()
        fig, ax = plt.subplots(figsize=(5, 3.5))
        its = [r.iteration for r in res.history]
        ax.semilogy(its, [r.e_hat for r in res.history], "o-", label="indicator")
        ax.axhline(cfg.greedy.tol, color="k", ls="--", lw=0.8, label="tolerance")
        ax.set_xlabel("outer iteration")
        ax.set_ylabel("max indicator")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "greedy_convergence.svg")
        plt.close(fig)
    return out


# --- parameter recovery ---------------------------------------------------

def _load_warm_basis(path, space) -> ReducedBasis:
    art = load_container(path)
    if art.meta.get("kind") != "greedy":
        raise ValueError(f"{path}: not a greedy artifact (kind={art.meta.get('kind')!r})")
    basis = ReducedBasis(space, art.arrays["y_modes"], art.arrays["q_modes"])
    if basis.y_modes.shape[0] != space.dim_V or basis.q_modes.shape[0] != space.dim_V0:
        raise ValueError(f"{path}: basis does not match the configured discretization")
    return basis


def cmd_optimize(cfg: ExperimentConfig, out_dir=None, seed: int | None = None) -> Path:
    out = _out_dir(cfg, out_dir)
    o = cfg.optim
    seed = o.seed if seed is None else seed
    chash = config_hash(cfg)
    problem, space, ops, grid = build_setting(cfg)
    mu_star = np.asarray(o.mu_star, dtype=float)
    data = synthetic_measurement(mu_star, problem, space, ops, grid, noise_var=o.noise_var, seed=seed)
    cost = CostConfig(alpha_j=o.alpha_j, lambda_reg=o.lambda_reg, mu_ref=np.asarray(o.mu_ref, dtype=float))
    warm = _load_warm_basis(o.warm_start, space) if o.warm_start else None

    res_fo = run_fo_reference(problem, space, ops, grid, data, cost, mu_init=o.mu_init, eps_tr=o.eps_tr)
    cache_tr = FomCache(problem, space, ops, grid)
    res_tr = run_tr_rb(
        problem,
        space,
        ops,
        grid,
        data,
        cost,
        mu_init=o.mu_init,
        tr=TrConfig(eps_tr=o.eps_tr, max_outer=o.max_outer),
        cache=cache_tr,
        warm_basis=warm,
    )

    _write_csv(
        out / "optimize_summary.csv",
        ["optimizer", "iterations", "fom_evaluations", "converged", "stationarity", "cost", "e_abs", "e_rel"],
        [
            ["full_order", res_fo.iterations, res_fo.fom_evaluations, int(res_fo.converged), res_fo.stationarity, res_fo.cost, res_fo.e_abs, res_fo.e_rel],
            ["trust_region", res_tr.iterations, res_tr.fom_evaluations, int(res_tr.converged), res_tr.stationarity, res_tr.cost, res_tr.e_abs, res_tr.e_rel],
        ],
    )
    _write_csv(
        out / "optimize_timings.csv",
        ["optimizer", "seconds"],
        [("full_order", res_fo.wall_time), ("trust_region", res_tr.wall_time)],
    )

    # post-hoc certification at accepted iterates: the full cost is free
    # there because the stationarity check already solved the FOM
    post = FomObjective(problem, space, ops, grid, data, cost, cache=cache_tr)
    rows = []
    for rec in res_tr.history:
        cost_full = cert_gap = cert_ok = ""
        if rec.accepted:
            cost_full = post.cost(rec.mu)
            cert_gap = abs(cost_full - rec.cost_model)
            cert_ok = int(cert_gap <= rec.delta_j)
        rows.append(
            [rec.iteration, *rec.mu, rec.cost_model, rec.delta_j, rec.radius, rec.sigma_q,
             int(rec.accepted), int(rec.enriched), rec.fom_solves, rec.l_y, rec.l_q,
             cost_full, cert_gap, cert_ok]
        )
    _write_csv(
        out / "optimize_trace.csv",
        ["iteration", "mu1", "mu2", "mu3", "mu4", "cost_model", "delta_j", "radius", "sigma_q",
         "accepted", "enriched", "fom_solves", "l_y", "l_q", "cost_full", "cert_gap", "cert_ok"],
        rows,
    )

    container = ArtifactContainer(
        meta={"kind": "optimize", "config_hash": chash, "seed": int(seed)},
        arrays={
            "mu_star": mu_star,
            "mu_opt_full_order": res_fo.mu_opt,
            "mu_opt_trust_region": res_tr.mu_opt,
            "measurements": data.w,
            "errors": np.array(
                [[res_fo.e_abs, res_fo.e_rel], [res_tr.e_abs, res_tr.e_rel]]
            ),
        },
    )
    save_container(container, out / "optimize_result.eprb")

    if cfg.output.plots:
        plt = _pyplot()
        x = space.nodes[1:]
        traj_star = solve_fom(mu_star, problem, space, ops, grid)
        traj_opt = solve_fom(problem.clip_mu(res_tr.mu_opt), problem, space, ops, grid)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(x, data.w[-1], ".", ms=3, alpha=0.5, label="data (final time)")
        ax.plot(x, traj_star.q[-1], "-", label="truth")
        ax.plot(x, traj_opt.q[-1], "--", label="recovered")
        ax.set_xlabel("x")
        ax.set_ylabel("q")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "optimize_recovery.svg")
        plt.close(fig)
    return out


# --- single solve ---------------------------------------------------------

def cmd_solve(cfg: ExperimentConfig, mu, out_dir=None) -> Path:
    out = _out_dir(cfg, out_dir)
    problem, space, ops, grid = build_setting(cfg)
    mu = problem.check_mu(np.asarray(mu, dtype=float))
    traj = solve_fom(mu, problem, space, ops, grid)
    norms_y = np.sqrt(np.einsum("ki,ki->k", traj.y, (ops.S_y @ traj.y.T).T))
    norms_q = np.sqrt(np.einsum("ki,ki->k", traj.q, (ops.S_q @ traj.q.T).T))
    _write_csv(
        out / "solve_trace.csv",
        ["step", "time", "input", "norm_y", "norm_q", "newton_iters"],
        [
            [k, grid.nodes[k], problem.u(grid.nodes[k]), norms_y[k], norms_q[k], traj.newton_iters[k]]
            for k in range(grid.nodes.size)
        ],
    )
    container = ArtifactContainer(
        meta={"kind": "solve", "config_hash": config_hash(cfg), "mu": [float(v) for v in mu]},
        arrays={"y": traj.y, "q": traj.q, "times": grid.nodes},
    )
    save_container(container, out / "solve_result.eprb")
    if cfg.output.plots:
        plt = _pyplot()
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for k in (0, grid.nodes.size // 2, grid.nodes.size - 1):
            axes[0].plot(space.nodes, traj.y[k], label=f"t={grid.nodes[k]:.2f}")
            axes[1].plot(space.nodes[1:], traj.q[k], label=f"t={grid.nodes[k]:.2f}")
        axes[0].set_xlabel("x")
        axes[0].set_ylabel("y")
        axes[1].set_xlabel("x")
        axes[1].set_ylabel("q")
        axes[1].legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "solve_profiles.svg")
        plt.close(fig)
    return out


# --- argument parsing -----------------------------------------------------

def _parse_mu(text: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected four parameters, got {text!r}")
    return np.array([float(p) for p in parts])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eprb", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("greedy", help="build and certify a reduced model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None, help="test-set seed (default 0)")

    p = sub.add_parser("optimize", help="recover parameters from noisy measurements")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=None, help="overrides optim.seed")

    p = sub.add_parser("solve", help="single full-order solve at one parameter")
    p.add_argument("--config", required=True)
    p.add_argument("--mu", required=True, type=_parse_mu, help="four comma-separated values")
    p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.command == "greedy":
            out = cmd_greedy(cfg, out_dir=args.out, seed=args.seed)
        elif args.command == "optimize":
            out = cmd_optimize(cfg, out_dir=args.out, seed=args.seed)
        else:
            out = cmd_solve(cfg, args.mu, out_dir=args.out)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"results written to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
