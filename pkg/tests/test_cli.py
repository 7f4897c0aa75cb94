"""Artifact container, config schema, and the command line driver."""

import numpy as np
import numpy.testing as npt
import pytest
import yaml

from eprb.cli import cmd_greedy, cmd_optimize, cmd_solve, main
from eprb.config import (
    ExperimentConfig,
    config_hash,
    load_config,
    make_signal,
    training_lattice,
)
from eprb.container import ArtifactContainer, ContainerError, load_container, save_container

SMOKE = {
    "problem": {"final_time": 0.5, "input": "u2"},
    "discretization": {"n_cells": 20, "n_steps": 25},
    "greedy": {"tol": 1.0e-3, "max_basis": 20, "training_points": 2, "test_count": 3},
    "optim": {
        "mu_star": [2.0, 3.0, 4.0, 4.5],
        "noise_var": 1.0e-4,
        "seed": 7,
        "eps_tr": 1.0e-3,
        "max_outer": 20,
    },
    "output": {"plots": False},
}


def write_smoke(tmp_path, **overrides):
    raw = {k: dict(v) for k, v in SMOKE.items()}
    for block, vals in overrides.items():
        raw.setdefault(block, {}).update(vals)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


class TestContainer:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        art = ArtifactContainer(
            meta={"kind": "test", "config_hash": "abc"},
            arrays={
                "a": rng.normal(size=(3, 4)),
                "b": np.arange(5),
                "flags": np.array([True, False]),
            },
        )
        path = tmp_path / "art.eprb"
        save_container(art, path)
        back = load_container(path)
        assert back.meta == art.meta
        npt.assert_array_equal(back.arrays["a"], art.arrays["a"])
        npt.assert_array_equal(back.arrays["b"], art.arrays["b"])
        # booleans ride along as integers
        npt.assert_array_equal(back.arrays["flags"], np.array([1, 0]))

    def test_save_is_reproducible(self, tmp_path):
        art = ArtifactContainer(meta={"k": 1}, arrays={"x": np.linspace(0, 1, 7)})
        save_container(art, tmp_path / "one.eprb")
        save_container(art, tmp_path / "two.eprb")
        assert (tmp_path / "one.eprb").read_bytes() == (tmp_path / "two.eprb").read_bytes()

    def test_hash_check(self, tmp_path):
        art = ArtifactContainer(meta={"config_hash": "right"}, arrays={"x": np.ones(2)})
        path = tmp_path / "art.eprb"
        save_container(art, path)
        load_container(path, config_hash="right")
        with pytest.raises(ContainerError):
            load_container(path, config_hash="wrong")

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "art.eprb"
        save_container(ArtifactContainer(meta={}, arrays={"x": np.ones(2)}), path)
        blob = bytearray(path.read_bytes())
        blob[0] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError):
            load_container(path)

    def test_rejects_truncation_and_padding(self, tmp_path):
        path = tmp_path / "art.eprb"
        save_container(ArtifactContainer(meta={}, arrays={"x": np.ones(4)}), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(ContainerError):
            load_container(path)
        path.write_bytes(blob + b"\x00")
        with pytest.raises(ContainerError):
            load_container(path)

    def test_rejects_object_arrays(self):
        with pytest.raises(ContainerError):
            ArtifactContainer(meta={}, arrays={"x": np.array(["a", "b"])})


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        path = tmp_path / "empty.yaml"
        path.write_text("{}\n")
        cfg = load_config(path)
        assert cfg == ExperimentConfig()

    def test_loads_and_hashes(self, tmp_path):
        cfg = load_config(write_smoke(tmp_path))
        assert cfg.discretization.n_cells == 20
        assert cfg.optim.mu_star == (2.0, 3.0, 4.0, 4.5)
        h1 = config_hash(cfg)
        assert h1 == config_hash(load_config(write_smoke(tmp_path)))
        other = load_config(write_smoke(tmp_path, optim={"seed": 8}))
        assert h1 != config_hash(other)

    def test_coerces_unsigned_exponents(self, tmp_path):
        # YAML 1.1 reads 1.0e5 as a string; the schema must not care
        path = tmp_path / "config.yaml"
        path.write_text("optim:\n  alpha_j: 1.0e5\n  lambda_reg: 1.0e-7\n")
        cfg = load_config(path)
        assert cfg.optim.alpha_j == 1.0e5

    def test_rejects_unknown_keys(self, tmp_path):
        with pytest.raises(ValueError, match="unknown"):
            load_config(write_smoke(tmp_path, greedy={"tolerance": 1e-3}))
        path = tmp_path / "bad.yaml"
        path.write_text("nonsense: {}\n")
        with pytest.raises(ValueError, match="unknown"):
            load_config(path)

    def test_rejects_out_of_box_targets(self, tmp_path):
        with pytest.raises(ValueError, match="outside"):
            load_config(write_smoke(tmp_path, optim={"mu_star": [0.5, 3.0, 4.0, 4.5]}))

    def test_rejects_bad_signal(self, tmp_path):
        with pytest.raises(ValueError):
            load_config(write_smoke(tmp_path, problem={"input": "u99"}))

    def test_parameterized_signal(self):
        u = make_signal({"name": "step", "switch": 0.5, "before": -2.0, "after": 2.0})
        assert u(0.25) == -2.0 and u(0.75) == 2.0
        assert make_signal("u1")(0.3) == 1.0

    def test_training_lattice_shape(self, tmp_path):
        cfg = load_config(write_smoke(tmp_path))
        lat = training_lattice(cfg)
        assert lat.shape == (2 ** 4, 4)
        assert lat.min() == 1.0 and lat.max() == 5.0


@pytest.fixture(scope="module")
def smoke_cfg(tmp_path_factory):
    return load_config(write_smoke(tmp_path_factory.mktemp("cfg")))


class TestCommands:
    def test_greedy_outputs(self, smoke_cfg, tmp_path):
        out = cmd_greedy(smoke_cfg, out_dir=tmp_path / "g", seed=0)
        table = dict(
            line.split(",") for line in (out / "greedy_table.csv").read_text().splitlines()[1:]
        )
        assert table["converged"] == "1"
        assert float(table["e_hat"]) <= smoke_cfg.greedy.tol
        assert float(table["max_test_error_y"]) < 1e-3
        history = (out / "greedy_history.csv").read_text().splitlines()
        assert history[0].startswith("iteration,mu1")
        assert len(history) >= 2
        art = load_container(out / "greedy_model.eprb", config_hash=config_hash(smoke_cfg))
        assert art.meta["kind"] == "greedy"
        assert art.arrays["y_modes"].shape[0] == 21

    def test_greedy_deterministic(self, smoke_cfg, tmp_path):
        a = cmd_greedy(smoke_cfg, out_dir=tmp_path / "a", seed=0)
        b = cmd_greedy(smoke_cfg, out_dir=tmp_path / "b", seed=0)
        for name in ("greedy_table.csv", "greedy_history.csv", "greedy_model.eprb"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_optimize_outputs(self, smoke_cfg, tmp_path):
        out = cmd_optimize(smoke_cfg, out_dir=tmp_path / "o")
        rows = (out / "optimize_summary.csv").read_text().splitlines()
        head = rows[0].split(",")
        fo = dict(zip(head, rows[1].split(",")))
        tr = dict(zip(head, rows[2].split(",")))
        assert fo["optimizer"] == "full_order" and tr["optimizer"] == "trust_region"
        assert int(tr["fom_evaluations"]) < int(fo["fom_evaluations"])
        trace = (out / "optimize_trace.csv").read_text().splitlines()
        cols = trace[0].split(",")
        for need in ("cost_full", "cert_gap", "cert_ok"):
            assert need in cols
        # accepted rows must certify: the model cost sits inside the bound
        for line in trace[1:]:
            rec = dict(zip(cols, line.split(",")))
            if rec["accepted"] == "1":
                assert rec["cert_ok"] == "1"

    def test_optimize_warm_start_matches_cold(self, smoke_cfg, tmp_path):
        greedy_out = cmd_greedy(smoke_cfg, out_dir=tmp_path / "g", seed=0)
        raw = {k: dict(v) for k, v in SMOKE.items()}
        raw["optim"]["warm_start"] = str(greedy_out / "greedy_model.eprb")
        path = tmp_path / "warm.yaml"
        path.write_text(yaml.safe_dump(raw))
        warm = cmd_optimize(load_config(path), out_dir=tmp_path / "w")
        rows = (warm / "optimize_summary.csv").read_text().splitlines()
        tr = dict(zip(rows[0].split(","), rows[2].split(",")))
        assert tr["converged"] == "1"
        # warm and cold start agree on the reached cost
        cold = cmd_optimize(smoke_cfg, out_dir=tmp_path / "c")
        cold_rows = (cold / "optimize_summary.csv").read_text().splitlines()
        tr_cold = dict(zip(cold_rows[0].split(","), cold_rows[2].split(",")))
        assert abs(float(tr["cost"]) - float(tr_cold["cost"])) <= 1e-6 * (
            1.0 + abs(float(tr_cold["cost"]))
        )

    def test_solve_outputs(self, smoke_cfg, tmp_path):
        out = cmd_solve(smoke_cfg, (2.0, 3.0, 4.0, 4.5), out_dir=tmp_path / "s")
        lines = (out / "solve_trace.csv").read_text().splitlines()
        assert lines[0] == "step,time,input,norm_y,norm_q,newton_iters"
        assert len(lines) == 1 + smoke_cfg.discretization.n_steps
        art = load_container(out / "solve_result.eprb")
        assert art.arrays["y"].shape == (25, 21)
        assert art.arrays["q"].shape == (25, 20)


class TestMain:
    def test_solve_entry_point(self, tmp_path):
        cfg_path = write_smoke(tmp_path)
        code = main(
            ["solve", "--config", str(cfg_path), "--mu", "2,3,4,4.5", "--out", str(tmp_path / "out")]
        )
        assert code == 0
        assert (tmp_path / "out" / "solve_trace.csv").exists()

    def test_bad_config_fails_cleanly(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("problem:\n  input: u99\n")
        code = main(["solve", "--config", str(path), "--mu", "2,3,4,4.5"])
        assert code == 1
        assert "error:" in capsys.readouterr().err

    def test_bad_mu_rejected(self):
        with pytest.raises(SystemExit):
            main(["solve", "--config", "x.yaml", "--mu", "1,2,3"])
