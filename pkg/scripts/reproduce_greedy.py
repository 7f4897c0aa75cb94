#!/usr/bin/env python3
"""Build and certify the reduced models for all three input signals.

Runs the greedy driver on the shipped configs and prints the headline
numbers per input: convergence, basis sizes, saturation constants, and
the worst errors over the random test set.  Full tables, the model
container, and the convergence plot land in the per-config output
directories (results/greedy_* by default).
"""

import argparse
import csv
from pathlib import Path

from eprb.cli import cmd_greedy
from eprb.config import load_config

CONFIGS = ["greedy_u1.yaml", "greedy_u2.yaml", "greedy_u3.yaml"]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--configs", default=None, help="directory with the greedy configs")
    parser.add_argument("--out", default=None, help="base output directory override")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cfg_dir = Path(args.configs) if args.configs else Path(__file__).resolve().parents[1] / "configs"
    for name in CONFIGS:
        cfg = load_config(cfg_dir / name)
        out_dir = Path(args.out) / Path(cfg.output.directory).name if args.out else None
        out = cmd_greedy(cfg, out_dir=out_dir, seed=args.seed)
        with open(out / "greedy_table.csv") as fh:
            table = {row[0]: row[1] for row in csv.reader(fh)}
        print(
            f"{name}: converged={table['converged']} e_hat={float(table['e_hat']):.3e} "
            f"l=({table['l_y']},{table['l_q']}) sigma=({float(table['sigma_y']):.3f},"
            f"{float(table['sigma_q']):.3f}) max_test=("
            f"{float(table['max_test_error_y']):.3e},{float(table['max_test_error_q']):.3e})"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
