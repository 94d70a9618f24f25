#!/usr/bin/env python3
"""Run the ablation grid on one synthetic task and emit the subset table.

Every variant trains under the same seed and the same train/test split
(verified by the shared split hash in the emitted table). Reports land
under --out: reports/ablation_table.csv has one row per variant with
single-label / multi-label / all-subset macro AUC, and the full
variant's per-class AUCs are written alongside as CSV and PNG.

Examples:
    python scripts/run_ablation_grid.py
    python scripts/run_ablation_grid.py --variants full,no_mbo,no_ce --epochs 60
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from branchvit import cli  # noqa: E402
from run_synth_experiment import build_overrides  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="runs/ablation_grid")
    parser.add_argument("--variants", default="full,no_mbo,no_ce,no_aggregate,no_init")
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--n-train", type=int, default=2000)
    parser.add_argument("--n-test", type=int, default=500)
    parser.add_argument("--epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=50)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--boost", type=float, default=2.0)
    parser.add_argument("--boost-pair", type=int, nargs=2, default=(1, 2), metavar=("I", "J"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = parser.parse_args()

    argv = ["ablate", "--out", args.out, "--variants", args.variants]
    for item in build_overrides(args):
        argv += ["--set", item]
    return cli.main(argv)


if __name__ == "__main__":
    raise SystemExit(main())
