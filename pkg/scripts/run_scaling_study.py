"""Vocabulary-density ladder: coverage and open-loop PDMS per (N_p, N_v).

Writes ``scaling.csv`` under --out and prints a small table.

    python scripts/run_scaling_study.py --out runs/scaling --seeds 0 1 2
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from factorplan.cli import main


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/scaling")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="training seeds per ladder point")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    overrides = [f"scaling_seeds={json.dumps(args.seeds)}", f"steps={args.steps}", *args.set]
    argv = ["scaling-study", "--out", args.out, "--seed", str(args.seed)]
    for kv in overrides:
        argv += ["--set", kv]
    code = main(["gen-scenarios", *argv[1:]]) or main(argv)
    if code:
        return code
    lines = (Path(args.out) / "scaling.csv").read_text().splitlines()[1:]
    print(f"{'N_p':>5} {'N_v':>4} {'coverage':>9} {'PDMS':>7}")
    for r in csv.DictReader(lines):
        print(f"{r['N_p']:>5} {r['N_v']:>4} {float(r['coverage_min_ade']):9.3f} {float(r['mean_pdms']):7.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
