"""Train the closed-loop configuration and run the simulated episodes.

    python scripts/run_closed_loop.py --out runs/closed_loop [--seed 0] [--set KEY=VALUE ...]

The defaults below are the settings used by the closed-loop acceptance check;
``--seed 1`` gives the validation episodes they were chosen on.
"""

import argparse
import json
import sys
from pathlib import Path

from factorplan.cli import main

CLOSED_LOOP = {
    "count": 480,
    "N_p": 256,
    "N_v": 128,
    "stages": [[64, 64], [16, 16]],
    "steps": 4000,
    "beta": 4.0,
}


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/closed_loop")
    ap.add_argument("--seed", type=int, default=0, help="episode seed; training data always uses seed 0")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = ap.parse_args(argv)
    sets = [f"{k}={json.dumps(v)}" for k, v in CLOSED_LOOP.items()] + args.set
    common = ["--out", args.out]
    for kv in sets:
        common += ["--set", kv]
    for stage in ("gen-scenarios", "build-vocab", "teach-cache", "train"):
        code = main([stage, *common, "--seed", "0"])
        if code:
            return code
    code = main(["simulate", *common, "--seed", str(args.seed)])
    if code:
        return code
    doc = json.loads((Path(args.out) / "simulate.json").read_text())
    for kind, row in doc["by_kind"].items():
        print(f"{kind:20s} collisions {row['collisions']:2d}/{row['episodes']}  "
              f"completion>=0.8 {row['completion_ge_0.8']:2d}  completion>=0.9 {row['completion_ge_0.9']:2d}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
