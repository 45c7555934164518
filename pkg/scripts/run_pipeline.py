"""Run every CLI stage in order into one output directory.

    python scripts/run_pipeline.py --out runs/full --seed 0 [--set KEY=VALUE ...]
"""

import argparse
import sys

from factorplan.cli import main

STAGES = ("gen-scenarios", "build-vocab", "teach-cache", "train", "eval", "simulate")


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/pipeline")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--with-untrained", action="store_true", help="also evaluate the untrained scorer")
    args = ap.parse_args(argv)
    common = ["--out", args.out, "--seed", str(args.seed)]
    if args.config:
        common += ["--config", args.config]
    for kv in args.set:
        common += ["--set", kv]
    for stage in STAGES:
        print(f"== {stage}", file=sys.stderr, flush=True)
        code = main([stage, *common])
        if code:
            return code
    if args.with_untrained:
        return main(["eval", *common, "--set", "untrained=true"])
    return 0


if __name__ == "__main__":
    sys.exit(run())
