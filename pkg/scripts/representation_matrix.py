#!/usr/bin/env python3
"""Output- and input-representation matrices on the synthetic panels.

    python3 scripts/representation_matrix.py [--out results] [--seeds 0,1,2] [--jobs 4]

Reruns resume: seeds with stored metrics are not retrained.
"""
import argparse
import sys
from pathlib import Path

from tsbin.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", default=None)
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()
    codes = []
    for name in ("output_matrix", "input_matrix"):
        argv = ["run", "--config", str(CONFIGS / f"{name}.json"), "--out", f"{args.out}/{name}",
                "--jobs", args.jobs]
        if args.seeds:
            argv += ["--seeds", args.seeds]
        codes.append(main(argv))
    sys.exit(max(codes))
