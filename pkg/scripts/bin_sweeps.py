#!/usr/bin/env python3
"""Output-bin, input-bin and embedding-size sweeps; each writes a sweep-<param>.csv curve.

    python3 scripts/bin_sweeps.py [--out results] [--seeds 0,1,2] [--jobs 4]
"""
import argparse
import sys
from pathlib import Path

from tsbin.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SWEEPS = ("sweep_output_bins", "sweep_input_bins", "sweep_embedding_dim")

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results")
    ap.add_argument("--seeds", default=None)
    ap.add_argument("--jobs", default="1")
    args = ap.parse_args()
    codes = []
    for name in SWEEPS:
        argv = ["sweep", "--config", str(CONFIGS / f"{name}.json"), "--out", f"{args.out}/{name}",
                "--jobs", args.jobs]
        if args.seeds:
            argv += ["--seeds", args.seeds]
        codes.append(main(argv))
    sys.exit(max(codes))
