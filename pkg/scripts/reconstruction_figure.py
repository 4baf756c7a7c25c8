#!/usr/bin/env python3
"""Reconstruction error vs bin count (quantile and linear, L2 and L1) plus the CDF stages.

    python3 scripts/reconstruction_figure.py [--out results/analysis]
"""
import argparse
import sys
from pathlib import Path

from tsbin.cli import main

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "heavy_panel.json"

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/analysis")
    args = ap.parse_args()
    codes = [main(["analyze-reconstruction", "--config", str(CONFIG), "--out", args.out, "--norm", n])
             for n in ("l2", "l1")]
    codes.append(main(["analyze-cdf", "--config", str(CONFIG), "--out", args.out]))
    sys.exit(max(codes))
