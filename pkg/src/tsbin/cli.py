"""Command line entry point: ``tsbin {run,report,sweep,analyze-reconstruction,analyze-cdf}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .core import PanelError
from .eval import RECONSTRUCTION_BINS, MetricError, cdf_stage_analysis, reconstruction_curve, write_rows
from .experiment import (
    ConfigError,
    emit_report,
    emit_sweep,
    load_config,
    load_dataset,
    load_records,
    parse_config,
    run_matrix,
    sweep_cells,
)
from .transform import PipelineError

EXIT_OK, EXIT_INCOMPLETE, EXIT_USAGE = 0, 1, 2


def _seeds(text: str) -> list:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return seeds


def _ints(text: str) -> list:
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _read(path) -> dict:
    doc = load_config(path)
    base = Path(path).resolve().parent
    # dataset paths are relative to the config file
    for ds in [doc.get("dataset")] + list(doc.get("datasets") or []):
        if isinstance(ds, dict) and "path" in ds and not Path(ds["path"]).is_absolute():
            ds["path"] = str(base / ds["path"])
    return doc


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _finish(records, out) -> int:
    paths = emit_report(records, out)
    print(paths["txt"].read_text(), end="")
    incomplete = [r for r in records if not r.complete]
    for r in incomplete:
        failed = [e for e in r.per_seed if e.get("status") != "ok"]
        for e in failed:
            _log(f"cell {r.fingerprint} seed {e['seed']}: {e.get('error', 'failed')}")
    return EXIT_OK if not incomplete else EXIT_INCOMPLETE


def cmd_run(args) -> int:
    cells = parse_config(_read(args.config), args.seeds)
    records = run_matrix(cells, args.out, resume=args.resume, jobs=args.jobs, log=_log)
    _log(f"trained {sum(r.trained for r in records)} seed(s) across {len(records)} cell(s)")
    return _finish(records, args.out)


def cmd_report(args) -> int:
    doc = _read(args.config)
    records = load_records(parse_config(doc, args.seeds), args.out)
    code = _finish(records, args.out)
    if "sweep" in doc:
        _write_sweep(doc, records, args.out)
    return code


def _write_sweep(doc, records, out):
    values = [v for _, v in sweep_cells(doc["sweep"])]
    n_data = len(records) // len(values)
    for k in range(n_data):
        block = records[k * len(values):(k + 1) * len(values)]
        name = block[0].row()["dataset"]
        stem = f"sweep-{doc['sweep']['param']}" + (f"-{name}" if n_data > 1 else "")
        print(emit_sweep(block, values, doc["sweep"]["param"], out, stem))


def cmd_sweep(args) -> int:
    doc = _read(args.config)
    if "sweep" not in doc:
        raise ConfigError("sweep config needs a 'sweep' block")
    cells = parse_config(doc, args.seeds)
    records = run_matrix(cells, args.out, resume=args.resume, jobs=args.jobs, log=_log)
    code = _finish(records, args.out)
    _write_sweep(doc, records, args.out)
    return code


def _dataset(doc):
    ds = doc.get("dataset") or (doc.get("datasets") or [None])[0]
    if ds is None:
        raise ConfigError("config needs a 'dataset'")
    return load_dataset(ds, int(doc.get("horizon", 0)) or None)


def cmd_reconstruction(args) -> int:
    panel = _dataset(_read(args.config))
    out = Path(args.out)
    rows, extremes = [], {}
    for kind in ("quantile", "linear"):
        curve = reconstruction_curve(panel, kind, args.bins, norm=args.norm)
        rows.extend(curve.rows())
        extremes[kind] = {str(b): {"worst": list(w), "best": list(be)}
                          for b, w, be in zip(curve.bins, curve.worst, curve.best)}
    path = write_rows(rows, out / f"reconstruction-{args.norm}.csv")
    (out / f"reconstruction-{args.norm}-extremes.json").write_text(
        json.dumps(extremes, indent=2, sort_keys=True) + "\n")
    for r in rows:
        print(f"{r['kind']:<9} B={r['bins']:<5} relative {r['norm']} loss {r['relative_loss']:.6f}")
    print(path)
    return EXIT_OK


def cmd_cdf(args) -> int:
    panel = _dataset(_read(args.config))
    stages = cdf_stage_analysis(panel, args.bins)
    out = Path(args.out)
    path = write_rows(stages.rows(), out / "cdf-stages.csv")
    summary = {"n": stages.n, "buckets": stages.n_bins, "ks_binned": stages.ks_binned,
               "ks_bound": 2 / stages.n ** 0.5, "raw_p99_over_max": stages.raw_p99_over_max}
    (out / "cdf-summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for k, v in summary.items():
        print(f"{k}: {v}")
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsbin", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, runs=True):
        p.add_argument("--config", required=True, help="JSON experiment document")
        p.add_argument("--out", default="results", help="output directory (default: results)")
        if runs:
            p.add_argument("--seeds", type=_seeds, default=None,
                           help="comma-separated seeds, overrides the config")

    for name, fn, text in (("run", cmd_run, "train and score every cell of a matrix"),
                           ("sweep", cmd_sweep, "run a one-parameter bin/embedding sweep")):
        p = sub.add_parser(name, help=text)
        common(p)
        p.add_argument("--resume", action=argparse.BooleanOptionalAction, default=True,
                       help="skip seeds whose metrics already exist (default: on)")
        p.add_argument("--jobs", type=int, default=1, help="parallel seed jobs")
        p.set_defaults(fn=fn)

    p = sub.add_parser("report", help="rebuild tables from stored results without training")
    common(p)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("analyze-reconstruction", help="reconstruction error vs bin count")
    common(p, runs=False)
    p.add_argument("--bins", type=_ints, default=list(RECONSTRUCTION_BINS))
    p.add_argument("--norm", choices=("l2", "l1"), default="l2")
    p.set_defaults(fn=cmd_reconstruction)

    p = sub.add_parser("analyze-cdf", help="pooled CDF at raw, scaled and binned stages")
    common(p, runs=False)
    p.add_argument("--bins", type=int, default=1024)
    p.set_defaults(fn=cmd_cdf)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, PipelineError, PanelError, MetricError, OSError) as exc:
        print(f"tsbin: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
