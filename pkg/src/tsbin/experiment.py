"""Experiment matrices: config parsing, per-seed runs with resumable artifacts, reports.

Layout of a run directory::

    <out>/runs/<fingerprint>/config.json
    <out>/runs/<fingerprint>/record.json
    <out>/runs/<fingerprint>/seed-<s>/{model.bin, forecasts.csv, metrics.json}

The fingerprint covers everything except the seed list, so adding seeds to a
finished cell only trains the new ones.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import shutil
import statistics
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import SynthSpec, load_panel, split_backtest, synth_panel
from .eval import WQL_LEVELS, evaluate, write_rows
from .model import ModelConfig, TrainConfig, predict_panel, save_model, train
from .transform import ReprSpec, build_pipeline, parse_repr

DEFAULT_SEEDS = (0, 1, 2)
MODEL_IDS = {
    "feedforward": "feed-forward",
    "feed-forward": "feed-forward",
    "ff": "feed-forward",
    "dilated-cnn": "dilated-cnn",
    "cnn": "dilated-cnn",
    "wavenet": "dilated-cnn",
}
REPORT_COLUMNS = ("dataset", "model", "input_repr", "output_repr", "mean_wql_mean",
                  "mean_wql_std", "nd_mean", "nd_std", "seeds")
SWEEP_PARAMS = ("output_bins", "input_bins", "embedding_dim")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class CellConfig:
    """One (dataset, model, input repr, output repr) cell of a matrix."""

    dataset: dict
    horizon: int
    model: str
    input_repr: str
    output_repr: str
    seeds: tuple = DEFAULT_SEEDS
    train: dict = field(default_factory=dict)
    network: dict = field(default_factory=dict)

    def __post_init__(self):
        model = MODEL_IDS.get(str(self.model).lower())
        if model is None:
            raise ConfigError(f"unknown model {self.model!r}; supported: {', '.join(MODEL_IDS)}")
        object.__setattr__(self, "model", model)
        # canonical repr ids; unsupported ids fail here, before any work starts
        object.__setattr__(self, "input_repr", str(parse_repr(self.input_repr, "input")))
        object.__setattr__(self, "output_repr", str(parse_repr(self.output_repr, "output")))
        if int(self.horizon) < 1:
            raise ConfigError("horizon must be positive")
        seeds = tuple(int(s) for s in self.seeds)
        if not seeds or len(set(seeds)) != len(seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "horizon", int(self.horizon))
        if "path" not in self.dataset and "synthetic" not in self.dataset:
            raise ConfigError("dataset needs either 'path' or 'synthetic'")
        bad = (set(self.train) - {f.name for f in fields(TrainConfig)}) | ({"seed", "horizon"} & set(self.train))
        if bad:
            raise ConfigError(f"unsupported train overrides: {sorted(bad)}")
        bad = (set(self.network) - {f.name for f in fields(ModelConfig)}) | ({"architecture"} & set(self.network))
        if bad:
            raise ConfigError(f"unsupported network overrides: {sorted(bad)}")

    @property
    def dataset_name(self) -> str:
        return dataset_name(self.dataset)

    def identity(self) -> dict:
        d = asdict(self)
        d.pop("seeds")
        return d

    def fingerprint(self) -> str:
        return fingerprint(self.identity())

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(**{**self.train, "seed": int(seed), "horizon": self.horizon})

    def model_config(self) -> ModelConfig:
        return ModelConfig(architecture=self.model, **self.network)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d


def dataset_name(dataset: dict) -> str:
    if dataset.get("name"):
        return str(dataset["name"])
    return Path(dataset["path"]).stem if "path" in dataset else "synthetic"


def fingerprint(obj) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()[:16]


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def parse_config(doc: dict, seeds=None) -> list:
    """Expand a matrix document into cells.

    Either ``cells`` (explicit list) or ``grid`` (cartesian product of
    ``model`` x ``input_repr`` x ``output_repr``) must be present; ``dataset``,
    ``datasets``, ``horizon``, ``seeds``, ``train`` and ``network`` act as
    defaults that individual cells may override. A ``sweep`` block is turned
    into cells by :func:`sweep_cells`.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    datasets = doc.get("datasets") or ([doc["dataset"]] if "dataset" in doc else [])
    if not datasets:
        raise ConfigError("config needs 'dataset' or 'datasets'")
    base = {
        "horizon": doc.get("horizon", 24),
        "seeds": tuple(seeds if seeds is not None else doc.get("seeds", DEFAULT_SEEDS)),
        "train": dict(doc.get("train", {})),
        "network": dict(doc.get("network", {})),
    }
    if "sweep" in doc:
        raw_cells = [c for c, _ in sweep_cells(doc["sweep"])]
    elif "cells" in doc:
        raw_cells = list(doc["cells"])
    elif "grid" in doc:
        g = doc["grid"]
        raw_cells = [{"model": m, "input_repr": i, "output_repr": o} for m, i, o in
                     itertools.product(_as_list(g.get("model", "feedforward")),
                                       _as_list(g["input_repr"]), _as_list(g["output_repr"]))]
    else:
        raise ConfigError("config needs 'cells', 'grid' or 'sweep'")
    if not raw_cells:
        raise ConfigError("config expands to zero cells")
    cells = []
    for ds in datasets:
        for raw in raw_cells:
            merged = {**base, **{k: v for k, v in raw.items() if k not in ("train", "network")}}
            merged["train"] = {**base["train"], **raw.get("train", {})}
            merged["network"] = {**base["network"], **raw.get("network", {})}
            if seeds is not None:
                merged["seeds"] = tuple(seeds)
            try:
                cells.append(CellConfig(dataset=dict(raw.get("dataset", ds)), **{
                    k: merged[k] for k in ("horizon", "model", "input_repr", "output_repr",
                                           "seeds", "train", "network")}))
            except KeyError as exc:
                raise ConfigError(f"cell {raw} is missing {exc.args[0]!r}") from None
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
    return cells


def sweep_cells(sweep: dict) -> list:
    """``[(cell_dict, value)]`` for a one-parameter sweep around a base cell."""
    param = sweep.get("param")
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"sweep param must be one of {SWEEP_PARAMS}, got {param!r}")
    values = list(sweep.get("values", []))
    if not values:
        raise ConfigError("sweep needs a non-empty 'values' list")
    base = dict(sweep.get("base", {}))
    base.setdefault("model", "feedforward")
    base.setdefault("input_repr", "grb(1024)")
    base.setdefault("output_repr", "grb(1024)")
    out = []
    for v in values:
        cell = json.loads(json.dumps(base))
        if param == "embedding_dim":
            cell.setdefault("network", {})["embedding_dim"] = int(v)
        else:
            key = param.replace("_bins", "_repr")
            spec = parse_repr(cell[key], key.split("_")[0])
            if spec.mode not in ("grb", "lab", "pit"):
                spec = ReprSpec("grb")
            cell[key] = str(replace(spec, bins=int(v)))
        out.append((cell, v))
    return out


def load_config(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_dataset(dataset: dict, horizon: int):
    if "synthetic" in dataset:
        spec = SynthSpec.from_dict(dataset["synthetic"])
        return synth_panel(spec, int(dataset.get("seed", 0)))
    return load_panel(dataset["path"], horizon=horizon, freq=dataset.get("freq", "H"))


# ---------------------------------------------------------------------------
# Running


@dataclass
class ResultRecord:
    fingerprint: str
    config: dict
    per_seed: list  # dicts: seed, status, mean_wql, nd, wall_clock, log summary / error
    trained: int = 0  # seeds (re)computed in this invocation

    @property
    def completed(self) -> list:
        return [r for r in self.per_seed if r.get("status") == "ok"]

    @property
    def complete(self) -> bool:
        return len(self.completed) == len(self.config["seeds"])

    def aggregate(self, key: str) -> tuple[float, float]:
        """Mean and sample standard deviation (0 for a single seed) of ``key``."""
        vals = [r[key] for r in self.completed]
        if not vals:
            return math.nan, math.nan
        mean = math.fsum(vals) / len(vals)
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return mean, std

    def row(self) -> dict:
        wm, ws = self.aggregate("mean_wql")
        nm, ns = self.aggregate("nd")
        cfg = self.config
        return {"dataset": dataset_name(cfg["dataset"]), "model": cfg["model"], "input_repr": cfg["input_repr"],
                "output_repr": cfg["output_repr"], "mean_wql_mean": wm, "mean_wql_std": ws,
                "nd_mean": nm, "nd_std": ns, "seeds": len(self.completed)}

    def to_dict(self) -> dict:
        return {"fingerprint": self.fingerprint, "config": self.config, "per_seed": self.per_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ResultRecord":
        return cls(d["fingerprint"], d["config"], d["per_seed"])


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _forecast_rows(forecasts, targets):
    for fc, actual in zip(forecasts, targets):
        q = fc.quantiles(WQL_LEVELS)
        mean = fc.mean()
        for t in range(fc.horizon):
            row = {"item_id": fc.item_id, "step": t + 1, "actual": float(actual[t]),
                   "mean": float(mean[t])}
            row.update({f"q{a:g}": float(q[k, t]) for k, a in enumerate(WQL_LEVELS)})
            yield row


def run_seed(cell: CellConfig, seed: int, seed_dir) -> dict:
    """Train, forecast and score one seed; writes artifacts and returns the metrics entry."""
    seed_dir = Path(seed_dir)
    t0 = time.perf_counter()
    panel = load_dataset(cell.dataset, cell.horizon)
    split = split_backtest(panel, cell.horizon)
    pipeline = build_pipeline(split.train, cell.input_repr, cell.output_repr)
    model = train(split.train, pipeline, cell.model_config(), cell.train_config(seed))
    seed_dir.mkdir(parents=True, exist_ok=True)
    save_model(model, seed_dir / "model.bin")
    forecasts = predict_panel(model, split.train, seed=seed)
    targets = split.targets()
    report = evaluate(forecasts, targets, [fc.item_id for fc in forecasts])
    write_rows(_forecast_rows(forecasts, targets), seed_dir / "forecasts.csv")
    entry = {
        "seed": int(seed),
        "status": "ok",
        "mean_wql": report.mean_wql,
        "nd": report.nd,
        "wall_clock": round(time.perf_counter() - t0, 3),
        "train_log": {"epochs": len(model.log), "first_loss": model.log[0]["loss"],
                      "final_loss": model.log[-1]["loss"], "final_lr": model.log[-1]["lr"]},
        "per_series": report.per_series,
    }
    _write_json(seed_dir / "metrics.json", entry)
    return entry


def _run_seed_safe(cell: CellConfig, seed: int, seed_dir) -> dict:
    try:
        return run_seed(cell, seed, seed_dir)
    except Exception as exc:  # one seed failing must not stop the others
        entry = {"seed": int(seed), "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                 "traceback": traceback.format_exc(limit=5)}
        _write_json(Path(seed_dir) / "failure.json", entry)
        return entry


def _completed_entry(seed_dir: Path):
    path = seed_dir / "metrics.json"
    if not path.exists():
        return None
    entry = json.loads(path.read_text())
    return entry if entry.get("status") == "ok" else None


def run_dir(out, cell: CellConfig) -> Path:
    return Path(out) / "runs" / cell.fingerprint()


def _pending(cell: CellConfig, out, resume: bool):
    rdir = run_dir(out, cell)
    _write_json(rdir / "config.json", cell.identity())
    done, queue = {}, []
    for s in cell.seeds:
        sdir = rdir / f"seed-{s}"
        entry = _completed_entry(sdir) if resume else None
        if entry is None:
            if sdir.exists():
                shutil.rmtree(sdir)
            queue.append((s, sdir))
        else:
            done[s] = entry
    return done, queue


def _finish(cell: CellConfig, out, entries: dict, trained: int) -> ResultRecord:
    rec = ResultRecord(cell.fingerprint(), cell.to_dict(),
                       [entries[s] for s in cell.seeds], trained)
    slim = {**rec.to_dict(),
            "per_seed": [{k: v for k, v in e.items() if k not in ("per_series", "traceback")}
                         for e in rec.per_seed]}
    _write_json(run_dir(out, cell) / "record.json", slim)
    return rec


def run_cell(cell: CellConfig, out, resume: bool = True, log=None) -> ResultRecord:
    done, queue = _pending(cell, out, resume)
    for s, sdir in queue:
        if log:
            log(f"[{cell.fingerprint()}] {cell.model} {cell.input_repr} -> {cell.output_repr} seed {s}")
        done[s] = _run_seed_safe(cell, s, sdir)
    return _finish(cell, out, done, len(queue))


def run_matrix(cells, out, resume: bool = True, jobs: int = 1, log=None) -> list:
    """Run every cell (and seed); cells already complete on disk are not retrained."""
    cells = list(cells)
    if not cells:
        raise ConfigError("nothing to run")
    if jobs <= 1:
        return [run_cell(c, out, resume, log) for c in cells]
    plans = [_pending(c, out, resume) for c in cells]
    work = [(i, s, sdir) for i, (_, queue) in enumerate(plans) for s, sdir in queue]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [(i, s, pool.submit(_run_seed_safe, cells[i], s, sdir)) for i, s, sdir in work]
        for i, s, fut in futures:
            plans[i][0][s] = fut.result()
            if log:
                log(f"[{cells[i].fingerprint()}] seed {s}: {plans[i][0][s]['status']}")
    return [_finish(c, out, done, len(queue)) for c, (done, queue) in zip(cells, plans)]


def load_records(cells, out) -> list:
    """Stored records for ``cells`` (in order); missing cells raise."""
    recs = []
    for c in cells:
        path = run_dir(out, c) / "record.json"
        if not path.exists():
            raise ConfigError(f"no stored result for cell {c.fingerprint()} under {out}")
        recs.append(ResultRecord.from_dict(json.loads(path.read_text())))
    return recs


# ---------------------------------------------------------------------------
# Reports


def result_table(records) -> list:
    """One row per record with a ``best`` flag on the lowest mean wQL per dataset."""
    rows = [r.row() for r in records]
    best = {}
    for k, row in enumerate(rows):
        v = row["mean_wql_mean"]
        if not math.isnan(v) and (row["dataset"] not in best or v < rows[best[row["dataset"]]]["mean_wql_mean"]):
            best[row["dataset"]] = k
    for k, row in enumerate(rows):
        row["best"] = best.get(row["dataset"]) == k
        row["complete"] = records[k].complete
    return rows


def format_table(rows) -> str:
    headers = ["dataset", "model", "input", "output", "mean wQL", "ND", "seeds"]
    body = []
    for r in rows:
        mark = " *" if r["best"] else ""
        partial = "" if r["complete"] else " (partial)"
        body.append([r["dataset"], r["model"], r["input_repr"], r["output_repr"],
                     f"{r['mean_wql_mean']:.4f} +- {r['mean_wql_std']:.4f}{mark}",
                     f"{r['nd_mean']:.4f} +- {r['nd_std']:.4f}", f"{r['seeds']}{partial}"])
    widths = [max(len(str(x)) for x in col) for col in zip(headers, *body)]
    lines = ["  ".join(str(x).ljust(w) for x, w in zip(row, widths)).rstrip()
             for row in [headers, ["-" * w for w in widths], *body]]
    lines.append("* lowest mean wQL per dataset")
    return "\n".join(lines) + "\n"


def emit_report(records, out, stem: str = "results") -> dict:
    """Write ``<stem>.csv`` and ``<stem>.txt``; returns the paths."""
    records = list(records)
    if not records:
        raise ConfigError("no results to report")
    out = Path(out)
    rows = result_table(records)
    csv_path = write_rows(rows, out / f"{stem}.csv", REPORT_COLUMNS)
    txt_path = out / f"{stem}.txt"
    try:
        txt_path.write_text(format_table(rows))
    except OSError as exc:
        raise ConfigError(f"cannot write {txt_path}: {exc}") from exc
    return {"csv": csv_path, "txt": txt_path}


def emit_sweep(records, values, param: str, out, stem: str | None = None) -> Path:
    rows = []
    for rec, v in zip(records, values):
        row = rec.row()
        rows.append({param: v, **{k: row[k] for k in REPORT_COLUMNS[4:]}})
    return write_rows(rows, Path(out) / f"{stem or 'sweep-' + param}.csv",
                      [param, *REPORT_COLUMNS[4:]])


def seed_values(records, key: str = "mean_wql") -> np.ndarray:
    """``(cells, seeds)`` array of per-seed metric values (NaN for failed seeds)."""
    out = []
    for r in records:
        by_seed = {e["seed"]: e for e in r.per_seed}
        out.append([by_seed[s].get(key, math.nan) if by_seed[s].get("status") == "ok" else math.nan
                    for s in r.config["seeds"]])
    return np.asarray(out, dtype=float)
