"""Forecast metrics and the reconstruction / CDF analyses behind the figures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Panel
from .dist import ForecastDistribution
from .transform.pipeline import GlobalRelativeBinning
from .transform.scaling import fit_mean_scale

WQL_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))
MEDIAN = (0.5,)
RECONSTRUCTION_BINS = (16, 64, 256, 1024)


class MetricError(ValueError):
    pass


def _quantile_rows(forecast, levels) -> np.ndarray:
    """``(len(levels), tau)`` quantiles from a forecast in any accepted form."""
    if isinstance(forecast, ForecastDistribution):
        return forecast.quantiles(levels)
    q = np.asarray(forecast, dtype=float)
    if q.ndim == 1:  # point forecast, same value for every level
        return np.broadcast_to(q, (len(levels), q.size))
    if q.ndim != 2 or q.shape[0] != len(levels):
        raise MetricError(f"quantile array must be (levels={len(levels)}, tau), got {q.shape}")
    return q


def pinball_sums(forecasts, actuals, levels=WQL_LEVELS):
    """Per-series numerators ``(2/|A|) sum_t sum_a (a - I[z<q])(z - q)`` and ``sum |z|``."""
    levels = tuple(float(a) for a in levels)
    if not levels:
        raise MetricError("need at least one quantile level")
    forecasts, actuals = list(forecasts), list(actuals)
    if len(forecasts) != len(actuals):
        raise MetricError(f"{len(forecasts)} forecasts for {len(actuals)} series")
    alpha = np.asarray(levels)[:, None]
    nums, dens = [], []
    for f, z in zip(forecasts, actuals):
        z = np.asarray(z, dtype=float)
        q = _quantile_rows(f, levels)
        if q.shape[1] != z.size:
            raise MetricError(f"forecast covers {q.shape[1]} steps, actuals have {z.size}")
        loss = (alpha - (z < q)) * (z - q)
        nums.append(2.0 / len(levels) * loss.sum())
        dens.append(np.abs(z).sum())
    return np.asarray(nums), np.asarray(dens)


def mean_wql(forecasts, actuals, levels=WQL_LEVELS) -> float:
    """Weighted quantile loss pooled over all series and steps."""
    nums, dens = pinball_sums(forecasts, actuals, levels)
    total = dens.sum()
    if not total > 0:
        raise MetricError("sum of absolute actuals is zero; wQL is undefined")
    return float(nums.sum() / total)


def nd(forecasts, actuals) -> float:
    return mean_wql(forecasts, actuals, MEDIAN)


@dataclass(frozen=True)
class MetricReport:
    mean_wql: float
    nd: float
    per_series: dict  # item_id -> {"mean_wql": ..., "nd": ...}, own denominators
    levels: tuple = WQL_LEVELS

    def to_dict(self) -> dict:
        return {"mean_wql": self.mean_wql, "nd": self.nd, "levels": list(self.levels),
                "per_series": self.per_series}


def evaluate(forecasts, actuals, item_ids=None, levels=WQL_LEVELS) -> MetricReport:
    forecasts, actuals = list(forecasts), list(actuals)
    if item_ids is None:
        item_ids = [getattr(f, "item_id", "") or str(k) for k, f in enumerate(forecasts)]
    w_num, dens = pinball_sums(forecasts, actuals, levels)
    m_num, _ = pinball_sums(forecasts, actuals, MEDIAN)
    if not dens.sum() > 0:
        raise MetricError("sum of absolute actuals is zero; wQL is undefined")
    per = {}
    for i, w, m, d in zip(item_ids, w_num, m_num, dens):
        per[str(i)] = {"mean_wql": float(w / d) if d > 0 else math.nan,
                       "nd": float(m / d) if d > 0 else math.nan}
    return MetricReport(float(w_num.sum() / dens.sum()), float(m_num.sum() / dens.sum()), per,
                        tuple(levels))


# ---------------------------------------------------------------------------
# Reconstruction


def relative_error(reconstructed, values, norm: str = "l2") -> float:
    """``||z_hat - z|| / ||z||`` in the L2 (default) or L1 norm."""
    order = {"l2": 2, "l1": 1}.get(norm)
    if order is None:
        raise MetricError(f"unknown norm {norm!r}; expected 'l2' or 'l1'")
    z = np.asarray(values, dtype=float)
    err = float(np.linalg.norm(np.asarray(reconstructed, dtype=float) - z, order))
    size = float(np.linalg.norm(z, order))
    if size == 0:
        return 0.0 if err == 0 else math.inf
    return err / size


def relative_l2(reconstructed, values) -> float:
    return relative_error(reconstructed, values, "l2")


@dataclass(frozen=True)
class ReconstructionCurve:
    kind: str
    bins: tuple
    losses: tuple  # mean over series, one per entry of ``bins``
    norm: str = "l2"
    per_series: tuple = field(default=(), repr=False)  # dicts item_id -> loss
    worst: tuple = ()  # per B: up to five item ids, largest error first
    best: tuple = ()  # per B: up to five item ids, smallest error first

    def rows(self) -> list:
        return [{"kind": self.kind, "norm": self.norm, "bins": b, "relative_loss": v}
                for b, v in zip(self.bins, self.losses)]


def reconstruction_curve(panel: Panel, kind: str = "quantile", bins=RECONSTRUCTION_BINS,
                         top: int = 5, norm: str = "l2") -> ReconstructionCurve:
    """Mean per-series relative error of scale -> bin -> reconstruct -> unscale, per bin count."""
    losses, per_series, worst, best = [], [], [], []
    for b in bins:
        if b < 2:
            raise MetricError("bin counts must be at least 2")
        rep = GlobalRelativeBinning.fit(panel, int(b), kind)
        errs = {ts.item_id: relative_error(rep.decode(ts.item_id, rep.encode(ts.item_id, ts.values)),
                                           ts.values, norm) for ts in panel}
        order = sorted(errs, key=lambda k: (errs[k], k))
        losses.append(float(np.mean(list(errs.values()))))
        per_series.append(errs)
        best.append(tuple(order[:top]))
        worst.append(tuple(reversed(order[-top:])))
    return ReconstructionCurve(kind, tuple(int(b) for b in bins), tuple(losses), norm,
                               tuple(per_series), tuple(worst), tuple(best))


# ---------------------------------------------------------------------------
# CDF stages


def empirical_cdf_table(values) -> tuple[np.ndarray, np.ndarray]:
    """Distinct sorted support and ``F(x) = #{<= x} / n`` at each support point."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    support, counts = np.unique(x, return_counts=True)
    return support, np.cumsum(counts) / x.size


def ks_uniform_discrete(ids, n_buckets: int) -> float:
    """KS distance between the CDF of 1-based ids and the uniform law on ``1..n_buckets``."""
    ids = np.asarray(ids, dtype=np.int64).ravel()
    counts = np.bincount(ids, minlength=n_buckets + 1)[1:n_buckets + 1]
    emp = np.cumsum(counts) / ids.size
    return float(np.max(np.abs(emp - np.arange(1, n_buckets + 1) / n_buckets)))


@dataclass(frozen=True)
class CdfStages:
    n_bins: int
    tables: dict  # stage -> (support, cdf)
    ks_binned: float
    n: int

    @property
    def raw_p99_over_max(self) -> float:
        support, cdf = self.tables["raw"]
        p99 = support[np.searchsorted(cdf, 0.99)]
        return float(p99 / support[-1]) if support[-1] != 0 else math.nan

    def rows(self) -> list:
        out = []
        for stage, (x, f) in self.tables.items():
            out.extend({"stage": stage, "x": float(a), "cdf": float(b)} for a, b in zip(x, f))
        return out


def cdf_stage_analysis(panel: Panel, n_bins: int = 1024, kind: str = "quantile") -> CdfStages:
    raw = panel.pooled()
    scaled = np.concatenate([fit_mean_scale(ts.values).apply(ts.values) for ts in panel])
    rep = GlobalRelativeBinning.fit(panel, n_bins, kind)
    ids = np.concatenate([rep.encode(ts.item_id, ts.values) for ts in panel]) + 1
    buckets = rep.spec.n_bins
    support = np.arange(1, buckets + 1, dtype=float)
    binned = (support, np.cumsum(np.bincount(ids, minlength=buckets + 1)[1:]) / ids.size)
    tables = {"raw": empirical_cdf_table(raw), "ms": empirical_cdf_table(scaled), "grb": binned}
    return CdfStages(buckets, tables, ks_uniform_discrete(ids, buckets), int(ids.size))


def write_rows(rows, path, columns=None) -> Path:
    path = Path(path)
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _fmt(row[k]) for k in columns})
    except OSError as exc:
        raise MetricError(f"cannot write {path}: {exc}") from exc
    return path


def _fmt(v):
    return repr(v) if isinstance(v, float) else v
