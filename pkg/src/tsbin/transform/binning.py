"""Scalar quantizers: bin edges, reconstruction centers and their fitting rules.

Bucket ids returned by :func:`bin_index` are 1-based (``1..B``) and buckets are
half-open, ``S_b = [l_{b-1}, l_b)`` with ``l_0 = -inf`` and ``l_B = +inf``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scaling import nearest_rank

KINDS = ("linear", "quantile", "lloyd-max")


class BinningError(ValueError):
    pass


@dataclass(frozen=True)
class BinningSpec:
    """Ordered edges ``l_1..l_{B-1}`` and centers ``c_1..c_B``.

    ``requested_bins`` records the bucket count asked for; when duplicate-heavy
    data collapses buckets, ``n_bins < requested_bins`` and ``collapsed`` is
    true.
    """

    edges: np.ndarray
    centers: np.ndarray
    kind: str
    requested_bins: int | None = None
    history: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        edges = np.array(self.edges, dtype=float).ravel()
        centers = np.array(self.centers, dtype=float).ravel()
        if self.kind not in KINDS:
            raise BinningError(f"unknown binning kind {self.kind!r}")
        if centers.size != edges.size + 1:
            raise BinningError(f"{centers.size} centers do not match {edges.size} edges")
        if edges.size and np.any(np.diff(edges) <= 0):
            raise BinningError("bin edges must be strictly ascending")
        if np.any(np.diff(centers) < 0):
            raise BinningError("bin centers must be non-decreasing")
        if not (np.all(np.isfinite(edges)) and np.all(np.isfinite(centers))):
            raise BinningError("edges and centers must be finite")
        edges.setflags(write=False)
        centers.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "centers", centers)
        if self.requested_bins is None:
            object.__setattr__(self, "requested_bins", centers.size)

    @property
    def n_bins(self) -> int:
        return self.centers.size

    @property
    def collapsed(self) -> bool:
        return self.n_bins < self.requested_bins

    def bin_index(self, x):
        return bin_index(self, x)

    def reconstruct(self, b):
        return reconstruct(self, b)

    def quantize(self, x):
        return self.centers[np.searchsorted(self.edges, np.asarray(x, dtype=float), side="right")]

    def mse(self, values) -> float:
        x = np.asarray(values, dtype=float)
        return float(np.mean((self.quantize(x) - x) ** 2))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "requested_bins": int(self.requested_bins),
            "edges": [float(v) for v in self.edges],
            "centers": [float(v) for v in self.centers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BinningSpec":
        return cls(
            np.asarray(d["edges"], dtype=float),
            np.asarray(d["centers"], dtype=float),
            d["kind"],
            int(d["requested_bins"]),
        )


def bin_index(spec: BinningSpec, x):
    """1-based bucket id of ``x``; total on the real line."""
    idx = np.searchsorted(spec.edges, np.asarray(x, dtype=float), side="right") + 1
    return int(idx) if np.ndim(idx) == 0 else idx


def reconstruct(spec: BinningSpec, b):
    b_arr = np.asarray(b)
    if np.any(b_arr < 1) or np.any(b_arr > spec.n_bins):
        raise BinningError(f"bucket id out of range 1..{spec.n_bins}")
    out = spec.centers[b_arr.astype(np.int64) - 1]
    return float(out) if np.ndim(out) == 0 else out


def fit_linear_bins(x_min: float, x_max: float, n_bins: int) -> BinningSpec:
    """Equal-width buckets over ``[x_min, x_max]`` plus two unbounded outer buckets.

    Bounded buckets reconstruct to their midpoint; the outer buckets clamp to
    the nearest finite edge.
    """
    if n_bins < 3:
        raise BinningError("linear binning needs at least 3 buckets")
    if not x_min < x_max:
        raise BinningError(f"need x_min < x_max, got {x_min} and {x_max}")
    b = np.arange(1, n_bins)
    edges = x_min + (b - 1) * (x_max - x_min) / (n_bins - 2)
    edges[-1] = x_max
    centers = np.empty(n_bins)
    centers[0] = edges[0]
    centers[-1] = edges[-1]
    centers[1:-1] = 0.5 * (edges[:-1] + edges[1:])
    return BinningSpec(edges, centers, "linear", n_bins)


def quantile_levels(n_bins: int) -> np.ndarray:
    """Mid-quantile levels ``(2b - 1) / (2B)``."""
    return (2 * np.arange(1, n_bins + 1) - 1) / (2 * n_bins)


def midpoint_edges(centers: np.ndarray) -> np.ndarray:
    """``(c_b + c_{b+1}) / 2`` for strictly ascending centers.

    When two centers are adjacent floats the midpoint can round onto the lower
    one; the upper center is used instead so each center stays in its bucket.
    """
    lo, hi = centers[:-1], centers[1:]
    mid = 0.5 * (lo + hi)
    return np.where(mid > lo, mid, hi)


def _sorted_sample(values) -> np.ndarray:
    x = np.sort(np.asarray(values, dtype=float).ravel())
    if x.size == 0:
        raise BinningError("cannot fit bins on an empty sample")
    if not np.all(np.isfinite(x)):
        raise BinningError("sample contains non-finite values")
    return x


def _snap_ranks(x: np.ndarray, ranks: np.ndarray, rel_tol: float = 1e-12) -> np.ndarray:
    """Move cut ranks to the nearest gap ``x[k-1] < x[k]`` that is not a rounding artifact.

    A cut at rank ``k`` separates ``x[:k]`` from ``x[k:]``. Values closer than
    ``rel_tol`` (relative) are treated as ties and never split, so copies of a
    value that differ only by rounding share a bucket.
    """
    n = x.size
    ranks = np.clip(ranks, 1, n - 1)
    gaps = np.diff(x)
    ok = np.flatnonzero(gaps > rel_tol * np.maximum(np.abs(x[:-1]), np.abs(x[1:]))) + 1
    if ok.size == 0:
        return ranks
    pos = np.clip(np.searchsorted(ok, ranks), 1, ok.size - 1) if ok.size > 1 else np.zeros_like(ranks)
    left = ok[np.maximum(pos - 1, 0)]
    right = ok[pos]
    return np.where(np.abs(ranks - left) <= np.abs(right - ranks), left, right)


def fit_quantile_bins(values, n_bins: int, edge_rule: str = "equal_count") -> BinningSpec:
    """Quantile binning with nearest-rank centers at the mid-quantile levels.

    ``edge_rule="equal_count"`` places each edge between the order statistics
    at rank ``round(b n / B)`` so buckets hold ``n / B`` sample points (exactly,
    for distinct values and ``n`` divisible by ``B``); ties are never split. ``edge_rule="midpoint"``
    uses ``(c_b + c_{b+1}) / 2``, the squared-error optimal edge for the given
    centers. Equal consecutive centers collapse into one bucket.
    """
    if n_bins < 2:
        raise BinningError("quantile binning needs at least 2 buckets")
    if edge_rule not in ("equal_count", "midpoint"):
        raise BinningError(f"unknown edge rule {edge_rule!r}")
    x = _sorted_sample(values)
    n = x.size
    raw_centers = nearest_rank(x, quantile_levels(n_bins))
    # boundary j separates raw bucket j and j+1 (0-based); keep it if the centers differ
    keep = np.flatnonzero(np.diff(raw_centers) > 0)
    centers = np.concatenate([raw_centers[keep], raw_centers[-1:]])
    lo, hi = centers[:-1], centers[1:]
    midpoints = midpoint_edges(centers)
    if edge_rule == "midpoint" or n == 1:
        edges = midpoints
    else:
        ranks = _snap_ranks(x, np.rint((keep + 1) * n / n_bins).astype(np.int64))
        cuts = 0.5 * (x[ranks - 1] + x[ranks])
        edges = np.where((cuts > lo) & (cuts <= hi), cuts, midpoints)
    return BinningSpec(edges, centers, "quantile", n_bins)


def _bucket_stats(x: np.ndarray, cuts: np.ndarray):
    """Means and SSEs of the contiguous buckets ``x[cuts[k]:cuts[k+1]]``."""
    counts = np.diff(cuts)
    means = np.full(counts.size, np.nan)
    sse = np.zeros(counts.size)
    for k in np.flatnonzero(counts > 0):
        seg = x[cuts[k]:cuts[k + 1]]
        means[k] = seg.mean()
        sse[k] = float(np.sum((seg - means[k]) ** 2))
    return means, sse


def _repair_empty(x: np.ndarray, cuts: np.ndarray) -> np.ndarray:
    """Replace empty buckets by splitting the highest-distortion bucket at its median."""
    cuts = np.asarray(cuts, dtype=np.int64)
    while True:
        counts = np.diff(cuts)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            return cuts
        _, sse = _bucket_stats(x, cuts)
        splittable = [
            k for k in range(counts.size)
            if counts[k] > 1 and x[cuts[k]] < x[cuts[k + 1] - 1]
        ]
        if not splittable:
            return cuts
        k = max(splittable, key=lambda j: sse[j])
        s, e = cuts[k], cuts[k + 1]
        # split between distinct values, as close to the bucket median as possible
        candidates = np.flatnonzero(x[s + 1:e] > x[s:e - 1]) + s + 1
        split = int(candidates[np.argmin(np.abs(candidates - (s + e) / 2.0))])
        # an empty bucket has a repeated cut; drop an interior copy of it
        dup = empty[0] + 1 if empty[0] + 1 < cuts.size - 1 else empty[0]
        cuts = np.sort(np.append(np.delete(cuts, dup), split))


def lloyd_max(values, n_bins: int, max_iter: int = 100, tol: float = 1e-10) -> BinningSpec:
    """Lloyd-Max quantizer for an empirical sample.

    Starts from the equal-count quantile partition and alternates
    conditional-mean centers with midpoint edges until the relative decrease
    of the mean squared error drops to ``tol`` or ``max_iter`` rounds run.
    The returned spec carries the per-iteration MSE in ``history``.
    """
    if max_iter <= 0:
        raise BinningError("max_iter must be positive")
    if n_bins < 2:
        raise BinningError("Lloyd-Max needs at least 2 buckets")
    x = _sorted_sample(values)
    n = x.size
    distinct = np.unique(x)
    if distinct.size <= n_bins:
        centers = distinct
        return BinningSpec(midpoint_edges(centers), centers, "lloyd-max", n_bins,
                           history=(0.0,))

    init = fit_quantile_bins(x, n_bins, edge_rule="equal_count")
    cuts = np.concatenate([[0], np.searchsorted(x, init.edges, side="left"), [n]])
    # collapsed quantile buckets leave fewer cuts; pad with empties so repair can split
    if cuts.size < n_bins + 1:
        cuts = np.concatenate([cuts, np.full(n_bins + 1 - cuts.size, n)])
    history: list[float] = []
    centers = None
    for _ in range(max_iter):
        cuts = _repair_empty(x, cuts)
        centers, sse = _bucket_stats(x, cuts)
        mse = float(sse.sum() / n)
        history.append(mse)
        if mse == 0.0:
            break
        if len(history) > 1 and history[-2] - mse <= tol * history[-2]:
            break
        edges = midpoint_edges(centers)
        cuts = np.concatenate([[0], np.searchsorted(x, edges, side="left"), [n]])
    return BinningSpec(midpoint_edges(centers), centers, "lloyd-max", n_bins, history=tuple(history))


def fit_bins(values, n_bins: int, kind: str = "quantile") -> BinningSpec:
    """Dispatch on ``kind``; linear binning spans the sample range."""
    if kind == "quantile":
        return fit_quantile_bins(values, n_bins)
    if kind == "lloyd-max":
        return lloyd_max(values, n_bins)
    if kind == "linear":
        x = _sorted_sample(values)
        lo, hi = float(x[0]), float(x[-1])
        if lo == hi:
            # constant sample: a single effective bucket at the value
            return BinningSpec(np.empty(0), np.array([lo]), "linear", n_bins)
        return fit_linear_bins(lo, hi, n_bins)
    raise BinningError(f"unknown binning kind {kind!r}; expected one of {KINDS}")
