"""Affine scaling and the empirical probability integral transform."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEGENERATE_SCALE = 1e-12


@dataclass(frozen=True)
class AffineScale:
    """``z' = (z - b) / a`` with ``a > 0``."""

    a: float
    b: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"scale must be positive and finite, got {self.a}")

    def apply(self, values):
        return (np.asarray(values, dtype=float) - self.b) / self.a

    def invert(self, values):
        return np.asarray(values, dtype=float) * self.a + self.b

    def log_abs_det(self) -> float:
        """log |d z'/d z|."""
        return -math.log(self.a)

    def to_dict(self) -> dict:
        return {"a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineScale":
        return cls(float(d["a"]), float(d["b"]))


def _checked(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("cannot fit a transform on an empty sequence")
    return arr


def fit_mean_scale(values) -> AffineScale:
    """Mean-absolute scaling; an all-zero series falls back to ``a = 1``."""
    a = float(np.mean(np.abs(_checked(values))))
    if a <= DEGENERATE_SCALE:
        a = 1.0
    return AffineScale(a, 0.0)


def fit_min_max_scale(values) -> AffineScale:
    arr = _checked(values)
    span = float(arr.max() - arr.min())
    return AffineScale(span if span > DEGENERATE_SCALE else 1.0, float(arr.min()))


def fit_standard_scale(values) -> AffineScale:
    arr = _checked(values)
    sd = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return AffineScale(sd if sd > DEGENERATE_SCALE else 1.0, float(arr.mean()))


def apply_affine(scale: AffineScale, values):
    return scale.apply(values)


def invert_affine(scale: AffineScale, values):
    return scale.invert(values)


def nearest_rank(sorted_values: np.ndarray, q):
    """Nearest-rank empirical quantile: element ``ceil(q * n)`` (1-based).

    ``q`` may be a scalar or an array of levels in ``[0, 1]``. The product
    ``q * n`` is rounded to 9 decimals before the ceiling so that levels such
    as ``k / n`` hit rank ``k`` exactly.
    """
    n = sorted_values.shape[0]
    q = np.asarray(q, dtype=float)
    rank = np.ceil(np.round(q * n, 9)).astype(np.int64)
    rank = np.clip(rank, 1, n)
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class EmpiricalCDF:
    sorted_support: np.ndarray

    def __post_init__(self):
        arr = np.sort(_checked(self.sorted_support))
        arr.setflags(write=False)
        object.__setattr__(self, "sorted_support", arr)

    @property
    def n(self) -> int:
        return self.sorted_support.size

    def __call__(self, x):
        return pit(self, x)

    def to_dict(self) -> dict:
        return {"support": [float(v) for v in self.sorted_support]}

    @classmethod
    def from_dict(cls, d: dict) -> "EmpiricalCDF":
        return cls(np.asarray(d["support"], dtype=float))


def fit_empirical_cdf(values) -> EmpiricalCDF:
    return EmpiricalCDF(np.asarray(values, dtype=float))


def pit(cdf: EmpiricalCDF, x):
    """``#{samples <= x} / n``, clamped below to ``1 / (2n)``."""
    n = cdf.n
    u = np.searchsorted(cdf.sorted_support, np.asarray(x, dtype=float), side="right") / n
    u = np.maximum(u, 1.0 / (2 * n))
    return float(u) if np.ndim(u) == 0 else u


def pit_inverse(cdf: EmpiricalCDF, u):
    u_arr = np.asarray(u, dtype=float)
    if np.any(~(u_arr > 0)) or np.any(u_arr > 1):
        raise ValueError("PIT values must lie in (0, 1]")
    out = nearest_rank(cdf.sorted_support, u_arr)
    return float(out) if np.ndim(out) == 0 else out
