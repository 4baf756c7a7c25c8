"""Output heads (categorical over bins, mean-scaled Student-t) and sample-based forecasts.

The array functions at the bottom (``*_loss_and_grad``) are the vectorized
forms used by the training loop; the scalar head functions are thin wrappers
around them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, logsumexp

from .transform.binning import BinningSpec
from .transform.scaling import AffineScale, nearest_rank

DEFAULT_SAMPLE_PATHS = 100


class DistributionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Vectorized losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=float)
    return logits - logsumexp(logits, axis=-1, keepdims=True)


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def categorical_loss_and_grad(logits: np.ndarray, targets: np.ndarray):
    """Elementwise ``-log softmax(logits)[target]`` and its gradient w.r.t. logits.

    ``targets`` are 0-based class indices with the shape of ``logits[..., 0]``.
    """
    logp = log_softmax(logits)
    t = np.asarray(targets, dtype=np.int64)[..., None]
    loss = -np.take_along_axis(logp, t, axis=-1)[..., 0]
    grad = np.exp(logp)
    np.put_along_axis(grad, t, np.take_along_axis(grad, t, axis=-1) - 1.0, axis=-1)
    return loss, grad


def studentt_loss_and_grad(mu, sigma, nu, z, series_scale):
    """NLL of ``z`` under ``series_scale * StudentT(nu, mu, sigma)`` with gradients.

    The density is evaluated for ``z / series_scale`` and the ``log series_scale``
    Jacobian term is added, so the loss is a proper negative log-density in the
    original units. Returns ``loss, (d_mu, d_sigma, d_nu)``.
    """
    mu, sigma, nu = (np.asarray(a, dtype=float) for a in (mu, sigma, nu))
    m = np.asarray(series_scale, dtype=float)
    r = (np.asarray(z, dtype=float) / m - mu) / sigma
    w = 1.0 + r * r / nu
    log_w = np.log1p(r * r / nu)
    loss = (
        gammaln(nu / 2) - gammaln((nu + 1) / 2) + 0.5 * np.log(nu * math.pi)
        + np.log(sigma) + 0.5 * (nu + 1) * log_w + np.log(m)
    )
    d_mu = -(nu + 1) * r / (nu * sigma * w)
    d_sigma = 1.0 / sigma - (nu + 1) * r * r / (nu * sigma * w)
    d_nu = (
        0.5 * digamma(nu / 2) - 0.5 * digamma((nu + 1) / 2) + 0.5 / nu
        + 0.5 * log_w - 0.5 * (nu + 1) * r * r / (nu * nu * w)
    )
    return loss, (d_mu, d_sigma, d_nu)


# ---------------------------------------------------------------------------
# Heads


@dataclass(frozen=True)
class CategoricalHead:
    """Categorical distribution over the buckets of ``binning``.

    ``scale`` maps reconstructed centers back to the original domain (grb);
    ``None`` means the centers already live there (lab).
    """

    logits: np.ndarray
    binning: BinningSpec
    scale: AffineScale | None = None

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=float).ravel()
        if logits.size != self.binning.n_bins:
            raise DistributionError(
                f"{logits.size} logits for a binning with {self.binning.n_bins} buckets"
            )
        object.__setattr__(self, "logits", logits)

    @property
    def probs(self) -> np.ndarray:
        return softmax(self.logits)


def categorical_nll(head: CategoricalHead, target_bin: int) -> float:
    """``-log p(target_bin)`` with 1-based bucket ids."""
    if not 1 <= target_bin <= head.binning.n_bins:
        raise DistributionError(f"target bucket {target_bin} outside 1..{head.binning.n_bins}")
    loss, _ = categorical_loss_and_grad(head.logits, target_bin - 1)
    return float(loss)


def categorical_nll_grad(head: CategoricalHead, target_bin: int) -> np.ndarray:
    if not 1 <= target_bin <= head.binning.n_bins:
        raise DistributionError(f"target bucket {target_bin} outside 1..{head.binning.n_bins}")
    return categorical_loss_and_grad(head.logits, target_bin - 1)[1]


def sample_categorical(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw of 0-based class ids, one uniform per row of ``logits``."""
    probs = softmax(logits)
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(size=probs.shape[:-1] + (1,)) * cdf[..., -1:]
    idx = (cdf <= u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def categorical_sample(head: CategoricalHead, rng: np.random.Generator, size=None):
    """Draw bucket(s) and return reconstructed values in the original domain."""
    logits = head.logits
    if size is not None:
        logits = np.broadcast_to(logits, (*np.atleast_1d(size), logits.size))
    b = sample_categorical(logits, rng)
    values = head.binning.centers[b]
    if head.scale is not None:
        values = head.scale.invert(values)
    return float(values) if np.ndim(values) == 0 else values


@dataclass(frozen=True)
class StudentTHead:
    """Student-t in mean-scaled space; ``series_scale`` is the series' ``m_i``."""

    mu: float
    sigma: float
    nu: float
    series_scale: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise DistributionError("sigma must be positive")
        if not self.nu > 2:
            raise DistributionError("degrees of freedom must exceed 2")
        if not self.series_scale > 0:
            raise DistributionError("series scale must be positive")


def studentt_nll(head: StudentTHead, z: float) -> float:
    loss, _ = studentt_loss_and_grad(head.mu, head.sigma, head.nu, z, head.series_scale)
    return float(loss)


def studentt_nll_grad(head: StudentTHead, z: float) -> tuple[float, float, float]:
    """Gradient of :func:`studentt_nll` w.r.t. ``(mu, sigma, nu)``."""
    _, grads = studentt_loss_and_grad(head.mu, head.sigma, head.nu, z, head.series_scale)
    return tuple(float(g) for g in grads)


def studentt_sample(head: StudentTHead, rng: np.random.Generator, size=None):
    t = rng.standard_t(head.nu, size=size)
    out = head.series_scale * (head.mu + head.sigma * t)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# Forecasts


@dataclass(frozen=True)
class ForecastDistribution:
    """``S x tau`` sample paths in the original value domain."""

    sample_paths: np.ndarray
    item_id: str = ""

    def __post_init__(self):
        paths = np.array(self.sample_paths, dtype=float)
        if paths.ndim == 1:
            paths = paths[None, :]
        if paths.ndim != 2 or paths.shape[0] < 1 or paths.shape[1] < 1:
            raise DistributionError("sample_paths must be a non-empty S x tau array")
        paths.setflags(write=False)
        object.__setattr__(self, "sample_paths", paths)
        object.__setattr__(self, "_sorted", np.sort(paths, axis=0))

    @property
    def num_samples(self) -> int:
        return self.sample_paths.shape[0]

    @property
    def horizon(self) -> int:
        return self.sample_paths.shape[1]

    def quantile(self, alpha, step: int | None = None):
        return quantile(self, step, alpha)

    def quantiles(self, levels) -> np.ndarray:
        """``(len(levels), tau)`` array of nearest-rank quantiles."""
        levels = np.asarray(levels, dtype=float)
        _check_levels(levels)
        return nearest_rank(self._sorted, levels)

    def mean(self) -> np.ndarray:
        return self.sample_paths.mean(axis=0)


def _check_levels(alpha) -> None:
    a = np.asarray(alpha, dtype=float)
    if np.any(~(a > 0)) or np.any(~(a < 1)):
        raise DistributionError("quantile levels must lie strictly inside (0, 1)")


def quantile(forecast: ForecastDistribution, step: int | None, alpha: float):
    """Nearest-rank quantile of the samples at ``step`` (all steps when ``None``)."""
    _check_levels(alpha)
    col = forecast._sorted if step is None else forecast._sorted[:, step]
    out = nearest_rank(col, alpha)
    return float(out) if np.ndim(out) == 0 else out
