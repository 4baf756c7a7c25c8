"""Batching, loss and gradients, Adam, the training loop, prediction and persistence."""

from __future__ import annotations

import io
import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..core import Panel, TimeSeries
from ..dist import DEFAULT_SAMPLE_PATHS, ForecastDistribution, sample_categorical
from ..transform.pipeline import RepresentationPipeline
from .autograd import categorical_nll, studentt_nll
from .network import (
    ModelConfig,
    ModelError,
    NetworkSpec,
    StepInputs,
    build_network_spec,
    encode_values,
    flatten_grads,
    forward,
    init_parameters,
    parameter_count,
    parameter_tensors,
    series_arrays,
    stack_inputs,
    studentt_params,
    window_inputs,
)

MODEL_FORMAT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    """Raised when a batch produces a non-finite loss; names the offending windows."""

    def __init__(self, window_ids):
        self.window_ids = list(window_ids)
        shown = ", ".join(f"{i}@{s}" for i, s in self.window_ids[:5])
        super().__init__(f"non-finite loss in windows (item@start): {shown}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 150
    batches_per_epoch: int = 50
    initial_lr: float = 1e-2
    lr_decay_factor: float = 0.5
    decay_patience: int = 5
    min_lr: float = 1e-5
    seed: int = 0
    context_length: int | None = None  # None: twice the horizon
    horizon: int = 24
    sample_paths: int = DEFAULT_SAMPLE_PATHS

    def __post_init__(self):
        counts = ("batch_size", "epochs", "batches_per_epoch", "decay_patience", "horizon",
                  "sample_paths")
        for name in counts:
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")
        if self.context_length is not None and self.context_length < 1:
            raise ModelError("context_length must be positive")
        if not 0 < self.lr_decay_factor < 1:
            raise ModelError("lr_decay_factor must lie in (0, 1)")
        if not self.initial_lr > 0 or self.min_lr < 0:
            raise ModelError("learning rates must be positive")

    @property
    def context(self) -> int:
        return self.context_length or 2 * self.horizon

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# Batches and loss


@dataclass
class Batch:
    inputs: StepInputs
    targets: np.ndarray  # (N, tau): 0-based buckets or raw values
    series_scale: np.ndarray  # (N,)
    window_ids: list


def make_batch(spec: NetworkSpec, arrays: list, windows) -> Batch:
    """Build a batch from ``(series index, start)`` pairs over ``arrays``."""
    c, tau = spec.context_length, spec.horizon
    n_in = c if spec.architecture == "feed-forward" else c + tau - 1
    rows, targets, scales, ids = [], [], [], []
    for i, s in windows:
        arr = arrays[i]
        if s < 0 or s + c + tau > len(arr):
            raise ModelError(f"window {arr.item_id}@{s} exceeds the series")
        rows.append(window_inputs(spec, arr, s, n_in))
        targets.append(arr.targets[s + c:s + c + tau])
        scales.append(arr.series_scale)
        ids.append((arr.item_id, int(s)))
    return Batch(stack_inputs(rows), np.stack(targets), np.asarray(scales), ids)


def _window_losses(spec: NetworkSpec, params: dict, batch: Batch):
    raw = forward(spec, params, batch.inputs, last=spec.horizon)
    if spec.head == "categorical":
        per_step = categorical_nll(raw, batch.targets)
    else:
        mu, sigma, nu = studentt_params(raw)
        per_step = studentt_nll(mu, sigma, nu, batch.targets, batch.series_scale[:, None])
    return per_step


def loss_and_gradients(spec: NetworkSpec, flat: np.ndarray, batch: Batch):
    """Mean over windows of the NLL summed over the horizon, and its gradient."""
    params = parameter_tensors(spec, flat)
    per_step = _window_losses(spec, params, batch)
    per_window = per_step.data.sum(axis=1)
    bad = ~np.isfinite(per_window)
    if bad.any():
        raise NonFiniteLossError([w for w, b in zip(batch.window_ids, bad) if b])
    n = per_window.shape[0]
    per_step.backward(np.full(per_step.shape, 1.0 / n))
    return float(per_window.mean()), flatten_grads(spec, params)


def batch_loss(spec: NetworkSpec, flat: np.ndarray, batch: Batch) -> float:
    params = parameter_tensors(spec, flat, requires_grad=False)
    return float(_window_losses(spec, params, batch).data.sum(axis=1).mean())


# ---------------------------------------------------------------------------
# Optimizer and schedule


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ModelError("parameter, gradient and optimizer state shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grads
    v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class PlateauSchedule:
    """Multiply the rate by ``factor`` after ``patience`` epochs without improvement."""

    lr: float
    factor: float = 0.5
    patience: int = 5
    min_lr: float = 1e-5
    best: float = math.inf
    bad_epochs: int = 0

    def step(self, epoch_loss: float) -> float:
        if epoch_loss < self.best:
            self.best = epoch_loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad_epochs = 0
        return self.lr


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainedModel:
    spec: NetworkSpec
    pipeline: RepresentationPipeline
    parameters: np.ndarray
    train_config: TrainConfig = field(default_factory=TrainConfig)
    log: list = field(default_factory=list)

    def __post_init__(self):
        if self.parameters.size != parameter_count(self.spec):
            raise ModelError(
                f"{self.parameters.size} parameters for a spec with {parameter_count(self.spec)}"
            )

    def with_series(self, ts: TimeSeries) -> "TrainedModel":
        """Same weights, per-series pipeline state (re)fitted on ``ts``."""
        return replace(self, pipeline=self.pipeline.with_series(ts))


def training_arrays(panel: Panel, pipeline: RepresentationPipeline, spec: NetworkSpec) -> list:
    """Per-series arrays for every series long enough to hold one window."""
    need = spec.context_length + spec.horizon
    arrays = [series_arrays(pipeline, spec, ts) for ts in panel if len(ts) >= need]
    if not arrays:
        raise ModelError(f"no series has the {need} observations a training window needs")
    return arrays


def sample_windows(arrays: list, spec: NetworkSpec, n: int, rng: np.random.Generator) -> list:
    """Uniform over series, then uniform over that series' valid window starts."""
    need = spec.context_length + spec.horizon
    out = []
    for _ in range(n):
        i = int(rng.integers(len(arrays)))
        out.append((i, int(rng.integers(len(arrays[i]) - need + 1))))
    return out


def train(panel: Panel, pipeline: RepresentationPipeline, model: ModelConfig | NetworkSpec,
          config: TrainConfig = TrainConfig(), progress=None) -> TrainedModel:
    """Fit network weights; deterministic given ``config.seed``.

    ``progress``, when given, is called with each epoch's log entry.
    """
    spec = model if isinstance(model, NetworkSpec) else build_network_spec(
        pipeline, model, config.context, config.horizon, panel.freq.value)
    init_seq, sample_seq = np.random.SeedSequence(config.seed).spawn(2)
    flat = init_parameters(spec, np.random.default_rng(init_seq))
    rng = np.random.default_rng(sample_seq)
    arrays = training_arrays(panel, pipeline, spec)
    state = AdamState.zeros(flat.size)
    schedule = PlateauSchedule(config.initial_lr, config.lr_decay_factor, config.decay_patience,
                               config.min_lr)
    log = []
    for epoch in range(config.epochs):
        lr = schedule.lr
        losses = []
        for _ in range(config.batches_per_epoch):
            batch = make_batch(spec, arrays, sample_windows(arrays, spec, config.batch_size, rng))
            loss, grads = loss_and_gradients(spec, flat, batch)
            flat, state = adam_step(state, flat, grads, lr)
            losses.append(loss)
        entry = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr}
        log.append(entry)
        schedule.step(entry["loss"])
        if progress is not None:
            progress(entry)
    return TrainedModel(spec, pipeline, flat, config, log)


# ---------------------------------------------------------------------------
# Prediction


def series_rng(seed: int, item_id: str) -> np.random.Generator:
    """Independent stream per ``(seed, item_id)``."""
    return np.random.default_rng([int(seed), zlib.crc32(item_id.encode("utf-8"))])


def _sample_outputs(spec: NetworkSpec, raw: np.ndarray, rng: np.random.Generator):
    """Draw from head outputs ``(..., n_outputs)``: bucket ids or scaled reals."""
    if spec.head == "categorical":
        return sample_categorical(raw, rng)
    mu = raw[..., 0]
    sigma = np.logaddexp(0.0, raw[..., 1])
    nu = np.logaddexp(0.0, raw[..., 2]) + 2.0
    return mu + sigma * rng.standard_t(nu)


def predict(model: TrainedModel, ts: TimeSeries, num_samples: int | None = None,
            rng: np.random.Generator | None = None, horizon: int | None = None,
            covariates=None) -> ForecastDistribution:
    """Sample paths for the ``horizon`` steps after the end of ``ts``."""
    spec, pipeline = model.spec, model.pipeline
    tau = spec.horizon if horizon is None else int(horizon)
    if spec.architecture == "feed-forward" and tau != spec.horizon:
        raise ModelError(f"feed-forward model forecasts exactly {spec.horizon} steps")
    if tau < 1:
        raise ModelError("horizon must be positive")
    s = model.train_config.sample_paths if num_samples is None else int(num_samples)
    if s < 1:
        raise ModelError("need at least one sample path")
    c, t_len = spec.context_length, len(ts)
    if t_len < c:
        raise ModelError(f"series {ts.item_id!r} has {t_len} observations, context needs {c}")
    if rng is None:
        rng = series_rng(model.train_config.seed, ts.item_id)
    arrays = series_arrays(pipeline, spec, ts, extra_steps=tau + 1, covariates=covariates,
                           with_targets=False)
    params = parameter_tensors(spec, model.parameters, requires_grad=False)

    if spec.architecture == "feed-forward":
        inputs = stack_inputs([window_inputs(spec, arrays, t_len - c, c)])
        raw = forward(spec, params, inputs).data[0]
        draws = _sample_outputs(spec, np.broadcast_to(raw, (s, *raw.shape)), rng)
        return ForecastDistribution(pipeline.inverse(ts.item_id, draws), ts.item_id)

    hist = np.broadcast_to(arrays.values[t_len - c:], (s, c, arrays.values.shape[1]))
    scaled = np.broadcast_to(arrays.scaled, (s, t_len)).copy()
    new_vals = np.zeros((s, 0, arrays.values.shape[1]), dtype=arrays.values.dtype)
    scale = pipeline.scale(ts.item_id)
    paths = np.empty((s, tau))
    for k in range(tau):
        pos = np.arange(t_len - c, t_len + k)
        lag_cols = []
        for lag in spec.lags:
            src = pos + 1 - lag
            col = np.zeros((s, len(pos)))
            ok = src >= 0
            col[:, ok] = scaled[:, src[ok]]
            lag_cols.append(col[..., None])
        cov = np.broadcast_to(arrays.covariates[pos + 1], (s, len(pos), spec.n_covariates))
        extras = np.concatenate([cov, *lag_cols], axis=-1)
        inputs = StepInputs(np.concatenate([hist, new_vals], axis=1), extras, np.zeros((s, 0)))
        raw = forward(spec, params, inputs, last=1).data[:, 0]
        values = np.asarray(pipeline.inverse(ts.item_id, _sample_outputs(spec, raw, rng)), float)
        paths[:, k] = values
        enc = encode_values(pipeline, spec, ts.item_id, values)
        new_vals = np.concatenate([new_vals, enc[:, None, :]], axis=1)
        scaled = np.concatenate([scaled, scale.apply(values)[:, None]], axis=1)
    return ForecastDistribution(paths, ts.item_id)


def predict_panel(model: TrainedModel, panel: Panel, num_samples: int | None = None,
                  seed: int | None = None) -> list:
    seed = model.train_config.seed if seed is None else seed
    return [predict(model, ts, num_samples, series_rng(seed, ts.item_id)) for ts in panel]


# ---------------------------------------------------------------------------
# Persistence


def save_model(model: TrainedModel, path) -> Path:
    """Write weights plus the JSON metadata (spec, pipeline, config, log) to one file."""
    meta = {
        "version": MODEL_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "pipeline": model.pipeline.to_dict(),
        "train_config": asdict(model.train_config),
        "log": model.log,
    }
    blob = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, parameters=model.parameters, meta=blob)
    path.write_bytes(buf.getvalue())
    return path


def load_model(path) -> TrainedModel:
    with np.load(Path(path), allow_pickle=False) as data:
        params = np.array(data["parameters"])
        meta = json.loads(data["meta"].tobytes().decode("utf-8"))
    if meta.get("version") != MODEL_FORMAT_VERSION:
        raise ModelError(f"unsupported model file version {meta.get('version')!r}")
    return TrainedModel(
        NetworkSpec.from_dict(meta["spec"]),
        RepresentationPipeline.from_dict(meta["pipeline"]),
        params,
        TrainConfig.from_dict(meta["train_config"]),
        meta["log"],
    )
