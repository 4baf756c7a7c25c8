"""Network specifications, parameter layout, input assembly and forward passes."""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import make_time_features, time_feature_names
from ..transform.pipeline import RepresentationPipeline
from .autograd import (
    Tensor,
    as_tensor,
    concat,
    matmul,
    parameter,
    relu,
    shift,
    sigmoid,
    softplus,
    take,
    tanh,
)

ARCHITECTURES = ("feed-forward", "dilated-cnn")
HEADS = ("categorical", "student-t")
EMBEDDING_INIT = 0.05


class ModelError(ValueError):
    pass


def embedding_dim(n_tokens: int) -> int:
    """Smallest integer ``E`` with ``E**4 >= n_tokens``."""
    if n_tokens < 1:
        raise ModelError("embedding table needs at least one row")
    e = max(1, int(round(n_tokens ** 0.25)))
    while e ** 4 < n_tokens:
        e += 1
    while e > 1 and (e - 1) ** 4 >= n_tokens:
        e -= 1
    return e


def receptive_field(n_layers: int, kernel: int = 2) -> int:
    return 1 + (kernel - 1) * (2 ** n_layers - 1)


def layers_for_context(context_length: int) -> int:
    n = 1
    while receptive_field(n) < context_length:
        n += 1
    return n


@dataclass(frozen=True)
class ModelConfig:
    """User-facing architecture choices; dimensions are derived from the pipeline."""

    architecture: str = "feed-forward"
    hidden: tuple = (40, 40)
    channels: int = 16
    n_layers: int | None = None
    covariates: bool | None = None  # None: off for feed-forward, on for dilated-cnn
    lags: tuple = ()
    embedding_dim: int | None = None
    pit_hidden: int = 16

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "lags", tuple(int(k) for k in self.lags))
        if any(h < 1 for h in self.hidden) or self.channels < 1 or self.pit_hidden < 1:
            raise ModelError("layer sizes must be positive")
        if any(k < 1 for k in self.lags):
            raise ModelError("lag offsets must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True)
class NetworkSpec:
    architecture: str
    head: str
    n_outputs: int  # buckets for categorical, 3 for student-t
    context_length: int
    horizon: int
    input_mode: str
    token_counts: tuple = ()
    embedding_dims: tuple = ()
    pit_hidden: int = 16
    pit_out: int = 0
    freq: str = "H"
    n_covariates: int = 0
    lags: tuple = ()
    hidden: tuple = (40, 40)
    channels: int = 16
    n_layers: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.head not in HEADS:
            raise ModelError(f"unknown head {self.head!r}")
        if self.context_length < 1 or self.horizon < 1:
            raise ModelError("context length and horizon must be positive")
        for name in ("token_counts", "embedding_dims", "lags", "hidden"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if len(self.token_counts) != len(self.embedding_dims):
            raise ModelError("one embedding width per token table")
        if self.architecture == "dilated-cnn" and self.n_layers < 1:
            raise ModelError("dilated-cnn needs at least one layer")

    @property
    def discrete_input(self) -> bool:
        return bool(self.token_counts)

    @property
    def value_width(self) -> int:
        if self.discrete_input:
            return sum(self.embedding_dims)
        return self.pit_out if self.input_mode == "pit" else 1

    @property
    def feature_width(self) -> int:
        return self.value_width + self.n_covariates + len(self.lags)

    @property
    def dilations(self) -> tuple:
        return tuple(2 ** k for k in range(self.n_layers))

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.n_layers)

    def ff_input_width(self) -> int:
        return self.context_length * self.feature_width + self.horizon * self.n_covariates

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


def _nominal_bins(rep) -> int:
    """Requested bucket count; embedding widths follow it even if buckets collapsed."""
    if rep.mode == "lab":
        return rep.n_bins
    return rep.spec.requested_bins or rep.spec.n_bins


def build_network_spec(pipeline: RepresentationPipeline, config: ModelConfig,
                       context_length: int, horizon: int, freq: str = "H") -> NetworkSpec:
    inp, out = pipeline.input, pipeline.output
    if out.mode == "ms":
        head, n_outputs = "student-t", 3
    else:
        head, n_outputs = "categorical", out.n_tokens
    members = inp.members if inp.mode == "hyb" else (inp,) if inp.discrete else ()
    counts = tuple(m.n_tokens for m in members)
    dims = tuple(config.embedding_dim or embedding_dim(_nominal_bins(m)) for m in members)
    pit_out = 0
    if inp.mode == "pit":
        pit_out = config.embedding_dim or embedding_dim(inp.parity_bins)
    use_cov = config.covariates
    if use_cov is None:
        use_cov = config.architecture == "dilated-cnn"
    n_layers = 0
    if config.architecture == "dilated-cnn":
        n_layers = config.n_layers or layers_for_context(context_length)
    return NetworkSpec(
        architecture=config.architecture,
        head=head,
        n_outputs=n_outputs,
        context_length=context_length,
        horizon=horizon,
        input_mode=inp.mode,
        token_counts=counts,
        embedding_dims=dims,
        pit_hidden=config.pit_hidden,
        pit_out=pit_out,
        freq=str(freq),
        n_covariates=len(time_feature_names(freq)) if use_cov else 0,
        lags=config.lags,
        hidden=config.hidden,
        channels=config.channels,
        n_layers=n_layers,
    )


# ---------------------------------------------------------------------------
# Parameters


def parameter_shapes(spec: NetworkSpec) -> dict:
    """Ordered ``name -> shape`` map; the flat parameter vector follows this order."""
    shapes = {}
    for k, (v, e) in enumerate(zip(spec.token_counts, spec.embedding_dims)):
        shapes[f"emb{k}"] = (v, e)
    if spec.input_mode == "pit":
        shapes["pit_w1"] = (1, spec.pit_hidden)
        shapes["pit_b1"] = (spec.pit_hidden,)
        shapes["pit_w2"] = (spec.pit_hidden, spec.pit_out)
        shapes["pit_b2"] = (spec.pit_out,)
    p = spec.n_outputs
    if spec.architecture == "feed-forward":
        width = spec.ff_input_width()
        for k, h in enumerate(spec.hidden):
            shapes[f"ff_w{k}"] = (width, h)
            shapes[f"ff_b{k}"] = (h,)
            width = h
        shapes["out_w"] = (width, spec.horizon * p)
        shapes["out_b"] = (spec.horizon * p,)
    else:
        c = spec.channels
        shapes["in_w"] = (spec.feature_width, c)
        shapes["in_b"] = (c,)
        for k in range(spec.n_layers):
            shapes[f"l{k}_w_prev"] = (c, 2 * c)
            shapes[f"l{k}_w_cur"] = (c, 2 * c)
            shapes[f"l{k}_b"] = (2 * c,)
            if k < spec.n_layers - 1:  # the last layer only feeds the skip path
                shapes[f"l{k}_res_w"] = (c, c)
                shapes[f"l{k}_res_b"] = (c,)
            shapes[f"l{k}_skip_w"] = (c, c)
            shapes[f"l{k}_skip_b"] = (c,)
        shapes["out_w"] = (c, p)
        shapes["out_b"] = (p,)
    return shapes


def parameter_count(spec: NetworkSpec) -> int:
    return sum(math.prod(s) for s in parameter_shapes(spec).values())


def _fan_in(name: str, shapes: dict) -> int:
    conv = re.fullmatch(r"(l\d+)_(w_prev|w_cur|b)", name)
    if conv:
        return 2 * shapes[conv.group(1) + "_w_cur"][0]  # both conv taps
    return shapes[re.sub(r"_b(\d*)$", r"_w\1", name)][0]


def init_parameters(spec: NetworkSpec, rng: np.random.Generator) -> np.ndarray:
    """Flat parameter vector: embeddings ~ U(+-0.05), the rest ~ U(+-1/sqrt(fan_in))."""
    shapes = parameter_shapes(spec)
    chunks = []
    for name, shape in shapes.items():
        if name.startswith("emb"):
            bound = EMBEDDING_INIT
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shapes))
        chunks.append(rng.uniform(-bound, bound, size=math.prod(shape)))
    return np.concatenate(chunks)


def unflatten(spec: NetworkSpec, flat: np.ndarray) -> dict:
    """Named views into ``flat`` (no copies)."""
    views, offset = {}, 0
    for name, shape in parameter_shapes(spec).items():
        n = math.prod(shape)
        views[name] = flat[offset:offset + n].reshape(shape)
        offset += n
    if offset != flat.size:
        raise ModelError(f"parameter vector has {flat.size} entries, spec needs {offset}")
    return views


def flatten_grads(spec: NetworkSpec, tensors: dict) -> np.ndarray:
    parts = []
    for name, shape in parameter_shapes(spec).items():
        g = tensors[name].grad
        parts.append(np.zeros(math.prod(shape)) if g is None else g.ravel())
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# Inputs


@dataclass
class SeriesArrays:
    """Everything the network reads from one series, precomputed over its whole span.

    ``values`` holds token ids ``(T, M)`` for binned inputs or reals ``(T, 1)``;
    ``scaled`` is the mean-scaled series (lag channels); ``covariates`` may run
    past ``T`` so future rows are available at prediction time.
    """

    item_id: str
    values: np.ndarray
    scaled: np.ndarray
    covariates: np.ndarray
    targets: np.ndarray | None = None
    series_scale: float = 1.0
    raw: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.values.shape[0]


def encode_values(pipeline: RepresentationPipeline, spec: NetworkSpec, item_id: str,
                  values) -> np.ndarray:
    enc = np.asarray(pipeline.transform(item_id, values))
    if spec.discrete_input:
        enc = enc.astype(np.int64)
        return enc[:, None] if enc.ndim == 1 else enc
    return enc.astype(float).reshape(-1, 1)


def series_arrays(pipeline: RepresentationPipeline, spec: NetworkSpec, ts,
                  extra_steps: int = 0, covariates=None, with_targets: bool = True
                  ) -> SeriesArrays:
    """Precompute network inputs for ``ts``; errors if the pipeline has not seen it."""
    if not pipeline.has_series(ts.item_id):
        raise ModelError(f"series {ts.item_id!r} is not fitted in the pipeline")
    n = len(ts) + extra_steps
    if covariates is None:
        if spec.n_covariates:
            covariates = make_time_features(ts.start, spec.freq, n)
        else:
            covariates = np.zeros((n, 0))
    covariates = np.asarray(covariates, dtype=float)
    if covariates.ndim != 2 or covariates.shape[1] != spec.n_covariates:
        raise ModelError(f"covariates must be (T, {spec.n_covariates})")
    if covariates.shape[0] < n:
        raise ModelError(
            f"covariates cover {covariates.shape[0]} steps, {n} needed for series {ts.item_id!r}"
        )
    scale = pipeline.scale(ts.item_id)
    targets = None
    if with_targets:
        targets = (np.asarray(pipeline.encode_output(ts.item_id, ts.values), dtype=np.int64)
                   if spec.head == "categorical" else np.asarray(ts.values, dtype=float))
    return SeriesArrays(
        item_id=ts.item_id,
        values=encode_values(pipeline, spec, ts.item_id, ts.values),
        scaled=scale.apply(ts.values),
        covariates=covariates,
        targets=targets,
        series_scale=scale.a,
        raw=np.asarray(ts.values, dtype=float),
    )


@dataclass
class StepInputs:
    """Batch of per-step raw inputs prior to embedding.

    ``values``: ``(N, n, M)`` int tokens or ``(N, n, 1)`` reals; ``extras``:
    ``(N, n, D + L)`` covariate and lag channels; ``future``: ``(N, tau * D)``
    future covariates for the feed-forward net.
    """

    values: np.ndarray
    extras: np.ndarray
    future: np.ndarray


def _lag_rows(scaled: np.ndarray, positions: np.ndarray, lags: tuple) -> np.ndarray:
    out = np.zeros((len(positions), len(lags)))
    for j, lag in enumerate(lags):
        src = positions - lag
        ok = src >= 0
        out[ok, j] = scaled[src[ok]]
    return out


def window_inputs(spec: NetworkSpec, arrays: SeriesArrays, start: int, n_steps: int):
    """Raw inputs for steps ``start .. start + n_steps - 1`` of one series.

    Step ``t`` carries the encoded value at ``t``. For the feed-forward net the
    extra channels describe step ``t`` as well; for the dilated CNN they
    describe ``t + 1``, the step being predicted.
    """
    pos = np.arange(start, start + n_steps)
    ahead = 1 if spec.architecture == "dilated-cnn" else 0
    extras = np.concatenate(
        [arrays.covariates[pos + ahead], _lag_rows(arrays.scaled, pos + ahead, spec.lags)], axis=1
    )
    future = np.zeros(0)
    if spec.architecture == "feed-forward":
        fpos = np.arange(start + n_steps, start + n_steps + spec.horizon)
        future = arrays.covariates[fpos].ravel()
    return arrays.values[pos], extras, future


def stack_inputs(rows) -> StepInputs:
    values, extras, future = zip(*rows)
    return StepInputs(np.stack(values), np.stack(extras), np.stack(future))


def assemble_input(pipeline: RepresentationPipeline, spec: NetworkSpec, ts, start: int = 0,
                   n_steps: int | None = None, covariates=None) -> StepInputs:
    """Raw per-step inputs for one window of ``ts`` (batch of one)."""
    extra = spec.horizon + 1
    arrays = series_arrays(pipeline, spec, ts, extra_steps=extra, covariates=covariates,
                           with_targets=False)
    if n_steps is None:
        n_steps = len(ts) - start
    return stack_inputs([window_inputs(spec, arrays, start, n_steps)])


# ---------------------------------------------------------------------------
# Forward


def parameter_tensors(spec: NetworkSpec, flat: np.ndarray, requires_grad: bool = True) -> dict:
    views = unflatten(spec, flat)
    if requires_grad:
        return {k: parameter(v) for k, v in views.items()}
    return {k: Tensor(v) for k, v in views.items()}


def embed(spec: NetworkSpec, params: dict, inputs: StepInputs) -> Tensor:
    """Per-step feature tensor ``(N, n, feature_width)``."""
    if spec.discrete_input:
        tokens = inputs.values
        if tokens.shape[-1] != len(spec.token_counts):
            raise ModelError(f"expected {len(spec.token_counts)} token columns, got {tokens.shape[-1]}")
        parts = [take(params[f"emb{k}"], tokens[..., k]) for k in range(len(spec.token_counts))]
    elif spec.input_mode == "pit":
        u = as_tensor(inputs.values)
        h = tanh(matmul(u, params["pit_w1"]) + params["pit_b1"])
        parts = [matmul(h, params["pit_w2"]) + params["pit_b2"]]
    else:
        parts = [as_tensor(inputs.values)]
    if inputs.extras.shape[-1]:
        parts.append(as_tensor(inputs.extras))
    feats = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    if feats.shape[-1] != spec.feature_width:
        raise ModelError(f"feature width {feats.shape[-1]} != spec width {spec.feature_width}")
    return feats


def _feed_forward(spec: NetworkSpec, params: dict, feats: Tensor, inputs: StepInputs) -> Tensor:
    n = feats.shape[0]
    if feats.shape[1] != spec.context_length:
        raise ModelError(f"feed-forward expects {spec.context_length} context steps, got {feats.shape[1]}")
    x = feats.reshape(n, -1)
    if spec.n_covariates:
        x = concat([x, as_tensor(inputs.future.reshape(n, -1))], axis=-1)
    for k in range(len(spec.hidden)):
        x = relu(matmul(x, params[f"ff_w{k}"]) + params[f"ff_b{k}"])
    out = matmul(x, params["out_w"]) + params["out_b"]
    return out.reshape(n, spec.horizon, spec.n_outputs)


def _dilated_cnn(spec: NetworkSpec, params: dict, feats: Tensor, last: int | None) -> Tensor:
    x = matmul(feats, params["in_w"]) + params["in_b"]
    c = spec.channels
    skip = None
    for k, d in enumerate(spec.dilations):
        z = matmul(shift(x, d), params[f"l{k}_w_prev"]) + matmul(x, params[f"l{k}_w_cur"])
        z = z + params[f"l{k}_b"]
        g = tanh(z[..., :c]) * sigmoid(z[..., c:])
        s = matmul(g, params[f"l{k}_skip_w"]) + params[f"l{k}_skip_b"]
        skip = s if skip is None else skip + s
        if k < spec.n_layers - 1:
            x = x + matmul(g, params[f"l{k}_res_w"]) + params[f"l{k}_res_b"]
    h = relu(skip)
    if last is not None:
        h = h[:, h.shape[1] - last:, :]
    return matmul(h, params["out_w"]) + params["out_b"]


def forward(spec: NetworkSpec, params: dict, inputs: StepInputs, last: int | None = None) -> Tensor:
    """Raw head outputs ``(N, steps, n_outputs)``.

    Feed-forward: one row per horizon step. Dilated CNN: one row per input
    step (row ``t`` parametrizes step ``t + 1``), restricted to the final
    ``last`` rows when given.
    """
    feats = embed(spec, params, inputs)
    if spec.architecture == "feed-forward":
        return _feed_forward(spec, params, feats, inputs)
    return _dilated_cnn(spec, params, feats, last)


def studentt_params(raw: Tensor):
    """Map raw outputs to ``(mu, sigma, nu)`` with ``sigma > 0`` and ``nu > 2``."""
    return raw[..., 0], softplus(raw[..., 1]), softplus(raw[..., 2]) + 2.0
