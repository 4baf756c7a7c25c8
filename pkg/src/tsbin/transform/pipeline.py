"""Fitted representation pipelines: per-series and global transform state.

Binned representations emit 0-based *tokens* (``bin_index - 1``) so that they
index embedding tables directly; :mod:`tsbin.transform.binning` keeps the
1-based bucket convention.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import Panel, TimeSeries
from .binning import KINDS, BinningSpec, fit_bins
from .scaling import AffineScale, EmpiricalCDF, fit_empirical_cdf, fit_mean_scale

PIPELINE_VERSION = 1


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Representation ids: "ms", "grb(1024)", "lab(64,linear)", "pit(1024)", "hyb(16,128,1024)"


@dataclass(frozen=True)
class ReprSpec:
    mode: str
    bins: int | None = None
    kind: str = "quantile"
    members: tuple["ReprSpec", ...] = ()

    def __str__(self) -> str:
        if self.mode == "ms":
            return "ms"
        if self.mode == "hyb":
            return "hyb(" + ",".join(str(m) for m in self.members) + ")"
        extra = "" if self.kind == "quantile" else f",{self.kind}"
        return f"{self.mode}({self.bins}{extra})"


INPUT_MODES = ("ms", "pit", "grb", "lab", "hyb")
OUTPUT_MODES = ("ms", "grb", "lab")
DEFAULT_BINS = 1024


def _split_args(body: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in body:
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur.strip():
        parts.append(cur.strip())
    return parts


def parse_repr(text: str, role: str = "input") -> ReprSpec:
    """Parse a representation id such as ``grb(1024)`` or ``hyb(grb,lab)``.

    Output ids also accept ``ms-student-t`` and ``st`` as aliases of ``ms``.
    """
    allowed = INPUT_MODES if role == "input" else OUTPUT_MODES
    raw = text.strip().lower()
    if role == "output" and raw in ("ms-student-t", "st", "ms-st"):
        raw = "ms"
    m = re.fullmatch(r"([a-z]+)(?:\((.*)\))?", raw)
    if not m or m.group(1) not in allowed:
        raise PipelineError(
            f"unsupported {role} representation {text!r}; supported: "
            + ", ".join(allowed)
            + (" (ms-student-t alias for output)" if role == "output" else "")
        )
    mode, body = m.group(1), m.group(2)
    if mode == "ms":
        if body:
            raise PipelineError("ms takes no arguments")
        return ReprSpec("ms")
    if mode == "hyb":
        args = _split_args(body or "")
        members = []
        for a in args:
            if re.fullmatch(r"\d+", a):
                members.append(ReprSpec("grb", int(a)))
            else:
                members.append(parse_repr(a, "input"))
        if len(members) < 2:
            raise PipelineError("hyb needs at least two members")
        if any(mem.mode in ("hyb", "ms", "pit") for mem in members):
            raise PipelineError("hyb members must be grb or lab binnings")
        return ReprSpec("hyb", members=tuple(members))
    args = _split_args(body or "")
    bins, kind = DEFAULT_BINS, "quantile"
    for a in args:
        if re.fullmatch(r"(bin)?\d+", a):
            bins = int(a.removeprefix("bin"))
        elif a in KINDS:
            kind = a
        else:
            raise PipelineError(f"bad argument {a!r} in {text!r}")
    if bins < 2:
        raise PipelineError("bin count must be >= 2")
    return ReprSpec(mode, bins, kind)


# ---------------------------------------------------------------------------
# Representations


def _series_items(panel: Panel):
    if len(panel) == 0:
        raise PipelineError("cannot fit a pipeline on an empty panel")
    return [(ts.item_id, ts.values) for ts in panel]


def _lookup(state: dict, item_id: str, what: str):
    try:
        return state[item_id]
    except KeyError:
        raise PipelineError(f"series {item_id!r} has no fitted {what} state") from None


@dataclass(frozen=True)
class MeanScaling:
    scales: dict
    mode: str = field(default="ms", init=False)
    discrete = False

    @classmethod
    def fit(cls, panel: Panel) -> "MeanScaling":
        return cls({k: fit_mean_scale(v) for k, v in _series_items(panel)})

    def encode(self, item_id: str, values) -> np.ndarray:
        return _lookup(self.scales, item_id, "scale").apply(values)

    def decode(self, item_id: str, y) -> np.ndarray:
        return _lookup(self.scales, item_id, "scale").invert(y)

    def stages(self, item_id: str) -> list:
        return [_lookup(self.scales, item_id, "scale")]

    def with_series(self, item_id: str, values) -> "MeanScaling":
        return MeanScaling({**self.scales, item_id: fit_mean_scale(values)})

    def to_dict(self) -> dict:
        return {"mode": "ms", "scales": {k: s.to_dict() for k, s in self.scales.items()}}


@dataclass(frozen=True)
class PitTransform:
    """Per-series empirical CDF; ``parity_bins`` sizes the downstream PIT network."""

    cdfs: dict
    parity_bins: int = DEFAULT_BINS
    mode: str = field(default="pit", init=False)
    discrete = False

    @classmethod
    def fit(cls, panel: Panel, parity_bins: int = DEFAULT_BINS) -> "PitTransform":
        return cls({k: fit_empirical_cdf(v) for k, v in _series_items(panel)}, parity_bins)

    def encode(self, item_id: str, values) -> np.ndarray:
        return np.atleast_1d(_lookup(self.cdfs, item_id, "CDF")(values))

    def stages(self, item_id: str) -> list:
        return [_lookup(self.cdfs, item_id, "CDF")]

    def with_series(self, item_id: str, values) -> "PitTransform":
        return PitTransform({**self.cdfs, item_id: fit_empirical_cdf(values)}, self.parity_bins)

    def to_dict(self) -> dict:
        return {
            "mode": "pit",
            "parity_bins": self.parity_bins,
            "cdfs": {k: c.to_dict() for k, c in self.cdfs.items()},
        }


@dataclass(frozen=True)
class GlobalRelativeBinning:
    """Mean scaling per series, then one binning shared by the whole panel."""

    scales: dict
    spec: BinningSpec
    mode: str = field(default="grb", init=False)
    discrete = True

    @classmethod
    def fit(cls, panel: Panel, n_bins: int, kind: str = "quantile") -> "GlobalRelativeBinning":
        scales = {k: fit_mean_scale(v) for k, v in _series_items(panel)}
        pooled = np.concatenate([scales[ts.item_id].apply(ts.values) for ts in panel])
        return cls(scales, fit_bins(pooled, n_bins, kind))

    @property
    def n_tokens(self) -> int:
        return self.spec.n_bins

    def encode(self, item_id: str, values) -> np.ndarray:
        scaled = _lookup(self.scales, item_id, "scale").apply(values)
        return np.searchsorted(self.spec.edges, scaled, side="right")

    def decode(self, item_id: str, tokens) -> np.ndarray:
        return _lookup(self.scales, item_id, "scale").invert(self.spec.centers[np.asarray(tokens)])

    def stages(self, item_id: str) -> list:
        return [_lookup(self.scales, item_id, "scale"), self.spec]

    def with_series(self, item_id: str, values) -> "GlobalRelativeBinning":
        return GlobalRelativeBinning({**self.scales, item_id: fit_mean_scale(values)}, self.spec)

    def to_dict(self) -> dict:
        return {
            "mode": "grb",
            "scales": {k: s.to_dict() for k, s in self.scales.items()},
            "spec": self.spec.to_dict(),
        }


@dataclass(frozen=True)
class LocalAbsoluteBinning:
    """One binning per series fitted on its raw values; no scaling stage."""

    specs: dict
    n_bins: int
    kind: str = "quantile"
    mode: str = field(default="lab", init=False)
    discrete = True

    @classmethod
    def fit(cls, panel: Panel, n_bins: int, kind: str = "quantile") -> "LocalAbsoluteBinning":
        return cls({k: fit_bins(v, n_bins, kind) for k, v in _series_items(panel)}, n_bins, kind)

    @property
    def n_tokens(self) -> int:
        return self.n_bins

    def encode(self, item_id: str, values) -> np.ndarray:
        spec = _lookup(self.specs, item_id, "binning")
        return np.searchsorted(spec.edges, np.asarray(values, dtype=float), side="right")

    def decode(self, item_id: str, tokens) -> np.ndarray:
        spec = _lookup(self.specs, item_id, "binning")
        # collapsed series have fewer buckets; clamp sampled ids into range
        return spec.centers[np.minimum(np.asarray(tokens), spec.n_bins - 1)]

    def stages(self, item_id: str) -> list:
        return [_lookup(self.specs, item_id, "binning")]

    def with_series(self, item_id: str, values) -> "LocalAbsoluteBinning":
        specs = {**self.specs, item_id: fit_bins(values, self.n_bins, self.kind)}
        return LocalAbsoluteBinning(specs, self.n_bins, self.kind)

    def to_dict(self) -> dict:
        return {
            "mode": "lab",
            "n_bins": self.n_bins,
            "kind": self.kind,
            "specs": {k: s.to_dict() for k, s in self.specs.items()},
        }


@dataclass(frozen=True)
class HybridBinning:
    """Several binnings applied side by side; tokens come back as ``(T, M)``.

    ``output_member`` names the member whose buckets serve as the output
    representation when the hybrid is used on the output side.
    """

    members: tuple
    output_member: int = 0
    mode: str = field(default="hyb", init=False)
    discrete = True

    def __post_init__(self):
        if len(self.members) < 2:
            raise PipelineError("a hybrid needs at least two member binnings")
        if not 0 <= self.output_member < len(self.members):
            raise PipelineError("output_member out of range")

    @property
    def token_counts(self) -> list[int]:
        return [m.n_tokens for m in self.members]

    @property
    def n_tokens(self) -> int:
        return self.members[self.output_member].n_tokens

    def encode(self, item_id: str, values) -> np.ndarray:
        return np.stack([m.encode(item_id, values) for m in self.members], axis=-1)

    def decode(self, item_id: str, tokens) -> np.ndarray:
        return self.members[self.output_member].decode(item_id, tokens)

    def output(self):
        return self.members[self.output_member]

    def stages(self, item_id: str) -> list:
        return self.members[self.output_member].stages(item_id)

    def with_series(self, item_id: str, values) -> "HybridBinning":
        return HybridBinning(tuple(m.with_series(item_id, values) for m in self.members),
                             self.output_member)

    def to_dict(self) -> dict:
        return {
            "mode": "hyb",
            "output_member": self.output_member,
            "members": [m.to_dict() for m in self.members],
        }


def representation_from_dict(d: dict):
    mode = d["mode"]
    if mode == "ms":
        return MeanScaling({k: AffineScale.from_dict(v) for k, v in d["scales"].items()})
    if mode == "pit":
        return PitTransform({k: EmpiricalCDF.from_dict(v) for k, v in d["cdfs"].items()},
                            int(d["parity_bins"]))
    if mode == "grb":
        return GlobalRelativeBinning(
            {k: AffineScale.from_dict(v) for k, v in d["scales"].items()},
            BinningSpec.from_dict(d["spec"]),
        )
    if mode == "lab":
        return LocalAbsoluteBinning(
            {k: BinningSpec.from_dict(v) for k, v in d["specs"].items()},
            int(d["n_bins"]), d["kind"],
        )
    if mode == "hyb":
        return HybridBinning(tuple(representation_from_dict(m) for m in d["members"]),
                             int(d["output_member"]))
    raise PipelineError(f"unknown representation mode {mode!r}")


# ---------------------------------------------------------------------------
# Pipelines


@dataclass(frozen=True)
class RepresentationPipeline:
    """Input representation, output representation and per-series mean scales.

    ``scales`` are kept for every mode: they feed optional lag channels and
    the Student-t head's series scale.
    """

    input: object
    output: object
    scales: dict

    @property
    def mode(self) -> str:
        return self.input.mode

    @property
    def item_ids(self) -> list[str]:
        return list(self.scales)

    def has_series(self, item_id: str) -> bool:
        return item_id in self.scales

    def scale(self, item_id: str) -> AffineScale:
        return _lookup(self.scales, item_id, "scale")

    def transform(self, item_id: str, values) -> np.ndarray:
        return self.input.encode(item_id, values)

    def encode_output(self, item_id: str, values) -> np.ndarray:
        return self.output.encode(item_id, values)

    def inverse(self, item_id: str, y) -> np.ndarray:
        return self.output.decode(item_id, y)

    def with_series(self, ts: TimeSeries) -> "RepresentationPipeline":
        """Fit (or refit) per-series state for ``ts``; global state is kept."""
        return RepresentationPipeline(
            self.input.with_series(ts.item_id, ts.values),
            self.output.with_series(ts.item_id, ts.values),
            {**self.scales, ts.item_id: fit_mean_scale(ts.values)},
        )

    def to_dict(self) -> dict:
        return {
            "version": PIPELINE_VERSION,
            "input": self.input.to_dict(),
            "output": self.output.to_dict(),
            "scales": {k: s.to_dict() for k, s in self.scales.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RepresentationPipeline":
        if d.get("version") != PIPELINE_VERSION:
            raise PipelineError(f"unsupported pipeline document version {d.get('version')!r}")
        return cls(
            representation_from_dict(d["input"]),
            representation_from_dict(d["output"]),
            {k: AffineScale.from_dict(v) for k, v in d["scales"].items()},
        )


def _mean_scales(panel: Panel) -> dict:
    return {k: fit_mean_scale(v) for k, v in _series_items(panel)}


def fit_representation(panel: Panel, spec: ReprSpec):
    if spec.mode == "ms":
        return MeanScaling.fit(panel)
    if spec.mode == "pit":
        return PitTransform.fit(panel, spec.bins or DEFAULT_BINS)
    if spec.mode == "grb":
        return GlobalRelativeBinning.fit(panel, spec.bins, spec.kind)
    if spec.mode == "lab":
        return LocalAbsoluteBinning.fit(panel, spec.bins, spec.kind)
    if spec.mode == "hyb":
        members = tuple(fit_representation(panel, m) for m in spec.members)
        return HybridBinning(members, _finest_grb(members))
    raise PipelineError(f"unknown representation mode {spec.mode!r}")


def _finest_grb(members: Sequence) -> int:
    grb = [i for i, m in enumerate(members) if m.mode == "grb"]
    pool = grb or list(range(len(members)))
    return max(pool, key=lambda i: members[i].n_tokens)


def fit_grb(panel: Panel, n_bins: int, kind: str = "quantile") -> RepresentationPipeline:
    rep = GlobalRelativeBinning.fit(panel, n_bins, kind)
    return RepresentationPipeline(rep, rep, dict(rep.scales))


def fit_lab(panel: Panel, n_bins: int, kind: str = "quantile") -> RepresentationPipeline:
    rep = LocalAbsoluteBinning.fit(panel, n_bins, kind)
    return RepresentationPipeline(rep, rep, _mean_scales(panel))


def fit_hybrid(panel: Panel, members: Sequence, output_member: int | None = None
               ) -> RepresentationPipeline:
    """Hybrid input binning; ``members`` are repr ids or :class:`ReprSpec` objects.

    The output side delegates to ``output_member`` (default: the finest grb
    member).
    """
    if len(members) < 2:
        raise PipelineError("a hybrid needs at least two members")
    specs = [parse_repr(m) if isinstance(m, str) else m for m in members]
    fitted = tuple(fit_representation(panel, s) for s in specs)
    idx = _finest_grb(fitted) if output_member is None else output_member
    hyb = HybridBinning(fitted, idx)
    return RepresentationPipeline(hyb, hyb.output(), _mean_scales(panel))


def build_pipeline(panel: Panel, input_repr, output_repr) -> RepresentationPipeline:
    """Fit input and output representations (ids or specs) on a training panel."""
    in_spec = parse_repr(input_repr, "input") if isinstance(input_repr, str) else input_repr
    out_spec = parse_repr(output_repr, "output") if isinstance(output_repr, str) else output_repr
    inp = fit_representation(panel, in_spec)
    out = inp if out_spec == in_spec else fit_representation(panel, out_spec)
    return RepresentationPipeline(inp, out, _mean_scales(panel))


def log_abs_jacobian(stages: Sequence, z=None) -> tuple[float, bool]:
    """Sum of ``log |d stage / d input|`` over a chain of stages.

    Affine stages contribute ``-log a``; discretizing stages contribute 0 and
    flip the second return value to ``False`` (the chain no longer preserves
    densities). ``z`` is accepted for interface symmetry; affine Jacobians do
    not depend on it.
    """
    if isinstance(stages, RepresentationPipeline):
        raise PipelineError("pass the stage list, e.g. pipeline.output.stages(item_id)")
    total, density = 0.0, True
    for stage in stages:
        if isinstance(stage, AffineScale):
            total += stage.log_abs_det()
        elif isinstance(stage, BinningSpec):
            density = False
        else:
            raise PipelineError(f"no Jacobian for stage {type(stage).__name__}")
    return total, density
