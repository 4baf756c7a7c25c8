"""Panel data model, ingestion, backtest splitting, time features and synthetic panels."""

from __future__ import annotations

import calendar
import enum
import json
import math
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable

import numpy as np


class PanelError(ValueError):
    """Raised for invalid panel files, series or split requests."""


class Freq(str, enum.Enum):
    HOURLY = "H"
    DAILY = "D"
    WEEKLY = "W"
    MONTHLY = "M"
    QUARTERLY = "Q"
    YEARLY = "Y"

    @classmethod
    def parse(cls, value: "str | Freq") -> "Freq":
        if isinstance(value, Freq):
            return value
        key = str(value).strip()
        aliases = {
            "h": cls.HOURLY, "hourly": cls.HOURLY, "1h": cls.HOURLY,
            "d": cls.DAILY, "daily": cls.DAILY, "1d": cls.DAILY,
            "w": cls.WEEKLY, "weekly": cls.WEEKLY,
            "m": cls.MONTHLY, "monthly": cls.MONTHLY,
            "q": cls.QUARTERLY, "quarterly": cls.QUARTERLY,
            "y": cls.YEARLY, "a": cls.YEARLY, "yearly": cls.YEARLY,
        }
        try:
            return aliases[key.lower()]
        except KeyError:
            raise PanelError(f"unknown frequency {value!r}") from None


def _add_months(ts: datetime, months: int) -> datetime:
    idx = ts.month - 1 + months
    year, month = ts.year + idx // 12, idx % 12 + 1
    day = min(ts.day, calendar.monthrange(year, month)[1])
    return ts.replace(year=year, month=month, day=day)


def shift_time(ts: datetime, freq: Freq, steps: int) -> datetime:
    """Timestamp ``steps`` periods after ``ts``."""
    if freq is Freq.HOURLY:
        return ts + timedelta(hours=steps)
    if freq is Freq.DAILY:
        return ts + timedelta(days=steps)
    if freq is Freq.WEEKLY:
        return ts + timedelta(weeks=steps)
    if freq is Freq.MONTHLY:
        return _add_months(ts, steps)
    if freq is Freq.QUARTERLY:
        return _add_months(ts, 3 * steps)
    return _add_months(ts, 12 * steps)


@dataclass(frozen=True)
class TimeSeries:
    item_id: str
    start: datetime
    freq: Freq
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 1:
            raise PanelError(f"series {self.item_id!r}: values must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(values)):
            raise PanelError(f"series {self.item_id!r}: target contains NaN or infinite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "freq", Freq.parse(self.freq))

    def __len__(self) -> int:
        return self.values.size

    def with_values(self, values) -> "TimeSeries":
        return TimeSeries(self.item_id, self.start, self.freq, values)


@dataclass(frozen=True)
class Panel:
    series: tuple[TimeSeries, ...]
    freq: Freq

    def __post_init__(self):
        series = tuple(self.series)
        freq = Freq.parse(self.freq)
        seen = set()
        for ts in series:
            if ts.freq is not freq:
                raise PanelError(
                    f"series {ts.item_id!r} has frequency {ts.freq.value}, panel is {freq.value}"
                )
            if ts.item_id in seen:
                raise PanelError(f"duplicate item_id {ts.item_id!r}")
            seen.add(ts.item_id)
        object.__setattr__(self, "series", series)
        object.__setattr__(self, "freq", freq)

    @classmethod
    def from_series(cls, series: Iterable[TimeSeries]) -> "Panel":
        series = tuple(series)
        if not series:
            raise PanelError("cannot infer the frequency of an empty panel")
        return cls(series, series[0].freq)

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self):
        return iter(self.series)

    def __getitem__(self, item_id: str) -> TimeSeries:
        for ts in self.series:
            if ts.item_id == item_id:
                return ts
        raise KeyError(item_id)

    @property
    def item_ids(self) -> list[str]:
        return [ts.item_id for ts in self.series]

    def lengths(self) -> list[int]:
        return [len(ts) for ts in self.series]

    def pooled(self) -> np.ndarray:
        return np.concatenate([ts.values for ts in self.series])


@dataclass(frozen=True)
class BacktestSplit:
    train: Panel
    test: Panel
    horizon: int

    def targets(self) -> list[np.ndarray]:
        """Held-out suffix of length ``horizon`` for every test series."""
        return [ts.values[-self.horizon:] for ts in self.test]


# ---------------------------------------------------------------------------
# Ingestion


def _parse_start(raw, lineno: int) -> datetime:
    if not isinstance(raw, str):
        raise PanelError(f"line {lineno}: 'start' must be an ISO-8601 string")
    try:
        ts = datetime.fromisoformat(raw.strip().replace(" ", "T"))
    except ValueError:
        raise PanelError(f"line {lineno}: cannot parse start timestamp {raw!r}") from None
    if ts.tzinfo is not None:
        raise PanelError(f"line {lineno}: timestamps must not carry a timezone")
    return ts


def load_panel(path, horizon: int | None = None, freq: "str | Freq" = "H") -> Panel:
    """Read a line-delimited JSON panel file.

    Each line is ``{"start": ..., "target": [...], "item_id": ...}``; an optional
    ``"freq"`` field overrides the ``freq`` argument for that record. Missing
    item_ids are assigned from the record index. When ``horizon`` is given,
    every series must be strictly longer than it.
    """
    path = Path(path)
    default_freq = Freq.parse(freq)
    series: list[TimeSeries] = []
    index = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise PanelError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or "start" not in rec or "target" not in rec:
                raise PanelError(f"line {lineno}: record needs 'start' and 'target' fields")
            target = rec["target"]
            if not isinstance(target, list) or not target:
                raise PanelError(f"line {lineno}: 'target' must be a non-empty array")
            if any(v is None or isinstance(v, (bool, str)) for v in target):
                raise PanelError(f"line {lineno}: target contains missing or non-numeric values")
            values = np.asarray(target, dtype=float)
            if not np.all(np.isfinite(values)):
                raise PanelError(f"line {lineno}: target contains NaN or infinite values")
            item_id = str(rec["item_id"]) if rec.get("item_id") is not None else str(index)
            rec_freq = Freq.parse(rec["freq"]) if "freq" in rec else default_freq
            if series and rec_freq is not series[0].freq:
                raise PanelError(
                    f"line {lineno}: frequency {rec_freq.value} differs from {series[0].freq.value}"
                )
            if horizon is not None and values.size <= horizon:
                raise PanelError(
                    f"line {lineno}: series {item_id!r} has length {values.size} <= horizon {horizon}"
                )
            series.append(TimeSeries(item_id, _parse_start(rec["start"], lineno), rec_freq, values))
            index += 1
    if not series:
        raise PanelError(f"{path}: no records")
    try:
        return Panel.from_series(series)
    except PanelError as exc:
        raise PanelError(f"{path}: {exc}") from None


def panel_records(panel: Panel) -> list[dict]:
    return [
        {
            "start": ts.start.isoformat(timespec="seconds"),
            "target": [float(v) for v in ts.values],
            "item_id": ts.item_id,
            "freq": ts.freq.value,
        }
        for ts in panel
    ]


def write_panel(panel: Panel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in panel_records(panel):
            fh.write(json.dumps(rec) + "\n")
    return path


# ---------------------------------------------------------------------------
# Splitting and features


def split_backtest(panel: Panel, horizon: int) -> BacktestSplit:
    """Hold out the last ``horizon`` steps of every series."""
    if horizon < 1:
        raise PanelError(f"horizon must be >= 1, got {horizon}")
    train = []
    for ts in panel:
        if len(ts) <= horizon:
            raise PanelError(
                f"series {ts.item_id!r} has length {len(ts)}, needs more than horizon {horizon}"
            )
        train.append(ts.with_values(ts.values[:-horizon]))
    return BacktestSplit(Panel(tuple(train), panel.freq), panel, horizon)


def time_feature_names(freq: "str | Freq") -> list[str]:
    return {
        Freq.HOURLY: ["hour_of_day", "day_of_week"],
        Freq.DAILY: ["day_of_week", "day_of_month"],
        Freq.WEEKLY: ["week_of_year"],
        Freq.MONTHLY: ["month_of_year"],
        Freq.QUARTERLY: ["quarter"],
        Freq.YEARLY: ["constant"],
    }[Freq.parse(freq)]


def _feature_row(ts: datetime, freq: Freq) -> tuple[float, ...]:
    if freq is Freq.HOURLY:
        return ts.hour / 23.0, ts.weekday() / 6.0
    if freq is Freq.DAILY:
        return ts.weekday() / 6.0, (ts.day - 1) / 30.0
    if freq is Freq.WEEKLY:
        return ((ts.isocalendar()[1] - 1) / 52.0,)
    if freq is Freq.MONTHLY:
        return ((ts.month - 1) / 11.0,)
    if freq is Freq.QUARTERLY:
        return ((ts.month - 1) // 3 / 3.0,)
    return (0.0,)


def make_time_features(start: datetime, freq: "str | Freq", length: int) -> np.ndarray:
    """Date-dependent covariates in [0, 1], one row per step starting at ``start``.

    Returns a ``(length, D)`` array; ``D`` depends on the frequency (see
    :func:`time_feature_names`).
    """
    if length < 1:
        raise PanelError(f"length must be >= 1, got {length}")
    freq = Freq.parse(freq)
    rows = [_feature_row(shift_time(start, freq, t), freq) for t in range(length)]
    return np.array(rows, dtype=float)


# ---------------------------------------------------------------------------
# Synthetic panels


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters for :func:`synth_panel`.

    ``scale`` is ``"fixed"`` (every series uses ``scale_value``) or
    ``"lognormal"`` (log-scale drawn from N(0, ``scale_sigma``^2)). Noise is
    Gaussian unless ``noise_df`` is set, in which case Student-t draws with
    that many degrees of freedom are used.
    """

    n_series: int = 20
    length: int = 240
    period: int = 24
    noise: float = 0.0
    noise_df: float | None = None
    scale: str = "lognormal"
    scale_sigma: float = 1.0
    scale_value: float = 1.0
    level: float = 1.0
    amplitude: float = 0.5
    random_phase: bool = True
    freq: str = "H"
    start: str = "2020-01-06T00:00:00"

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise PanelError(f"unknown synthetic panel fields: {sorted(unknown)}")
        return cls(**data)


def synth_panel(spec: SynthSpec, seed: int) -> Panel:
    """Seasonal panel with per-series magnitudes ``z_i = s_i * (pattern + noise)``."""
    if spec.n_series <= 0 or spec.length <= 0:
        raise PanelError("n_series and length must be positive")
    if spec.period <= 0:
        raise PanelError("period must be positive")
    rng = np.random.default_rng(seed)
    n, T = spec.n_series, spec.length
    if spec.scale == "fixed":
        scales = np.full(n, float(spec.scale_value))
    elif spec.scale == "lognormal":
        scales = np.exp(rng.normal(0.0, spec.scale_sigma, size=n))
    else:
        raise PanelError(f"unknown scale distribution {spec.scale!r}")
    if spec.random_phase:
        phases = rng.uniform(0.0, 2 * math.pi, size=(n, 2))
    else:
        phases = np.zeros((n, 2))
    t = np.arange(T)
    angle = 2 * math.pi * t / spec.period
    start = datetime.fromisoformat(spec.start)
    freq = Freq.parse(spec.freq)
    series = []
    for i in range(n):
        pattern = (
            spec.level
            + spec.amplitude * np.sin(angle + phases[i, 0])
            + 0.5 * spec.amplitude * np.sin(2 * angle + phases[i, 1])
        )
        if spec.noise > 0:
            if spec.noise_df is not None:
                eps = rng.standard_t(spec.noise_df, size=T)
            else:
                eps = rng.standard_normal(T)
            pattern = pattern + spec.noise * eps
        series.append(TimeSeries(f"item_{i}", start, freq, scales[i] * pattern))
    return Panel(tuple(series), freq)

