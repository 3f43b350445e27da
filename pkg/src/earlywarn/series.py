"""Per-entity minute series: ingestion, cleaning, derived signals and windowing.

Missing values are NaN throughout. A value is never silently zero-filled.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = math.nan


class ConfigurationError(ValueError):
    """Raised when inputs or settings make an operation impossible."""


class CsvFormatError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


class SignalKind(str, enum.Enum):
    HR = "HR"
    SBP = "SBP"
    DBP = "DBP"
    MAP = "MAP"
    CO = "CO"
    PP = "PP"


RAW_SIGNALS = (SignalKind.HR, SignalKind.SBP, SignalKind.DBP, SignalKind.MAP)
DERIVED_SIGNALS = (SignalKind.CO, SignalKind.PP)
ALL_SIGNALS = RAW_SIGNALS + DERIVED_SIGNALS


def _frozen(values: Iterable[float]) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class EntitySeries:
    """One monitored entity. Index ``i`` of every signal is minute ``start_time + i``."""

    entity_id: str
    start_time: int
    signals: Mapping[SignalKind, np.ndarray]

    def __post_init__(self):
        if not self.signals:
            raise ConfigurationError(f"{self.entity_id}: no signals")
        frozen = {SignalKind(k): _frozen(v) for k, v in self.signals.items()}
        lengths = {len(v) for v in frozen.values()}
        if len(lengths) != 1:
            raise ConfigurationError(f"{self.entity_id}: signals differ in length {sorted(lengths)}")
        if lengths.pop() < 1:
            raise ConfigurationError(f"{self.entity_id}: empty series")
        object.__setattr__(self, "signals", MappingProxyType(frozen))

    @property
    def length(self) -> int:
        return len(next(iter(self.signals.values())))

    def __getitem__(self, kind: SignalKind | str) -> np.ndarray:
        return self.signals[SignalKind(kind)]

    def with_signals(self, updates: Mapping[SignalKind, np.ndarray]) -> "EntitySeries":
        merged = dict(self.signals)
        merged.update(updates)
        return EntitySeries(self.entity_id, self.start_time, merged)


def filter_outliers(series: EntitySeries, lo: float = 10.0, hi: float = 200.0) -> tuple[EntitySeries, int]:
    """Mark raw readings outside the closed interval ``[lo, hi]`` as missing.

    Derived signals are left untouched (cardiac output routinely exceeds ``hi``).
    Returns the cleaned series and the number of readings removed.
    """
    if not lo < hi:
        raise ConfigurationError(f"lo={lo} must be below hi={hi}")
    updates = {}
    removed = 0
    for kind, values in series.signals.items():
        if kind not in RAW_SIGNALS:
            continue
        bad = (values < lo) | (values > hi)
        removed += int(bad.sum())
        updates[kind] = np.where(bad, MISSING, values)
    return series.with_signals(updates), removed


def derive_signals(series: EntitySeries) -> EntitySeries:
    """Add pulse pressure ``SBP - DBP`` and cardiac output surrogate ``HR * PP``."""
    needed = (SignalKind.HR, SignalKind.SBP, SignalKind.DBP)
    absent = [k.value for k in needed if k not in series.signals]
    if absent:
        raise ConfigurationError(f"{series.entity_id}: cannot derive CO/PP without {absent}")
    pp = series[SignalKind.SBP] - series[SignalKind.DBP]
    co = series[SignalKind.HR] * pp
    return series.with_signals({SignalKind.PP: pp, SignalKind.CO: co})


@dataclass(frozen=True)
class WindowConfig:
    ow_minutes: int = 60
    ww_minutes: int = 60
    tw_minutes: int = 30
    train_stride_minutes: int | None = None
    eval_stride_minutes: int = 1

    def __post_init__(self):
        if self.train_stride_minutes is None:
            object.__setattr__(self, "train_stride_minutes", self.tw_minutes)
        if self.ow_minutes < 1 or self.tw_minutes < 1 or self.ww_minutes < 0:
            raise ConfigurationError(f"invalid window sizes in {self}")
        if self.train_stride_minutes < 1 or self.eval_stride_minutes < 1:
            raise ConfigurationError("strides must be >= 1")

    @property
    def span(self) -> int:
        return self.ow_minutes + self.ww_minutes + self.tw_minutes

    @property
    def tw_offset(self) -> int:
        return self.ow_minutes + self.ww_minutes


@dataclass(frozen=True)
class SubSequence:
    entity_id: str
    t_start: int
    ow_slice: slice
    tw_slice: slice
    features: np.ndarray | None = field(default=None, compare=False)
    labels: object | None = None

    @property
    def offset(self) -> int:
        """Index of the OW start inside the parent series."""
        return self.ow_slice.start

    @property
    def alarm_minute(self) -> int:
        """Minute at which the OW is complete and a prediction can be issued."""
        return self.t_start + (self.ow_slice.stop - self.ow_slice.start)


def window_offsets(length: int, cfg: WindowConfig, stride: int) -> np.ndarray:
    """Indices at which a full OW+WW+TW span fits, stepping by ``stride``."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    last = length - cfg.span
    if last < 0:
        return np.empty(0, dtype=np.int64)
    return np.arange(0, last + 1, stride, dtype=np.int64)


def make_subsequences(series: EntitySeries, cfg: WindowConfig, stride: int) -> list[SubSequence]:
    out = []
    for off in window_offsets(series.length, cfg, stride):
        off = int(off)
        tw0 = off + cfg.tw_offset
        out.append(
            SubSequence(
                entity_id=series.entity_id,
                t_start=series.start_time + off,
                ow_slice=slice(off, off + cfg.ow_minutes),
                tw_slice=slice(tw0, tw0 + cfg.tw_minutes),
            )
        )
    return out


def prepare(series: EntitySeries, lo: float = 10.0, hi: float = 200.0) -> EntitySeries:
    """Filter raw outliers, then derive CO and PP."""
    cleaned, _ = filter_outliers(series, lo, hi)
    return derive_signals(cleaned)


# --- CSV ------------------------------------------------------------------

CSV_COLUMNS = ("entity_id", "minute", "hr", "sbp", "dbp", "map")
_CSV_SIGNALS = (SignalKind.HR, SignalKind.SBP, SignalKind.DBP, SignalKind.MAP)


def _parse_value(text: str, row: int, column: str) -> float:
    text = text.strip()
    if text == "":
        return MISSING
    try:
        value = float(text)
    except ValueError:
        raise CsvFormatError(row, f"column {column!r}: not a number: {text!r}") from None
    if not math.isfinite(value):
        raise CsvFormatError(row, f"column {column!r}: non-finite value {text!r}")
    return value


def read_series_csv(path: str | Path) -> list[EntitySeries]:
    """Read ``entity_id,minute,hr,sbp,dbp,map`` rows (header required).

    Rows of one entity must be consecutive and their minutes contiguous.
    Row numbers in errors are 1-based file lines (the header is line 1).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(1, "empty file") from None
        if tuple(h.strip().lower() for h in header) != CSV_COLUMNS:
            raise CsvFormatError(1, f"expected header {','.join(CSV_COLUMNS)}, got {','.join(header)}")

        entities: list[EntitySeries] = []
        seen: set[str] = set()
        current: str | None = None
        start = prev = 0
        columns: list[list[float]] = []

        def flush():
            if current is not None:
                entities.append(
                    EntitySeries(current, start, {k: col for k, col in zip(_CSV_SIGNALS, columns)})
                )

        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(CSV_COLUMNS):
                raise CsvFormatError(lineno, f"expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            eid = rec[0].strip()
            if not eid:
                raise CsvFormatError(lineno, "empty entity_id")
            try:
                minute = int(rec[1])
            except ValueError:
                raise CsvFormatError(lineno, f"minute is not an integer: {rec[1]!r}") from None
            values = [_parse_value(v, lineno, c) for v, c in zip(rec[2:], CSV_COLUMNS[2:])]
            if eid != current:
                if eid in seen:
                    raise CsvFormatError(lineno, f"entity {eid!r} rows are not consecutive")
                flush()
                seen.add(eid)
                current, start, prev = eid, minute, minute
                columns = [[v] for v in values]
                continue
            if minute != prev + 1:
                raise CsvFormatError(lineno, f"entity {eid!r}: minute {minute} follows {prev} (gap or disorder)")
            prev = minute
            for col, v in zip(columns, values):
                col.append(v)
        flush()
    return entities


def _fmt(value: float) -> str:
    return "" if math.isnan(value) else repr(float(value))


def write_series_csv(path: str | Path, entities: Sequence[EntitySeries]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in entities:
            cols = [s[k] for k in _CSV_SIGNALS]
            for i in range(s.length):
                w.writerow([s.entity_id, s.start_time + i, *(_fmt(c[i]) for c in cols)])
