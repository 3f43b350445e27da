"""Threshold-proportion event definitions and the three label streams.

An event holds on a window when at least ``fraction`` of its present values
sit on the event side of ``level``. The comparison is exact: ``count / present
>= fraction`` is evaluated as ``count * den >= present * num``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

import numpy as np

from .series import ConfigurationError, EntitySeries, SignalKind, SubSequence, WindowConfig

# a target window with more than this share of missing values is not labeled
MAX_MISSING_SHARE = Fraction(1, 10)


class LabelingError(ValueError):
    """A window cannot be labeled; ``reason`` is a short machine-readable code."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


class Comparator(str, enum.Enum):
    BELOW = "BELOW"
    ABOVE = "ABOVE"

    def holds(self, values: np.ndarray, level: float) -> np.ndarray:
        return values < level if self is Comparator.BELOW else values > level


@dataclass(frozen=True)
class EventSpec:
    signal: SignalKind
    comparator: Comparator
    level: float
    fraction: Fraction
    window_minutes: int = 30

    def __post_init__(self):
        object.__setattr__(self, "signal", SignalKind(self.signal))
        object.__setattr__(self, "comparator", Comparator(self.comparator))
        object.__setattr__(self, "fraction", Fraction(self.fraction))
        if not 0 < self.fraction <= 1:
            raise ConfigurationError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.window_minutes < 1:
            raise ConfigurationError("window_minutes must be positive")
        if not 0 < self.level < 10_000:
            raise ConfigurationError(f"implausible event level {self.level}")

    @classmethod
    def from_config(cls, cfg: Mapping) -> "EventSpec":
        keys = {"signal", "comparator", "level", "fraction_pct", "window_minutes"}
        unknown = set(cfg) - keys
        if unknown:
            raise ConfigurationError(f"unknown event spec keys: {sorted(unknown)}")
        return cls(
            signal=SignalKind(str(cfg["signal"]).upper()),
            comparator=Comparator(str(cfg["comparator"]).upper()),
            level=float(cfg["level"]),
            fraction=Fraction(str(cfg["fraction_pct"])) / 100,
            window_minutes=int(cfg.get("window_minutes", 30)),
        )

    def to_config(self) -> dict:
        pct = self.fraction * 100
        return {
            "signal": self.signal.value,
            "comparator": self.comparator.value,
            "level": self.level,
            "fraction_pct": int(pct) if pct.denominator == 1 else float(pct),
            "window_minutes": self.window_minutes,
        }

    def describe(self) -> str:
        pct = float(self.fraction * 100)
        return f"{pct:g}% of {self.signal.value} {self.comparator.value.lower()} {self.level:g} over {self.window_minutes} min"


_SPEC_RE = re.compile(
    r"^\s*(?P<pct>\d+(?:\.\d+)?)\s*%\s*(?:of\s+)?(?P<signal>[A-Za-z]+\s+)?(?P<cmp>below|above)\s+(?P<level>\d+(?:\.\d+)?)"
    r"(?:\s+(?:over|in)\s+(?P<win>\d+)\s*(?:min|minutes)?)?\s*$",
    re.IGNORECASE,
)


def parse_event_spec(text: str, signal: SignalKind | str = SignalKind.MAP, window_minutes: int = 30) -> EventSpec:
    """Parse short forms such as ``"45% below 60"`` or ``"90% of HR above 100 over 30 min"``."""
    m = _SPEC_RE.match(text)
    if not m:
        raise ConfigurationError(f"cannot parse event spec {text!r}")
    sig = m.group("signal")
    return EventSpec(
        signal=SignalKind(sig.strip().upper()) if sig else SignalKind(signal),
        comparator=Comparator(m.group("cmp").upper()),
        level=float(m.group("level")),
        fraction=Fraction(m.group("pct")) / 100,
        window_minutes=int(m.group("win") or window_minutes),
    )


@dataclass(frozen=True)
class LayeredEventSpec:
    """A main event and a relaxed pre-conditional event that it always implies."""

    main: EventSpec
    pre: EventSpec

    def __post_init__(self):
        m, p = self.main, self.pre
        if (m.signal, m.comparator, m.window_minutes) != (p.signal, p.comparator, p.window_minutes):
            raise ConfigurationError("pre-conditional event must share signal, comparator and window with the main event")
        if p.fraction > m.fraction:
            raise ConfigurationError(f"pre-conditional fraction {p.fraction} exceeds main fraction {m.fraction}")
        weaker = p.level >= m.level if m.comparator is Comparator.BELOW else p.level <= m.level
        if not weaker:
            raise ConfigurationError(f"pre-conditional level {p.level} is stricter than main level {m.level}")

    @classmethod
    def relaxed(cls, main: EventSpec, fraction: Fraction = Fraction(45, 100), level: float | None = None):
        pre = EventSpec(main.signal, main.comparator, main.level if level is None else level, fraction, main.window_minutes)
        return cls(main, pre)


@dataclass(frozen=True)
class LabelTriple:
    y: int
    y_s: int
    y_f: int | None

    def __post_init__(self):
        if self.y and not self.y_s:
            raise ValueError("y = 1 requires y_s = 1")
        if self.y_s and self.y_f != self.y:
            raise ValueError("y_f must equal y when y_s = 1")
        if not self.y_s and self.y_f is not None:
            raise ValueError("y_f is undefined when y_s = 0")


def _check_missing(n_missing: int, n: int) -> None:
    if n_missing == n:
        raise LabelingError("all_missing", "window has no present values")
    if Fraction(n_missing, n) > MAX_MISSING_SHARE:
        raise LabelingError("tw_missing", f"{n_missing}/{n} values missing in target window")


def window_is_event(window_values, spec: EventSpec) -> bool:
    values = np.asarray(window_values, dtype=np.float64)
    present = values[~np.isnan(values)]
    if present.size == 0:
        raise LabelingError("all_missing", "window has no present values")
    count = int(spec.comparator.holds(present, spec.level).sum())
    return count * spec.fraction.denominator >= present.size * spec.fraction.numerator


def label_subsequence(series: EntitySeries, ss: SubSequence, spec: LayeredEventSpec) -> LabelTriple:
    values = series[spec.main.signal][ss.tw_slice]
    if values.size != spec.main.window_minutes:
        raise LabelingError("tw_length", f"target window has {values.size} values, spec needs {spec.main.window_minutes}")
    _check_missing(int(np.isnan(values).sum()), values.size)
    y = int(window_is_event(values, spec.main))
    y_s = int(window_is_event(values, spec.pre))
    return LabelTriple(y, y_s, y if y_s else None)


def _window_counts(values: np.ndarray, spec: EventSpec) -> tuple[np.ndarray, np.ndarray]:
    """Satisfying and present counts for every full window start (cumulative sums)."""
    w = spec.window_minutes
    present = ~np.isnan(values)
    sat = present & spec.comparator.holds(np.where(present, values, 0.0), spec.level)
    cp = np.concatenate(([0], np.cumsum(present, dtype=np.int64)))
    cs = np.concatenate(([0], np.cumsum(sat, dtype=np.int64)))
    return cs[w:] - cs[:-w], cp[w:] - cp[:-w]


def window_event_flags(values: np.ndarray, spec: EventSpec) -> tuple[np.ndarray, np.ndarray]:
    """For every window start ``t`` in ``0..len-W``: (is_event, labelable).

    A window is labelable when its missing share is within the guard.
    Unlabelable windows are never events.
    """
    values = np.asarray(values, dtype=np.float64)
    w = spec.window_minutes
    if values.size < w:
        return np.zeros(0, bool), np.zeros(0, bool)
    sat, present = _window_counts(values, spec)
    missing = w - present
    guard = MAX_MISSING_SHARE
    ok = (present > 0) & (missing * guard.denominator <= w * guard.numerator)
    frac = spec.fraction
    event = ok & (sat * frac.denominator >= present * frac.numerator)
    return event, ok


def label_offsets(
    series: EntitySeries, offsets: np.ndarray, cfg: WindowConfig, spec: LayeredEventSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized labels for sub-sequences starting at ``offsets``.

    Returns ``(y, y_s, valid)``; rows with ``valid == False`` must be dropped.
    """
    if cfg.tw_minutes != spec.main.window_minutes:
        raise ConfigurationError("target window length differs from the event window length")
    values = series[spec.main.signal]
    main_ev, ok = window_event_flags(values, spec.main)
    pre_ev, _ = window_event_flags(values, spec.pre)
    idx = np.asarray(offsets, dtype=np.int64) + cfg.tw_offset
    return main_ev[idx].astype(np.int8), pre_ev[idx].astype(np.int8), ok[idx]


@dataclass(frozen=True)
class Episode:
    onset: int
    end: int  # exclusive; end of the last qualifying window of the run


def extract_episodes(series: EntitySeries, spec: EventSpec) -> list[Episode]:
    """Maximal runs of consecutive qualifying window starts, in absolute minutes."""
    event, _ = window_event_flags(series[spec.signal], spec)
    if not event.any():
        return []
    padded = np.concatenate(([False], event, [False])).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)  # one past the last qualifying start
    t0 = series.start_time
    return [Episode(t0 + int(a), t0 + int(b) - 1 + spec.window_minutes) for a, b in zip(starts, stops)]


def extract_event_onsets(series: EntitySeries, spec: EventSpec) -> list[int]:
    return [ep.onset for ep in extract_episodes(series, spec)]
