"""Seeded synthetic vital-sign corpora with planted, learnable episodes.

Each entity carries AR(1) fluctuations around per-signal baselines. Episodes
are scheduled one after another; before each onset the target signal drifts
toward the event level, then drops (or rises) onto a plateau past the level
for at least the event window, then recovers. Some scheduled episodes are
"near misses": a shallower precursor and a plateau too short to be a main
event, which still satisfies a relaxed pre-conditional definition.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .events import Comparator
from .series import ConfigurationError, EntitySeries, SignalKind

VALUE_RANGE = (10.0, 200.0)


@dataclass(frozen=True)
class SynthParams:
    n_entities: int = 50
    minutes_per_entity: int = 2000
    target: SignalKind = SignalKind.MAP
    comparator: Comparator = Comparator.BELOW
    level: float = 60.0
    means: dict = field(default_factory=lambda: {"HR": 80.0, "SBP": 120.0, "DBP": 80.0, "MAP": 80.0})
    sds: dict = field(default_factory=lambda: {"HR": 5.0, "SBP": 5.0, "DBP": 4.0, "MAP": 4.0})
    ar_coefficient: float = 0.95
    episode_rate: float = 1.15  # main episodes per 1000 minutes
    near_miss_rate: float = 1.0  # short sub-threshold dips per 1000 minutes
    precursor_lead_minutes: int = 120
    precursor_drift: float = 0.6
    near_miss_drift: float = 0.15
    plateau_offset: float = 10.0
    episode_minutes: tuple[int, int] = (35, 60)
    near_miss_minutes: tuple[int, int] = (10, 16)
    recovery_minutes: int = 20
    noise_sd: float = 0.5
    first_onset_minute: int = 150
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "target", SignalKind(self.target))
        object.__setattr__(self, "comparator", Comparator(self.comparator))
        object.__setattr__(self, "episode_minutes", tuple(self.episode_minutes))
        object.__setattr__(self, "near_miss_minutes", tuple(self.near_miss_minutes))
        if self.target not in (SignalKind.MAP, SignalKind.HR):
            raise ConfigurationError("synthetic episodes are planted on MAP or HR")
        if not 0 <= self.ar_coefficient < 1:
            raise ConfigurationError("ar_coefficient must be in [0, 1)")
        if any(v <= 0 for v in self.sds.values()) or self.noise_sd < 0:
            raise ConfigurationError("standard deviations must be positive")
        if self.episode_rate < 0 or self.near_miss_rate < 0:
            raise ConfigurationError("rates must be non-negative")
        if not (0 <= self.precursor_drift < 1 and 0 <= self.near_miss_drift < 1):
            raise ConfigurationError("precursor drifts must be in [0, 1)")
        if self.episode_minutes[0] < 30:
            raise ConfigurationError("episodes must hold for at least 30 minutes")
        lo, hi = VALUE_RANGE
        if not lo <= self.plateau <= hi:
            raise ConfigurationError(f"episode plateau {self.plateau} lies outside [{lo}, {hi}]")
        if self.n_entities < 1 or self.minutes_per_entity < 1:
            raise ConfigurationError("need at least one entity and one minute")

    @property
    def sign(self) -> float:
        return -1.0 if self.comparator is Comparator.BELOW else 1.0

    @property
    def plateau(self) -> float:
        return self.level + self.sign * self.plateau_offset

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = self.target.value
        d["comparator"] = self.comparator.value
        d["episode_minutes"] = list(self.episode_minutes)
        d["near_miss_minutes"] = list(self.near_miss_minutes)
        return d


def ahe_like(**overrides) -> SynthParams:
    return SynthParams(**overrides)


def te_like(**overrides) -> SynthParams:
    base = dict(
        target=SignalKind.HR,
        comparator=Comparator.ABOVE,
        level=100.0,
        episode_rate=6.0,
        near_miss_rate=1.0,
        sds={"HR": 4.0, "SBP": 5.0, "DBP": 4.0, "MAP": 4.0},
    )
    base.update(overrides)
    return SynthParams(**base)


@dataclass
class SynthCorpus:
    entities: list[EntitySeries]
    onsets: dict[str, list[int]]
    near_misses: dict[str, list[int]]
    params: SynthParams

    def write(self, csv_path: str | Path, sidecar_path: str | Path) -> None:
        from .series import write_series_csv

        write_series_csv(csv_path, self.entities)
        Path(sidecar_path).write_text(
            json.dumps(
                {"onsets": self.onsets, "near_misses": self.near_misses, "params": self.params.to_dict()},
                sort_keys=True,
                indent=1,
            )
        )


def _ar1(rng: np.random.Generator, n: int, phi: float, sd: float) -> np.ndarray:
    eps = rng.normal(0.0, sd * np.sqrt(1 - phi * phi), size=n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, sd)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def _schedule(p: SynthParams, rng: np.random.Generator) -> list[tuple[int, int, bool]]:
    """Episodes as ``(onset, plateau_minutes, is_main)``, non-overlapping."""
    total_rate = p.episode_rate + p.near_miss_rate
    if total_rate <= 0:
        return []
    share_main = p.episode_rate / total_rate
    busy = p.precursor_lead_minutes + np.mean(p.episode_minutes) + p.recovery_minutes
    mean_gap = max(1000.0 / total_rate - busy, 10.0)
    out = []
    cursor = p.first_onset_minute - p.precursor_lead_minutes
    while True:
        start = cursor + int(rng.exponential(mean_gap))
        is_main = bool(rng.random() < share_main)
        lo, hi = p.episode_minutes if is_main else p.near_miss_minutes
        dur = int(rng.integers(lo, hi + 1))
        onset = max(start + p.precursor_lead_minutes, p.first_onset_minute)
        end = onset + dur + p.recovery_minutes
        if end > p.minutes_per_entity:
            break
        out.append((onset, dur, is_main))
        cursor = end
    return out


def _entity(p: SynthParams, eid: str, rng: np.random.Generator) -> tuple[EntitySeries, list[int], list[int]]:
    n = p.minutes_per_entity
    phi = p.ar_coefficient
    noise = {k: _ar1(rng, n, phi, p.sds[k]) for k in ("HR", "SBP", "DBP", "MAP")}
    target = p.target.value
    mean = p.means[target]
    offset = np.zeros(n)
    damp = np.ones(n)  # scales the AR noise of the target during plateaus
    gap = p.level - mean
    onsets, misses = [], []
    for onset, dur, is_main in _schedule(p, rng):
        lead = p.precursor_lead_minutes
        ramp = np.arange(1, lead + 1) / lead
        drift = p.precursor_drift if is_main else p.near_miss_drift
        offset[onset - lead : onset] = ramp * drift * gap
        offset[onset : onset + dur] = p.plateau - mean
        damp[onset : onset + dur] = 0.5
        rec = p.recovery_minutes
        if rec:
            offset[onset + dur : onset + dur + rec] = (p.plateau - mean) * (1 - np.arange(1, rec + 1) / (rec + 1))
        (onsets if is_main else misses).append(onset)

    signals = {}
    tgt = mean + offset + noise[target] * damp
    signals[target] = tgt
    if p.target is SignalKind.MAP:
        delta = tgt - mean
        signals["SBP"] = p.means["SBP"] + 1.2 * delta + noise["SBP"]
        signals["DBP"] = p.means["DBP"] + 0.9 * delta + noise["DBP"]
        signals["HR"] = p.means["HR"] - 0.3 * delta + noise["HR"]
    else:
        delta = tgt - mean
        signals["MAP"] = p.means["MAP"] - 0.15 * delta + noise["MAP"]
        signals["SBP"] = p.means["SBP"] - 0.2 * delta + noise["SBP"]
        signals["DBP"] = p.means["DBP"] - 0.1 * delta + noise["DBP"]
    lo, hi = VALUE_RANGE
    out = {}
    for k in ("HR", "SBP", "DBP", "MAP"):
        v = signals[k] + rng.normal(0.0, p.noise_sd, size=n) if p.noise_sd > 0 else signals[k]
        out[SignalKind(k)] = np.round(np.clip(v, lo, hi), 1)
    return EntitySeries(eid, 0, out), onsets, misses


def generate(params: SynthParams = SynthParams()) -> SynthCorpus:
    streams = np.random.SeedSequence(params.rng_seed).spawn(params.n_entities)
    width = len(str(params.n_entities - 1))
    entities, onsets, misses = [], {}, {}
    for i, ss in enumerate(streams):
        eid = f"e{i:0{width}d}"
        series, on, nm = _entity(params, eid, np.random.default_rng(ss))
        entities.append(series)
        onsets[eid] = on
        misses[eid] = nm
    return SynthCorpus(entities, onsets, misses, params)
