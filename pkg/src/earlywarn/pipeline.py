"""Per-entity feature/label tables shared by training, tuning and evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .events import Episode, LayeredEventSpec, extract_episodes, label_offsets
from .features import feature_matrix
from .series import DERIVED_SIGNALS, EntitySeries, SignalKind, WindowConfig, derive_signals, filter_outliers, window_offsets


def ensure_prepared(series: EntitySeries, lo: float = 10.0, hi: float = 200.0) -> EntitySeries:
    """Filter and derive unless the series already carries derived signals."""
    if all(k in series.signals for k in DERIVED_SIGNALS):
        return series
    cleaned, _ = filter_outliers(series, lo, hi)
    return derive_signals(cleaned)


@dataclass
class EntityData:
    """Everything about one entity at evaluation stride.

    ``X`` is unimputed (may hold NaN). ``labeled`` marks rows whose target
    window passed the missingness guard; ``train_rows`` marks the subset on
    the training stride.
    """

    series: EntitySeries
    cfg: WindowConfig
    offsets: np.ndarray
    X: np.ndarray
    y: np.ndarray
    y_s: np.ndarray
    labeled: np.ndarray
    targets: np.ndarray
    episodes: list[Episode]
    target_signal: SignalKind

    @property
    def entity_id(self) -> str:
        return self.series.entity_id

    @property
    def alarm_minutes(self) -> np.ndarray:
        return self.series.start_time + self.offsets + self.cfg.ow_minutes

    @property
    def train_rows(self) -> np.ndarray:
        stride = self.cfg.train_stride_minutes
        return self.labeled & (self.offsets % stride == 0)

    @property
    def current_values(self) -> np.ndarray:
        """Target-signal value at the last OW minute of every sub-sequence."""
        return self.series[self.target_signal][self.offsets + self.cfg.ow_minutes - 1]


def build_entity_data(
    series: EntitySeries, cfg: WindowConfig, spec: LayeredEventSpec, X: np.ndarray | None = None
) -> EntityData:
    """Features, labels and episodes at evaluation stride; ``X`` reuses cached features."""
    s = ensure_prepared(series)
    offsets = window_offsets(s.length, cfg, cfg.eval_stride_minutes)
    if X is None:
        X = feature_matrix(s, offsets, cfg.ow_minutes)
    elif X.shape[0] != offsets.size:
        raise ValueError(f"{s.entity_id}: cached features have {X.shape[0]} rows, expected {offsets.size}")
    y, y_s, ok = label_offsets(s, offsets, cfg, spec)
    values = s[spec.main.signal]
    if offsets.size:
        targets = sliding_window_view(values, cfg.tw_minutes)[offsets + cfg.tw_offset]
    else:
        targets = np.empty((0, cfg.tw_minutes))
    episodes = extract_episodes(s, spec.main)
    return EntityData(s, cfg, offsets, X, y, y_s, ok, np.array(targets), episodes, spec.main.signal)


@dataclass
class LabeledSet:
    """Stacked rows from several entities; ``y_f`` is -1 where undefined."""

    X: np.ndarray
    y: np.ndarray
    y_s: np.ndarray
    groups: np.ndarray
    t: np.ndarray
    targets: np.ndarray

    @property
    def y_f(self) -> np.ndarray:
        return np.where(self.y_s == 1, self.y, -1)

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, mask) -> "LabeledSet":
        return LabeledSet(self.X[mask], self.y[mask], self.y_s[mask], self.groups[mask], self.t[mask], self.targets[mask])


def stack(datas: Sequence[EntityData], which: str = "train") -> LabeledSet:
    """Concatenate labeled rows: ``which`` is ``"train"`` (training stride) or ``"eval"``."""
    parts = []
    for d in datas:
        mask = d.train_rows if which == "train" else d.labeled
        parts.append(
            (d.X[mask], d.y[mask], d.y_s[mask], np.full(int(mask.sum()), d.entity_id, dtype=object), d.offsets[mask], d.targets[mask])
        )
    if not parts:
        raise ValueError("no entities to stack")
    X, y, y_s, g, t, tg = (np.concatenate(p) for p in zip(*parts))
    return LabeledSet(X, y.astype(np.int8), y_s.astype(np.int8), g, t, tg)
