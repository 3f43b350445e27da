"""Observation-window descriptors.

Per signal: ten summary statistics and six relative wavelet band energies.
Across signals: lag-0 Pearson correlation of every unordered pair. With the
six default signals that is ``6 * 16 + 15 = 111`` columns.

Every function has a matrix form taking ``(n_windows, window_len)`` arrays;
the single-window helpers wrap it so both paths share one implementation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .series import ALL_SIGNALS, ConfigurationError, EntitySeries, SignalKind, SubSequence

STAT_NAMES = ("mean", "sd", "var", "median", "min", "max", "iqr", "skew", "kurt", "slope")
WAVELET_LEVELS = 5
BAND_NAMES = tuple(f"d{i}" for i in range(1, WAVELET_LEVELS + 1)) + (f"a{WAVELET_LEVELS}",)
MIN_WAVELET_LEN = 2**WAVELET_LEVELS

# 4-tap Daubechies scaling filter (two vanishing moments)
_S3 = np.sqrt(3.0)
DB4_LOW = np.array([1 + _S3, 3 + _S3, 3 - _S3, 1 - _S3]) / (4 * np.sqrt(2.0))
DB4_HIGH = np.array([(-1) ** k * DB4_LOW[3 - k] for k in range(4)])

_ZERO_VAR_REL = 1e-12


def _zero_variance(m2: np.ndarray, mean: np.ndarray) -> np.ndarray:
    scale = _ZERO_VAR_REL * np.maximum(1.0, np.abs(mean))
    return m2 <= scale * scale


def _masked_quantiles(W: np.ndarray, qs: Sequence[float]) -> np.ndarray:
    """Linear-interpolation quantiles per row, ignoring NaN. Returns ``(len(qs), n)``."""
    out = np.full((len(qs), W.shape[0]), np.nan)
    has_nan = np.isnan(W).any(axis=1)
    clean = ~has_nan
    if clean.any():
        out[:, clean] = np.percentile(W[clean], [100 * q for q in qs], axis=1)
    for i in np.flatnonzero(has_nan):
        row = W[i][~np.isnan(W[i])]
        if row.size:
            out[:, i] = np.percentile(row, [100 * q for q in qs])
    return out


def stats_matrix(W: np.ndarray) -> np.ndarray:
    """Row-wise statistics over present values; rows with < 2 present values are NaN."""
    W = np.asarray(W, dtype=np.float64)
    n, length = W.shape
    present = ~np.isnan(W)
    cnt = present.sum(axis=1).astype(np.float64)
    good = cnt >= 2
    safe = np.where(good, cnt, 1.0)
    Z = np.where(present, W, 0.0)

    mean = Z.sum(axis=1) / safe
    dev = np.where(present, W - mean[:, None], 0.0)
    d2 = dev * dev
    ss = d2.sum(axis=1)
    var = ss / np.maximum(safe - 1, 1.0)
    m2 = ss / safe
    m3 = (d2 * dev).sum(axis=1) / safe
    m4 = (d2 * d2).sum(axis=1) / safe
    flat = _zero_variance(m2, mean)
    m2s = np.where(flat, 1.0, m2)
    g1 = m3 / m2s**1.5
    adj = np.sqrt(safe * (safe - 1)) / np.maximum(safe - 2, 1.0)
    skew = np.where(flat | (cnt < 3), 0.0, g1 * adj)
    kurt = np.where(flat, 0.0, m4 / (m2s * m2s) - 3.0)
    var = np.where(flat, 0.0, var)

    x = np.arange(length, dtype=np.float64)
    xm = np.where(present, x, 0.0).sum(axis=1) / safe
    xd = np.where(present, x - xm[:, None], 0.0)
    sxx = (xd * xd).sum(axis=1)
    sxy = (xd * dev).sum(axis=1)
    slope = np.where(flat | (sxx == 0), 0.0, sxy / np.where(sxx == 0, 1.0, sxx))

    with np.errstate(all="ignore"):
        mn = np.where(good, np.min(np.where(present, W, np.inf), axis=1), np.nan)
        mx = np.where(good, np.max(np.where(present, W, -np.inf), axis=1), np.nan)
    q25, q50, q75 = _masked_quantiles(W, (0.25, 0.5, 0.75))
    out = np.column_stack([mean, np.sqrt(var), var, q50, mn, mx, q75 - q25, skew, kurt, slope])
    out[~good] = np.nan
    return out


def window_stats(values) -> dict[str, float]:
    row = stats_matrix(np.asarray(values, dtype=np.float64)[None, :])[0]
    return dict(zip(STAT_NAMES, row.tolist()))


def pearson_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Row-wise correlation over jointly present minutes; zero-variance operands give 0."""
    joint = ~(np.isnan(A) | np.isnan(B))
    cnt = joint.sum(axis=1).astype(np.float64)
    safe = np.maximum(cnt, 1.0)
    a = np.where(joint, A, 0.0)
    b = np.where(joint, B, 0.0)
    ma = a.sum(axis=1) / safe
    mb = b.sum(axis=1) / safe
    da = np.where(joint, A - ma[:, None], 0.0)
    db = np.where(joint, B - mb[:, None], 0.0)
    va = (da * da).sum(axis=1) / safe
    vb = (db * db).sum(axis=1) / safe
    cov = (da * db).sum(axis=1) / safe
    flat = _zero_variance(va, ma) | _zero_variance(vb, mb)
    with np.errstate(all="ignore"):
        r = np.clip(cov / np.sqrt(va * vb), -1.0, 1.0)
    r = np.where(flat, 0.0, r)
    return np.where(cnt >= 2, r, np.nan)


def pearson(a, b) -> float:
    return float(pearson_matrix(np.asarray(a, float)[None, :], np.asarray(b, float)[None, :])[0])


def cross_correlations(ow: Sequence[np.ndarray]) -> np.ndarray:
    """Lag-0 correlations of every unordered pair, in ``combinations`` order."""
    return np.array([pearson(ow[i], ow[j]) for i, j in combinations(range(len(ow)), 2)])


def dwt_step(A: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One periodic analysis step on each row; output length is ``floor(n / 2)``.

    ``approx[k] = sum_i h[i] * x[(2k - 1 + i) mod n]`` (same phase as
    PyWavelets' periodization mode on even lengths).
    """
    n = A.shape[1]
    m = n // 2
    idx = (2 * np.arange(m)[:, None] - 1 + np.arange(4)[None, :]) % n
    taps = A[:, idx]
    # explicit tap sums keep each row's result independent of the batch shape
    lo = taps[..., 0] * DB4_LOW[0] + taps[..., 1] * DB4_LOW[1] + taps[..., 2] * DB4_LOW[2] + taps[..., 3] * DB4_LOW[3]
    hi = taps[..., 0] * DB4_HIGH[0] + taps[..., 1] * DB4_HIGH[1] + taps[..., 2] * DB4_HIGH[2] + taps[..., 3] * DB4_HIGH[3]
    return lo, hi


def _row_sum(M: np.ndarray) -> np.ndarray:
    """Left-to-right row sums; unlike ``sum(axis=1)`` the rounding never depends on the row count."""
    acc = np.zeros(M.shape[0])
    for j in range(M.shape[1]):
        acc += M[:, j]
    return acc


def band_energies(W: np.ndarray, levels: int = WAVELET_LEVELS) -> np.ndarray:
    """Absolute energies ``[d1, ..., dL, aL]`` per row."""
    A = np.asarray(W, dtype=np.float64)
    out = []
    for _ in range(levels):
        A, D = dwt_step(A)
        out.append(_row_sum(D * D))
    out.append(_row_sum(A * A))
    return np.column_stack(out)


def wavelet_matrix(W: np.ndarray) -> np.ndarray:
    """Relative band energies per row. Missing minutes take the row's present mean;
    rows with fewer than two present values come back NaN."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] < MIN_WAVELET_LEN:
        raise ConfigurationError(f"wavelet features need windows of >= {MIN_WAVELET_LEN} minutes, got {W.shape[1]}")
    present = ~np.isnan(W)
    cnt = present.sum(axis=1)
    if not present.all():
        fill = np.where(present, W, 0.0).sum(axis=1) / np.maximum(cnt, 1)
        W = np.where(present, W, fill[:, None])
    E = band_energies(W)
    total = _row_sum(E)
    rel = np.where(total[:, None] > 0, E / np.where(total > 0, total, 1.0)[:, None], 0.0)
    rel[cnt < 2] = np.nan
    return rel


def wavelet_energies(values) -> np.ndarray:
    return wavelet_matrix(np.asarray(values, dtype=np.float64)[None, :])[0]


# --- schema & featurization ---------------------------------------------


def feature_schema(signals: Sequence[SignalKind] = ALL_SIGNALS) -> list[str]:
    names = []
    for s in signals:
        names += [f"{s.value}.{n}" for n in STAT_NAMES]
        names += [f"{s.value}.wav_{b}" for b in BAND_NAMES]
    names += [f"corr.{a.value}.{b.value}" for a, b in combinations(signals, 2)]
    return names


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema: tuple[str, ...]

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.schema.index(name)])


def feature_matrix(
    series: EntitySeries, offsets: np.ndarray, ow_minutes: int, signals: Sequence[SignalKind] = ALL_SIGNALS
) -> np.ndarray:
    """Features of the OWs starting at ``offsets`` (indices into the series). May contain NaN."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if offsets.size == 0:
        return np.empty((0, len(feature_schema(signals))))
    windows = []
    blocks = []
    for s in signals:
        if s not in series.signals:
            raise ConfigurationError(f"{series.entity_id}: signal {s.value} missing; run derive_signals first")
        W = sliding_window_view(series[s], ow_minutes)[offsets]
        windows.append(W)
        blocks.append(stats_matrix(W))
        blocks.append(wavelet_matrix(W))
    for i, j in combinations(range(len(signals)), 2):
        blocks.append(pearson_matrix(windows[i], windows[j])[:, None])
    return np.hstack(blocks)


def featurize(series: EntitySeries, ss: SubSequence, imputer: "FeatureImputer | None" = None) -> FeatureVector:
    ow = ss.ow_slice.stop - ss.ow_slice.start
    row = feature_matrix(series, np.array([ss.offset]), ow)
    if imputer is not None:
        row = imputer.transform(row)
    return FeatureVector(row[0], tuple(feature_schema()))


class FeatureImputer:
    """Column medians fitted on training rows; fills NaN in any later matrix."""

    def __init__(self, schema: Sequence[str] | None = None):
        self.schema = tuple(schema or feature_schema())
        self.medians: np.ndarray | None = None

    def fit(self, X: np.ndarray) -> "FeatureImputer":
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != len(self.schema):
            raise ConfigurationError(f"feature matrix has {X.shape[1]} columns, schema has {len(self.schema)}")
        med = np.zeros(X.shape[1])
        observed = ~np.isnan(X).all(axis=0)
        if observed.any():
            med[observed] = np.nanmedian(X[:, observed], axis=0)
        self.medians = med
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        if self.medians is None:
            raise RuntimeError("imputer is not fitted")
        X = np.asarray(X, dtype=np.float64)
        if X.shape[1] != self.medians.size:
            raise ConfigurationError(f"feature matrix has {X.shape[1]} columns, imputer expects {self.medians.size}")
        return np.where(np.isnan(X), self.medians, X)


# --- export ----------------------------------------------------------------

CACHE_MAGIC = b"EWFM"
CACHE_VERSION = 1


def write_feature_csv(path: str | Path, X: np.ndarray, schema: Sequence[str], index: Sequence[tuple] = ()) -> None:
    """CSV with a schema header; optional leading index columns ``entity_id,t_start``."""
    lines = [",".join((["entity_id", "t_start"] if index else []) + list(schema))]
    for i, row in enumerate(np.asarray(X, dtype=np.float64)):
        cells = ["" if np.isnan(v) else repr(float(v)) for v in row]
        if index:
            cells = [str(index[i][0]), str(index[i][1])] + cells
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_feature_cache(path: str | Path, X: np.ndarray, schema: Sequence[str], meta: dict | None = None) -> None:
    """Binary cache: magic, version, header length, JSON header, row-major little-endian doubles."""
    X = np.ascontiguousarray(X, dtype="<f8")
    header = json.dumps(
        {"schema": list(schema), "rows": X.shape[0], "cols": X.shape[1], "meta": meta or {}}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC + struct.pack("<HI", CACHE_VERSION, len(header)))
        fh.write(header)
        fh.write(X.tobytes(order="C"))


def read_feature_cache(path: str | Path) -> tuple[np.ndarray, list[str], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise ConfigurationError(f"{path}: not a feature cache")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != CACHE_VERSION:
        raise ConfigurationError(f"{path}: cache version {version}, expected {CACHE_VERSION}")
    start = 4 + struct.calcsize("<HI")
    header = json.loads(raw[start : start + hlen])
    data = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    X = data.reshape(header["rows"], header["cols"]).astype(np.float64)
    return X, header["schema"], header["meta"]
