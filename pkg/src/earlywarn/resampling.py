"""Class rebalancing for training folds: NR, RU, RO, SMOTE, ADASYN, TOMEK.

Neighbour searches run on features standardized with the input dataset's own
mean and standard deviation; synthetic rows are interpolated in the original
feature space. Distance ties go to the lowest row index.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

DEFAULT_K = 5
SYNTHETIC_T = -1
_CHUNK = 512


class ResamplingError(ValueError):
    pass


class Strategy(str, enum.Enum):
    NR = "NR"
    RU = "RU"
    RO = "RO"
    SMOTE = "SMOTE"
    ADASYN = "ADASYN"
    TOMEK = "TOMEK"


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    t: np.ndarray
    synthetic: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.y)
        syn = np.zeros(n, bool) if self.synthetic is None else np.asarray(self.synthetic, bool)
        object.__setattr__(self, "synthetic", syn)
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int8))
        object.__setattr__(self, "groups", np.asarray(self.groups))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.int64))
        if not (self.X.shape[0] == n == len(self.groups) == len(self.t) == len(self.synthetic)):
            raise ValueError("Dataset fields disagree on row count")
        if n and not np.isin(self.y, (0, 1)).all():
            raise ValueError("labels must be 0/1")

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.groups[idx], self.t[idx], self.synthetic[idx])

    def counts(self) -> tuple[int, int]:
        pos = int(self.y.sum())
        return len(self.y) - pos, pos


def standardize(X: np.ndarray) -> np.ndarray:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    return (X - mu) / np.where(sd > 0, sd, 1.0)


def nearest_neighbors(Q: np.ndarray, R: np.ndarray, k: int, exclude_self: bool = False) -> np.ndarray:
    """Indices of the ``k`` nearest rows of ``R`` for each row of ``Q``.

    With ``exclude_self`` the query set is ``R`` itself and row ``i`` never
    returns ``i``. Stable sorting makes ties resolve to the lower index.
    """
    out = np.empty((Q.shape[0], k), dtype=np.int64)
    for start in range(0, Q.shape[0], _CHUNK):
        D = cdist(Q[start : start + _CHUNK], R, "sqeuclidean")
        if exclude_self:
            rows = np.arange(D.shape[0])
            D[rows, rows + start] = np.inf
        out[start : start + _CHUNK] = np.argsort(D, axis=1, kind="stable")[:, :k]
    return out


def _split_classes(ds: Dataset) -> tuple[int, np.ndarray, np.ndarray]:
    neg, pos = ds.counts()
    if neg == 0 or pos == 0:
        raise ResamplingError(f"resampling needs both classes, got {neg} negative / {pos} positive rows")
    minority = 1 if pos < neg else 0
    return minority, np.flatnonzero(ds.y == minority), np.flatnonzero(ds.y != minority)


def _append_synthetic(ds: Dataset, seeds: np.ndarray, Xnew: np.ndarray, label: int) -> Dataset:
    m = len(seeds)
    return Dataset(
        np.vstack([ds.X, Xnew]),
        np.concatenate([ds.y, np.full(m, label, np.int8)]),
        np.concatenate([ds.groups, ds.groups[seeds]]),
        np.concatenate([ds.t, np.full(m, SYNTHETIC_T, np.int64)]),
        np.concatenate([ds.synthetic, np.ones(m, bool)]),
    )


def random_under(ds: Dataset, rng: np.random.Generator) -> Dataset:
    _, mino, majo = _split_classes(ds)
    keep = rng.choice(majo, size=len(mino), replace=False)
    return ds.take(np.sort(np.concatenate([mino, keep])))


def random_over(ds: Dataset, rng: np.random.Generator) -> Dataset:
    _, mino, majo = _split_classes(ds)
    extra = rng.choice(mino, size=len(majo) - len(mino), replace=True)
    return ds.take(np.concatenate([np.arange(len(ds)), extra]))


def _clamped_k(k: int, n_minority: int) -> int:
    return min(k, n_minority - 1)


def smote(ds: Dataset, rng: np.random.Generator, k: int = DEFAULT_K) -> Dataset:
    label, mino, majo = _split_classes(ds)
    if len(mino) < 2:
        raise ResamplingError("SMOTE needs at least two minority rows")
    k = _clamped_k(k, len(mino))
    Z = standardize(ds.X)
    nn = nearest_neighbors(Z[mino], Z[mino], k, exclude_self=True)
    need = len(majo) - len(mino)
    which = rng.integers(0, len(mino), size=need)
    pick = rng.integers(0, k, size=need)
    gap = rng.random(need)
    base = ds.X[mino[which]]
    other = ds.X[mino[nn[which, pick]]]
    return _append_synthetic(ds, mino[which], base + gap[:, None] * (other - base), label)


def adasyn(ds: Dataset, rng: np.random.Generator, k: int = DEFAULT_K) -> Dataset:
    """Generation budget per minority row follows the majority share among its
    ``k`` neighbours from both classes; interpolation partners are minority rows."""
    label, mino, majo = _split_classes(ds)
    if len(mino) < 2:
        raise ResamplingError("ADASYN needs at least two minority rows")
    Z = standardize(ds.X)
    k_all = min(k, len(ds) - 1)
    nn_all = nearest_neighbors(Z[mino], Z, k_all + 1)
    # drop the row itself wherever it appears (duplicates may push it out of slot 0)
    hard = np.array([(ds.y[[j for j in row if j != i][:k_all]] != label).sum() for i, row in zip(mino, nn_all)])
    need = len(majo) - len(mino)
    ratio = hard / k_all
    weights = ratio / ratio.sum() if ratio.sum() > 0 else np.full(len(mino), 1.0 / len(mino))
    budget = np.rint(weights * need).astype(np.int64)
    k_min = _clamped_k(k, len(mino))
    nn_min = nearest_neighbors(Z[mino], Z[mino], k_min, exclude_self=True)
    which = np.repeat(np.arange(len(mino)), budget)
    pick = rng.integers(0, k_min, size=len(which))
    gap = rng.random(len(which))
    base = ds.X[mino[which]]
    other = ds.X[mino[nn_min[which, pick]]]
    return _append_synthetic(ds, mino[which], base + gap[:, None] * (other - base), label)


def tomek_links(ds: Dataset) -> np.ndarray:
    """Row pairs ``(i, j)``, ``i < j``, of opposite class that are each other's nearest neighbour."""
    if len(ds) < 2:
        return np.empty((0, 2), dtype=np.int64)
    Z = standardize(ds.X)
    nn = nearest_neighbors(Z, Z, 1, exclude_self=True)[:, 0]
    i = np.arange(len(ds))
    mutual = (nn[nn] == i) & (i < nn) & (ds.y != ds.y[nn])
    return np.column_stack([i[mutual], nn[mutual]])


def tomek(ds: Dataset) -> Dataset:
    links = tomek_links(ds)
    drop = np.zeros(len(ds), bool)
    drop[links.ravel()] = True
    return ds.take(np.flatnonzero(~drop))


def resample(ds: Dataset, strategy: Strategy | str, rng_seed: int, k: int = DEFAULT_K) -> Dataset:
    strategy = Strategy(strategy)
    if strategy is Strategy.NR:
        return ds
    if strategy is Strategy.TOMEK:
        return tomek(ds)
    rng = np.random.default_rng(rng_seed)
    if strategy is Strategy.RU:
        return random_under(ds, rng)
    if strategy is Strategy.RO:
        return random_over(ds, rng)
    if strategy is Strategy.SMOTE:
        return smote(ds, rng, k)
    return adasyn(ds, rng, k)
