"""Gradient-boosted trees, isolation forest and decision-threshold tuning."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import digamma

from . import kernels

FORMAT_VERSION = 1
MIN_GAIN = 1e-10
MAX_BACKTRACK = 8


class LearnerError(ValueError):
    pass


class Loss(str, enum.Enum):
    LOGISTIC = "LOGISTIC"
    SQUARED = "SQUARED"


@dataclass(frozen=True)
class Tree:
    """Array-encoded binary tree; ``feature[i] == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @classmethod
    def from_nodes(cls, nodes: list[list]) -> "Tree":
        f, th, lf, rt, v = zip(*nodes)
        return cls(
            np.array(f, dtype=np.intp),
            np.array(th, dtype=np.float64),
            np.array(lf, dtype=np.intp),
            np.array(rt, dtype=np.intp),
            np.array(v, dtype=np.float64),
        )

    def apply(self, X: np.ndarray) -> np.ndarray:
        return kernels.tree_apply(X, self.feature, self.threshold, self.left, self.right, self.value)

    def scaled(self, factor: float) -> "Tree":
        return Tree(self.feature, self.threshold, self.left, self.right, self.value * factor)

    @property
    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls.from_nodes(list(zip(d["feature"], d["threshold"], d["left"], d["right"], d["value"])))


def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if not np.isfinite(X).all():
        raise LearnerError("feature matrix contains non-finite values; impute first")
    return X


# --- gradient boosting -------------------------------------------------------


@dataclass(frozen=True)
class GbtParams:
    n_trees: int = 200
    max_depth: int = 4
    learning_rate: float = 0.1
    min_leaf: int = 20
    subsample_ratio: float = 0.8
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1 or self.min_leaf < 1:
            raise LearnerError(f"n_trees, max_depth and min_leaf must be positive: {self}")
        if not 0 < self.learning_rate <= 1 or not 0 < self.subsample_ratio <= 1:
            raise LearnerError(f"learning_rate and subsample_ratio must lie in (0, 1]: {self}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def training_loss(loss: Loss, y: np.ndarray, F: np.ndarray) -> float:
    if loss is Loss.LOGISTIC:
        return float(np.mean(np.logaddexp(0.0, F) - y * F))
    return float(0.5 * np.mean((y - F) ** 2))


def presort(X: np.ndarray) -> np.ndarray:
    """Row indices sorted by each feature, shape ``(n_features, n_rows)``."""
    return np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)


def grow_tree(
    XT: np.ndarray,
    r: np.ndarray,
    order: np.ndarray,
    max_depth: int,
    min_leaf: int,
    leaf_value,
) -> Tree:
    """Greedy least-squares regression tree on residuals ``r``.

    ``XT`` is the feature-major matrix, ``order`` the presorted rows taking
    part in this tree, and ``leaf_value(idx)`` maps a leaf's rows to its output.
    """
    n = XT.shape[1]
    nodes: list[list | None] = [None]
    stack = [(0, order, 0)]
    while stack:
        nid, ordr, depth = stack.pop()
        split = (-1, 0.0, 0.0, 0)
        if depth < max_depth:
            split = kernels.best_split(XT, r, ordr, min_leaf, MIN_GAIN)
        feat, thr, m_left = split[0], split[1], split[3]
        if feat < 0:
            nodes[nid] = [-1, 0.0, -1, -1, float(leaf_value(ordr[0]))]
            continue
        go_left = np.zeros(n, dtype=bool)
        go_left[ordr[feat, :m_left]] = True
        d, m = ordr.shape
        mask = go_left[ordr]
        lid, rid = len(nodes), len(nodes) + 1
        nodes += [None, None]
        nodes[nid] = [feat, thr, lid, rid, 0.0]
        stack.append((rid, ordr[~mask].reshape(d, m - m_left), depth + 1))
        stack.append((lid, ordr[mask].reshape(d, m_left), depth + 1))
    return Tree.from_nodes(nodes)


@dataclass
class GbtModel:
    trees: list[Tree]
    base_score: float
    loss: Loss
    n_features: int | None = None
    schema: tuple[str, ...] | None = None
    train_loss: list[float] = field(default_factory=list)

    def decision_function(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if self.n_features is not None and X.shape[1] != self.n_features:
            raise LearnerError(f"model expects {self.n_features} features, got {X.shape[1]}")
        F = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            F += tree.apply(X)
        return F

    def predict_proba(self, X) -> np.ndarray:
        """Probabilities for LOGISTIC models, raw predictions for SQUARED ones."""
        F = self.decision_function(X)
        return _sigmoid(F) if self.loss is Loss.LOGISTIC else F

    predict = predict_proba

    def to_dict(self) -> dict:
        return {
            "format": "earlywarn.gbt",
            "version": FORMAT_VERSION,
            "loss": self.loss.value,
            "base_score": self.base_score,
            "n_features": self.n_features,
            "schema": list(self.schema) if self.schema else None,
            "train_loss": self.train_loss,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbtModel":
        if d.get("format") != "earlywarn.gbt" or d.get("version") != FORMAT_VERSION:
            raise LearnerError(f"unsupported model format {d.get('format')} v{d.get('version')}")
        return cls(
            trees=[Tree.from_dict(t) for t in d["trees"]],
            base_score=d["base_score"],
            loss=Loss(d["loss"]),
            n_features=d["n_features"],
            schema=tuple(d["schema"]) if d["schema"] else None,
            train_loss=list(d["train_loss"]),
        )


def gbt_predict_proba(model: GbtModel, X) -> np.ndarray:
    return model.predict_proba(X)


def gbt_fit(
    X,
    y,
    params: GbtParams = GbtParams(),
    loss: Loss | str = Loss.LOGISTIC,
    schema: Sequence[str] | None = None,
) -> GbtModel:
    """Stagewise boosting of least-squares trees on negative gradients.

    Logistic leaves take a one-step Newton value. Each round's tree is halved
    until the full training loss does not rise; if that fails the ensemble
    stops early, so the recorded training loss never increases.
    """
    loss = Loss(loss)
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.float64)
    n = X.shape[0]
    if n < 2 or len(y) != n:
        raise LearnerError(f"need >= 2 rows with matching labels, got X {X.shape} / y {len(y)}")
    if loss is Loss.LOGISTIC:
        if not np.isin(y, (0.0, 1.0)).all():
            raise LearnerError("logistic loss needs 0/1 labels")
        p = y.mean()
        if p in (0.0, 1.0):
            raise LearnerError("logistic boosting needs both classes in the training labels")
        base = math.log(p / (1 - p))
    else:
        base = float(y.mean())

    rng = np.random.default_rng(params.rng_seed)
    XT = np.ascontiguousarray(X.T)
    order_all = presort(X)
    F = np.full(n, base)
    history = [training_loss(loss, y, F)]
    trees: list[Tree] = []
    n_sub = max(2, int(round(params.subsample_ratio * n)))
    lr = params.learning_rate
    for _ in range(params.n_trees):
        if loss is Loss.LOGISTIC:
            prob = _sigmoid(F)
            r = y - prob
            hess = prob * (1 - prob)

            def leaf(idx, r=r, hess=hess):
                return lr * r[idx].sum() / max(hess[idx].sum(), 1e-12)

        else:
            r = y - F

            def leaf(idx, r=r):
                return lr * r[idx].mean()

        if n_sub >= n:
            order = order_all
        else:
            keep = np.zeros(n, dtype=bool)
            keep[rng.choice(n, size=n_sub, replace=False)] = True
            order = order_all[keep[order_all]].reshape(X.shape[1], n_sub)
        tree = grow_tree(XT, r, order, params.max_depth, params.min_leaf, leaf)
        if tree.feature[0] < 0 and abs(tree.value[0]) < 1e-15:
            break
        step = tree.apply(X)
        accepted = False
        for _ in range(MAX_BACKTRACK + 1):
            cand = training_loss(loss, y, F + step)
            if cand <= history[-1]:
                accepted = True
                break
            tree = tree.scaled(0.5)
            step = step * 0.5
        if not accepted:
            break
        F = F + step
        trees.append(tree)
        history.append(cand)
    return GbtModel(trees, base, loss, X.shape[1], tuple(schema) if schema else None, history)


# --- isolation forest ------------------------------------------------------


def harmonic(n) -> np.ndarray:
    return digamma(np.asarray(n, dtype=np.float64) + 1.0) + np.euler_gamma


def average_path_length(n) -> np.ndarray:
    """Expected unsuccessful-search path length in a BST of ``n`` points."""
    n = np.asarray(n, dtype=np.float64)
    safe = np.maximum(n, 2.0)
    c = 2.0 * harmonic(safe - 1.0) - 2.0 * (safe - 1.0) / safe
    return np.where(n > 2, c, np.where(n == 2, 1.0, 0.0))


@dataclass(frozen=True)
class IsoForestParams:
    n_trees: int = 100
    subsample_size: int = 256
    rng_seed: int = 0


@dataclass
class IsoForestModel:
    """Leaf values hold ``depth + c(leaf size)`` so applying a tree yields h(x)."""

    trees: list[Tree]
    subsample_size: int
    n_trees: int
    n_features: int

    def path_lengths(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.shape[1] != self.n_features:
            raise LearnerError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return np.mean([t.apply(X) for t in self.trees], axis=0)

    def score(self, X) -> np.ndarray:
        return 2.0 ** (-self.path_lengths(X) / float(average_path_length(self.subsample_size)))

    def to_dict(self) -> dict:
        return {
            "format": "earlywarn.iforest",
            "version": FORMAT_VERSION,
            "subsample_size": self.subsample_size,
            "n_trees": self.n_trees,
            "n_features": self.n_features,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsoForestModel":
        if d.get("format") != "earlywarn.iforest" or d.get("version") != FORMAT_VERSION:
            raise LearnerError(f"unsupported model format {d.get('format')} v{d.get('version')}")
        return cls([Tree.from_dict(t) for t in d["trees"]], d["subsample_size"], d["n_trees"], d["n_features"])


def _isolation_tree(X: np.ndarray, rng: np.random.Generator, limit: int) -> Tree:
    nodes: list[list] = [None]
    stack = [(0, np.arange(X.shape[0]), 0)]
    while stack:
        nid, idx, depth = stack.pop()
        if depth < limit and idx.size > 1:
            sub = X[idx]
            lo, hi = sub.min(axis=0), sub.max(axis=0)
            usable = np.flatnonzero(hi > lo)
            if usable.size:
                q = int(usable[rng.integers(usable.size)])
                p = float(rng.uniform(lo[q], hi[q]))
                mask = sub[:, q] <= p
                lid, rid = len(nodes), len(nodes) + 1
                nodes += [None, None]
                nodes[nid] = [q, p, lid, rid, 0.0]
                stack.append((rid, idx[~mask], depth + 1))
                stack.append((lid, idx[mask], depth + 1))
                continue
        nodes[nid] = [-1, 0.0, -1, -1, depth + float(average_path_length(idx.size))]
    return Tree.from_nodes(nodes)


def isoforest_fit(X, params: IsoForestParams = IsoForestParams()) -> IsoForestModel:
    X = _as_matrix(X)
    n = X.shape[0]
    if n < 2:
        raise LearnerError("isolation forest needs >= 2 rows")
    psi = min(params.subsample_size, n)
    limit = math.ceil(math.log2(psi))
    rng = np.random.default_rng(params.rng_seed)
    trees = [_isolation_tree(X[rng.choice(n, size=psi, replace=False)], rng, limit) for _ in range(params.n_trees)]
    return IsoForestModel(trees, psi, params.n_trees, X.shape[1])


def isoforest_score(model: IsoForestModel, X) -> np.ndarray:
    return model.score(X)


# --- threshold tuning ------------------------------------------------------


def threshold_candidates(probas: np.ndarray) -> np.ndarray:
    u = np.unique(np.asarray(probas, dtype=np.float64))
    return np.unique(np.concatenate(([0.0], (u[:-1] + u[1:]) / 2, [1.0])))


def balanced_accuracy(probas, labels, threshold: float) -> float:
    probas = np.asarray(probas, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    hit = probas >= threshold
    return 0.5 * (hit[labels].mean() + (~hit[~labels]).mean())


def tune_threshold(probas, labels) -> float:
    """Threshold maximizing mean of recall and specificity; predictions are ``p >= thr``.

    Ties resolve to the highest threshold (fewest alarms). Comparisons use
    integer arithmetic so ties are exact.
    """
    probas = np.asarray(probas, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    P, N = int(labels.sum()), int((~labels).sum())
    if P == 0 or N == 0:
        raise LearnerError("threshold tuning needs both classes")
    cands = threshold_candidates(probas)
    pos = np.sort(probas[labels])
    neg = np.sort(probas[~labels])
    tp = P - np.searchsorted(pos, cands, side="left")
    tn = np.searchsorted(neg, cands, side="left")
    score = tp.astype(np.int64) * N + tn.astype(np.int64) * P
    idx = np.flatnonzero(score == score.max())[-1]
    return float(cands[idx])


# --- persistence -----------------------------------------------------------


def save_model(model, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True))


def load_model(path: str | Path):
    d = json.loads(Path(path).read_text())
    kind = d.get("format")
    if kind == "earlywarn.gbt":
        return GbtModel.from_dict(d)
    if kind == "earlywarn.iforest":
        return IsoForestModel.from_dict(d)
    raise LearnerError(f"{path}: unknown model format {kind!r}")
