"""Numpy versions of the tree kernels; the reference the compiled core must match."""

from __future__ import annotations

import numpy as np


def best_split(XT, r, order, min_leaf, min_gain):
    """Best variance-reduction split over presorted rows.

    ``XT`` is the feature-major (transposed) matrix and ``order[j]`` lists the
    node's row indices sorted by feature ``j``. Returns
    ``(feature, threshold, gain, n_left)``; feature is -1 when nothing beats
    ``min_gain``. Rows with ``XT[feature] <= threshold`` go left. Ties go to
    the lowest feature, then the lowest threshold.
    """
    d, m = order.shape
    if m < 2 * min_leaf or m < 2:
        return -1, 0.0, 0.0, 0
    total = np.add.accumulate(r[order[0]])[-1]
    base = total * total / m
    xs = np.take_along_axis(XT, order, axis=1)
    gl = np.add.accumulate(r[order], axis=1)[:, :-1]
    nl = np.arange(1, m, dtype=np.float64)
    gr = total - gl
    gain = gl * gl / nl + gr * gr / (m - nl) - base
    ok = (xs[:, :-1] < xs[:, 1:]) & (nl >= min_leaf) & (m - nl >= min_leaf)
    gain = np.where(ok, gain, -np.inf)
    flat = int(np.argmax(gain))
    j, i = divmod(flat, m - 1)
    if not gain[j, i] > min_gain:
        return -1, 0.0, 0.0, 0
    return j, float(xs[j, i]), float(gain[j, i]), i + 1


def tree_apply(X, feature, threshold, left, right, value):
    node = np.zeros(X.shape[0], dtype=np.intp)
    rows = np.arange(X.shape[0])
    active = feature[node] >= 0
    while active.any():
        idx = rows[active]
        nd = node[idx]
        go_left = X[idx, feature[nd]] <= threshold[nd]
        node[idx] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return value[node].astype(np.float64)
