# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tree kernels. Must stay numerically identical to ``_pykernels``."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def best_split(const double[:, ::1] XT, const double[::1] r, const cnp.intp_t[:, ::1] order,
               Py_ssize_t min_leaf, double min_gain):
    cdef Py_ssize_t d = order.shape[0]
    cdef Py_ssize_t m = order.shape[1]
    cdef Py_ssize_t j, i, nl, best_feat = -1, best_pos = -1
    cdef double total = 0.0, base, gl, gr, gain, best_gain = min_gain, best_thr = 0.0
    cdef double xa, xb
    if m < 2 * min_leaf or m < 2:
        return -1, 0.0, 0.0, 0
    with nogil:
        for i in range(m):
            total = total + r[order[0, i]]
        base = total * total / m
        for j in range(d):
            gl = 0.0
            for i in range(m - 1):
                gl = gl + r[order[j, i]]
                nl = i + 1
                if nl < min_leaf or m - nl < min_leaf:
                    continue
                xa = XT[j, order[j, i]]
                xb = XT[j, order[j, i + 1]]
                if not xa < xb:
                    continue
                gr = total - gl
                gain = gl * gl / nl + gr * gr / (m - nl) - base
                if gain > best_gain:
                    best_gain = gain
                    best_feat = j
                    best_thr = xa
                    best_pos = nl
    if best_feat < 0:
        return -1, 0.0, 0.0, 0
    return best_feat, best_thr, best_gain, best_pos


def tree_apply(const double[:, ::1] X, const cnp.intp_t[::1] feature, const double[::1] threshold,
               const cnp.intp_t[::1] left, const cnp.intp_t[::1] right, const double[::1] value):
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t i, node
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            o[i] = value[node]
    return out
