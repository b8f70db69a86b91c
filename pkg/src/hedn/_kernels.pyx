# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled clustering kernels. Semantics mirror ``hedn._kernels_py`` exactly."""
import numpy as np
from libc.math cimport sqrt, INFINITY, NAN


def pairwise_distances(const double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], dim = x.shape[1], i, j, k
    cdef double acc, diff
    out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] d = out
    for i in range(n):
        d[i, i] = 0.0
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(dim):
                diff = x[i, k] - x[j, k]
                acc += diff * diff
            acc = sqrt(acc)
            d[i, j] = acc
            d[j, i] = acc
    return out


def dbscan_labels(const double[:, ::1] dist, double eps, Py_ssize_t min_samples):
    cdef Py_ssize_t n = dist.shape[0], i, j, p, top, cluster = 0, count
    labels_arr = np.full(n, -1, dtype=np.int64)
    core_arr = np.zeros(n, dtype=np.uint8)
    stack_arr = np.empty(max(n, 1), dtype=np.int64)
    queued_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] labels = labels_arr
    cdef unsigned char[::1] core = core_arr
    cdef long long[::1] stack = stack_arr
    # queued[j] == cluster + 1 marks j as already pushed for the current cluster
    cdef long long[::1] queued = queued_arr

    for i in range(n):
        count = 0
        for j in range(n):
            if dist[i, j] <= eps:
                count += 1
        core[i] = count >= min_samples

    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        top = 0
        stack[top] = i
        top += 1
        queued[i] = cluster + 1
        while top > 0:
            top -= 1
            p = stack[top]
            if labels[p] == -1:
                labels[p] = cluster
            if not core[p]:
                continue
            for j in range(n):
                if dist[p, j] <= eps and labels[j] == -1 and queued[j] != cluster + 1:
                    queued[j] = cluster + 1
                    stack[top] = j
                    top += 1
        cluster += 1
    return labels_arr


def silhouette_samples(const double[:, ::1] dist, const long long[::1] labels,
                       Py_ssize_t n_clusters):
    cdef Py_ssize_t n = dist.shape[0], i, j, c
    cdef long long li
    cdef double a, b, m
    sizes_arr = np.zeros(n_clusters, dtype=np.int64)
    sums_arr = np.zeros(n_clusters, dtype=np.float64)
    out_arr = np.full(n, NAN, dtype=np.float64)
    cdef long long[::1] sizes = sizes_arr
    cdef double[::1] sums = sums_arr
    cdef double[::1] out = out_arr
    for i in range(n):
        if labels[i] >= 0:
            sizes[labels[i]] += 1
    for i in range(n):
        li = labels[i]
        if li < 0:
            continue
        for c in range(n_clusters):
            sums[c] = 0.0
        for j in range(n):
            if labels[j] >= 0:
                sums[labels[j]] += dist[i, j]
        if sizes[li] <= 1:
            out[i] = 0.0
            continue
        a = sums[li] / (sizes[li] - 1)
        b = INFINITY
        for c in range(n_clusters):
            if c != li and sizes[c] > 0:
                m = sums[c] / sizes[c]
                if m < b:
                    b = m
        if b == INFINITY:
            # no other cluster: the score is undefined, report 0
            out[i] = 0.0
            continue
        m = a if a > b else b
        out[i] = (b - a) / m if m > 0 else 0.0
    return out_arr
