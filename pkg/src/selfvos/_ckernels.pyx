# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the inner loops in ``selfvos.kernels``.

Every function here has a numpy twin in ``selfvos._pykernels`` with the
same signature and output layout.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], hp = x.shape[2], wp = x.shape[3]
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n * ho * wo, c * kh * kw), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, oy, ox, row, col
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[row, col] = x[b, ci, oy * stride + i, ox * stride + j]
                                col += 1
    return out_arr


def col2im(floating[:, ::1] cols, Py_ssize_t n, Py_ssize_t c, Py_ssize_t hp, Py_ssize_t wp,
           int kh, int kw, int stride):
    cdef Py_ssize_t ho = (hp - kh) // stride + 1
    cdef Py_ssize_t wo = (wp - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, c, hp, wp), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ci, i, j, oy, ox, row, col
    with nogil:
        for b in range(n):
            for oy in range(ho):
                for ox in range(wo):
                    row = (b * ho + oy) * wo + ox
                    col = 0
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                out[b, ci, oy * stride + i, ox * stride + j] += cols[row, col]
                                col += 1
    return out_arr


def kmeans_assign(double[:, ::1] points, double[:, ::1] centroids):
    """Nearest centroid (squared Euclidean) per point; ties go to the lower index."""
    cdef Py_ssize_t p = points.shape[0], d = points.shape[1], m = centroids.shape[0]
    labels_arr = np.empty(p, dtype=np.int64)
    dist_arr = np.empty(p, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, k, j
    cdef double best, acc, diff
    cdef cnp.int64_t arg
    with nogil:
        for i in range(p):
            best = 1e300
            arg = 0
            for k in range(m):
                acc = 0.0
                for j in range(d):
                    diff = points[i, j] - centroids[k, j]
                    acc = acc + diff * diff
                if acc < best:
                    best = acc
                    arg = k
            labels[i] = arg
            dist[i] = best
    return labels_arr, dist_arr
