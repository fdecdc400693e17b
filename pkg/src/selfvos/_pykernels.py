"""Pure-numpy kernels; reference behaviour for the compiled ``_ckernels``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride):
    n, c, hp, wp = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # (n, c, ho, wo, kh, kw) -> (n, ho, wo, c, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def col2im(cols, n, c, hp, wp, kh, kw, stride):
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += blocks[:, :, i, j]
    return out


def kmeans_assign(points, centroids):
    """Nearest centroid (squared Euclidean) per point; ties go to the lower index."""
    # explicit differences keep the result bit-compatible with the compiled loop
    # up to summation order; chunked so memory stays bounded
    p = points.shape[0]
    labels = np.empty(p, dtype=np.int64)
    dist = np.empty(p, dtype=np.float64)
    step = max(1, 262144 // max(1, centroids.shape[0] * points.shape[1]))
    for s in range(0, p, step):
        diff = points[s:s + step, None, :] - centroids[None, :, :]
        d2 = np.einsum("pmd,pmd->pm", diff, diff)
        labels[s:s + step] = np.argmin(d2, axis=1)
        dist[s:s + step] = d2[np.arange(d2.shape[0]), labels[s:s + step]]
    return labels, dist
