"""Space-time k-means over encoder features and pseudo-mask derivation."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .netcore import encode_visual

log = logging.getLogger(__name__)


@dataclass
class ClusterState:
    centroids: np.ndarray        # (M, dim)
    labels: np.ndarray           # (points,) cluster index per point
    objective: float             # sum of squared distances to assigned centroids
    history: list = field(default_factory=list)
    n_iter: int = 0
    grid_shape: tuple = ()       # (T, h, w) when the points come from a video

    @property
    def assignments(self):
        """One-hot assignment matrix ``(points, M)``."""
        s = np.zeros((self.labels.size, self.centroids.shape[0]), dtype=np.uint8)
        s[np.arange(self.labels.size), self.labels] = 1
        return s


@dataclass
class PseudoMaskSet:
    labels: np.ndarray           # (T, H, W) uint8; 0 = pruned / background
    survivors: list              # cluster index for label 1..K'
    sizes: list                  # pixel fraction per survivor
    epoch: int = 0
    empty: bool = False

    @property
    def num_objects(self):
        return len(self.survivors)


def positional_encoding(t, y, x, dims_per_axis=8, max_len=10000):
    """Interleaved sin/cos per axis at frequencies ``10000^(-2i/d)``, axes concatenated (t, y, x).

    Coordinates may be scalars or equal-shape arrays; the encoding is the last axis.
    """
    if dims_per_axis % 2 or dims_per_axis < 2:
        raise ValueError(f"dims_per_axis must be a positive even number, got {dims_per_axis}")
    coords = np.broadcast_arrays(*(np.asarray(c, dtype=np.float64) for c in (t, y, x)))
    for c in coords:
        if np.any(c < 0) or np.any(c >= max_len):
            raise ValueError(f"coordinate outside [0, {max_len})")
    freqs = 10000.0 ** (-np.arange(0, dims_per_axis, 2) / dims_per_axis)
    parts = []
    for c in coords:
        phase = c[..., None] * freqs
        enc = np.empty(c.shape + (dims_per_axis,))
        enc[..., 0::2] = np.sin(phase)
        enc[..., 1::2] = np.cos(phase)
        parts.append(enc)
    return np.concatenate(parts, axis=-1)


def _kmeans_pp(points, m, rng):
    n = points.shape[0]
    centers = np.empty((m, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for k in range(1, m):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = min(int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right")), n - 1)
        centers[k] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centers[k]) ** 2, axis=1))
    return centers


def _lloyd(points, centers, max_iters, tol):
    history = []
    labels = None
    it = 0
    for it in range(1, max_iters + 1):
        new_labels, dist = kernels.kmeans_assign(points, centers)
        obj = float(dist.sum())
        if history and obj > history[-1] * (1 + tol) + tol:
            raise AssertionError(f"k-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)
        if labels is not None and np.array_equal(labels, new_labels):
            labels = new_labels
            break
        labels = new_labels
        counts = np.bincount(labels, minlength=centers.shape[0])
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        nonempty = counts > 0
        centers = centers.copy()
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            # re-seed each empty cluster at the point farthest from its centroid
            d_now = np.sum((points - centers[labels]) ** 2, axis=1)
            for k in empties:
                far = int(np.argmax(d_now))
                centers[k] = points[far]
                d_now[far] = -1.0
    labels, dist = kernels.kmeans_assign(points, centers)
    obj = float(dist.sum())
    if obj > history[-1] * (1 + tol) + tol:
        raise AssertionError(f"k-means objective increased: {history[-1]} -> {obj}")
    if obj != history[-1]:
        history.append(obj)
    return centers, labels, obj, history, it


def kmeans(points, M, max_iters=100, seed=0, n_init=20, tol=1e-9):
    """Lloyd's EM iterations from k-means++ seeds; best of ``n_init`` restarts.

    The objective (sum of squared Euclidean distances) is checked to be
    non-increasing after every iteration. Tiny problems have many poor local
    optima, so the default keeps 20 restarts; whole-video clustering passes
    fewer to stay within its time budget.
    """
    if M < 1:
        raise ValueError(f"need at least one cluster, got M={M}")
    points = np.ascontiguousarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if points.shape[0] < M:
        raise ValueError(f"{points.shape[0]} points cannot fill {M} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_pp(points, M, rng)
        run = _lloyd(points, init, max_iters, tol)
        if best is None or run[2] < best[2]:
            best = run
    centers, labels, obj, history, n_iter = best
    return ClusterState(centers, labels, obj, history, n_iter)


def video_embeddings(video_frames, encoder, pe_weight=0.1, pe_dims=8, batch=8):
    """Per feature cell ``[key ⊕ pe_weight · posenc(t, y, x)]`` for every frame; shape ``(T*h*w, D+3*pe_dims)``."""
    keys = []
    for s in range(0, len(video_frames), batch):
        fm = encode_visual(encoder, np.stack(video_frames[s:s + batch]))
        keys.append(fm.tensor.data.astype(np.float64))
    keys = np.concatenate(keys, axis=0)          # (T, D, h, w)
    T, D, h, w = keys.shape
    feats = keys.transpose(0, 2, 3, 1).reshape(T * h * w, D)
    tt, yy, xx = np.meshgrid(np.arange(T), np.arange(h), np.arange(w), indexing="ij")
    pe = positional_encoding(tt.ravel(), yy.ravel(), xx.ravel(), pe_dims)
    return np.concatenate([feats, pe_weight * pe], axis=1), (T, h, w)


def cluster_video(video, encoder, M=5, pe_weight=0.1, seed=0, max_iters=100, pe_dims=8, n_init=4):
    """Partition every feature cell of every frame into ``M`` space-time clusters."""
    points, grid = video_embeddings(video.frames, encoder, pe_weight, pe_dims)
    state = kmeans(points, M, max_iters=max_iters, seed=seed, n_init=n_init)
    state.grid_shape = grid
    return state


def derive_pseudo_masks(state, video_shape=None, prune_threshold=0.40, image_size=None, epoch=0):
    """Turn cluster assignments into per-frame label maps.

    Clusters covering more than ``prune_threshold`` of the video's cells become
    background (0); survivors are numbered 1..K' by descending size. Labels
    are upsampled to ``image_size`` by nearest neighbour.
    """
    T, h, w = video_shape or state.grid_shape
    if state.labels.size != T * h * w:
        raise ValueError(f"{state.labels.size} assignments for a {T}x{h}x{w} grid")
    M = state.centroids.shape[0]
    counts = np.bincount(state.labels, minlength=M)
    frac = counts / counts.sum()
    order = sorted(range(M), key=lambda k: (-counts[k], k))
    survivors = [k for k in order if counts[k] > 0 and frac[k] <= prune_threshold]
    lut = np.zeros(M, dtype=np.uint8)
    for new, k in enumerate(survivors, start=1):
        lut[k] = new
    grid = lut[state.labels].reshape(T, h, w)
    if image_size is not None:
        H, W = image_size
        if H % h or W % w:
            raise ValueError(f"image size {H}x{W} is not a multiple of grid {h}x{w}")
        grid = np.repeat(np.repeat(grid, H // h, axis=1), W // w, axis=2)
    empty = not survivors
    if empty:
        log.warning("all clusters pruned at threshold %.2f; video yields no pseudo objects", prune_threshold)
    return PseudoMaskSet(grid, survivors, [float(frac[k]) for k in survivors], epoch, empty)
