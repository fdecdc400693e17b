"""Dense correspondence: affinity, readout, mask warping and the two contrastive losses.

Feature matrices are ``(pixels, channels)``. Affinities are
``(reference pixels, query pixels)`` and normalized over the reference axis,
so every query column is a convex weight vector.
"""

from dataclasses import dataclass

import numpy as np

from .netcore import autograd as ag
from .netcore.autograd import Tensor

DEFAULT_TEMPERATURE = 0.07


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_temperature(temperature):
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def grid_to_matrix(x):
    """``(c, h, w)`` or ``(n, c, h, w)`` grid to ``(n*h*w, c)`` rows (frames stacked)."""
    x = _t(x)
    if x.ndim == 3:
        x = ag.reshape(x, (1,) + x.shape)
    n, c, h, w = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 3, 1)), (n * h * w, c))


def matrix_to_grid(m, h, w):
    """Inverse of :func:`grid_to_matrix` for a single frame: ``(h*w, c)`` to ``(c, h, w)``."""
    m = _t(m)
    return ag.transpose(ag.reshape(m, (h, w, m.shape[1])), (2, 0, 1))


def affinity(ref_features, query_features, temperature=DEFAULT_TEMPERATURE):
    """Softmax over reference pixels of ``<f_r, f_q> / temperature``."""
    _check_temperature(temperature)
    ref, qry = _t(ref_features), _t(query_features)
    if ref.shape[1] != qry.shape[1]:
        raise ValueError(f"channel mismatch: reference {ref.shape[1]} vs query {qry.shape[1]}")
    logits = ag.matmul(ref, qry.T) * (1.0 / temperature)
    return ag.softmax(logits, axis=0)


def readout(A, ref_values):
    """Query values as affinity-weighted sums of reference values: ``A^T V_r``."""
    A, vals = _t(A), _t(ref_values)
    if A.shape[0] != vals.shape[0]:
        raise ValueError(f"affinity has {A.shape[0]} reference rows, values have {vals.shape[0]}")
    return ag.matmul(A.T, vals)


def warp_mask(A, ref_masks):
    """Warp stacked per-pixel distributions ``(ref pixels, K+1)`` to the query.

    ``ref_masks`` may also be a list of per-reference ``(pixels, K+1)`` blocks,
    which must agree on the object count.
    """
    if isinstance(ref_masks, (list, tuple)):
        widths = {m.shape[1] for m in ref_masks}
        if len(widths) != 1:
            raise ValueError(f"object count differs across references: {sorted(widths)}")
        ref_masks = ag.concat([_t(m) for m in ref_masks], axis=0)
    return readout(A, ref_masks)


# ---------------------------------------------------------------- transforms


@dataclass(frozen=True)
class TransformParams:
    """Integer-exact spatial remap.

    ``kind`` is one of ``identity``, ``flip_h``, ``crop`` (``top``, ``left``,
    ``height``, ``width``), ``scale`` (integer nearest upsampling by ``factor``)
    or ``composite`` (``parts`` applied left to right).
    """

    kind: str = "identity"
    top: int = 0
    left: int = 0
    height: int = 0
    width: int = 0
    factor: int = 1
    parts: tuple = ()

    def at_stride(self, stride):
        """Same transform expressed on a grid ``stride`` times finer."""
        if self.kind == "crop":
            return TransformParams("crop", self.top * stride, self.left * stride,
                                   self.height * stride, self.width * stride)
        if self.kind == "composite":
            return TransformParams("composite", parts=tuple(p.at_stride(stride) for p in self.parts))
        return self

    def output_size(self, h, w):
        return index_map(self, h, w)[0].shape


def compose(*parts):
    return TransformParams("composite", parts=tuple(parts))


def index_map(phi, h, w):
    """Source ``(row, col)`` index arrays for every output cell of ``phi`` on an ``h``×``w`` grid."""
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return _remap(phi, rows, cols)


def _remap(phi, rows, cols):
    h, w = rows.shape
    k = phi.kind
    if k == "identity":
        return rows, cols
    if k == "flip_h":
        return rows[:, ::-1], cols[:, ::-1]
    if k == "crop":
        if phi.height < 1 or phi.width < 1 or phi.top < 0 or phi.left < 0 \
                or phi.top + phi.height > h or phi.left + phi.width > w:
            raise ValueError(f"crop window ({phi.top},{phi.left},{phi.height},{phi.width}) "
                             f"outside a {h}x{w} grid")
        sl = (slice(phi.top, phi.top + phi.height), slice(phi.left, phi.left + phi.width))
        return rows[sl], cols[sl]
    if k == "scale":
        f = int(phi.factor)
        if f < 1:
            raise ValueError("scale factor must be a positive integer")
        return np.repeat(np.repeat(rows, f, 0), f, 1), np.repeat(np.repeat(cols, f, 0), f, 1)
    if k == "composite":
        for part in phi.parts:
            rows, cols = _remap(part, rows, cols)
        return rows, cols
    raise ValueError(f"unknown transform kind {k!r}")


def apply_transform(phi, x):
    """Remap the last two (spatial) axes of an image, mask or feature grid.

    Works on arrays and on :class:`Tensor`s (differentiably); channel vectors
    are moved, never mixed.
    """
    h, w = x.shape[-2], x.shape[-1]
    rows, cols = index_map(phi, h, w)
    flat_idx = (rows * w + cols).reshape(-1)
    lead = x.shape[:-2]
    if isinstance(x, Tensor):
        flat = ag.reshape(x, lead + (h * w,))
        return ag.reshape(ag.take(flat, flat_idx, axis=len(lead)), lead + rows.shape)
    arr = np.asarray(x)
    return np.take(arr.reshape(lead + (h * w,)), flat_idx, axis=len(lead)).reshape(lead + rows.shape)


# ---------------------------------------------------------------- losses


def _contrastive(anchors, candidates, targets, temperature):
    logits = ag.matmul(anchors, candidates.T) * (1.0 / temperature)
    logp = ag.log_softmax(logits, axis=1)
    picked = ag.getitem(logp, (np.arange(anchors.shape[0]), targets))
    return -ag.mean(picked)


def loss_short(feat_transformed_t, feat_t1_transformed, temperature=DEFAULT_TEMPERATURE):
    """Aligned-pixel cross-entropy between ``E(Φ(I_t))`` and ``Φ(E(I_t+1))``, mean over pixels.

    Each row of ``feat_t1_transformed`` is classified against all rows of
    ``feat_transformed_t``; the correct class is the aligned row.
    """
    _check_temperature(temperature)
    xt, xt1 = _t(feat_transformed_t), _t(feat_t1_transformed)
    if xt.shape != xt1.shape:
        raise ValueError(f"shape mismatch: {xt.shape} vs {xt1.shape}")
    return _contrastive(xt1, xt, np.arange(xt.shape[0]), temperature)


def pseudo_match(feat_transformed_distant, feat_t, temperature=DEFAULT_TEMPERATURE):
    """Index of the most similar ``feat_t`` row for each distant-frame row.

    The softmax is monotone in the similarity, so the argmax is taken on the
    raw dot products; it does not depend on ``temperature``. Ties resolve to
    the lowest index.
    """
    _check_temperature(temperature)
    a = np.asarray(feat_transformed_distant.data if isinstance(feat_transformed_distant, Tensor)
                   else feat_transformed_distant)
    b = np.asarray(feat_t.data if isinstance(feat_t, Tensor) else feat_t)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"channel mismatch: {a.shape[1]} vs {b.shape[1]}")
    return np.argmax(a @ b.T, axis=1)


def loss_long(feat_distant_transformed, feat_t, o, temperature=DEFAULT_TEMPERATURE):
    """Cross-entropy of each ``Φ(E(I_t'))`` row against pseudo target ``o_k`` over rows of ``E(I_t)``."""
    _check_temperature(temperature)
    xd, it = _t(feat_distant_transformed), _t(feat_t)
    o = np.asarray(o, dtype=np.int64)
    if xd.shape[1] != it.shape[1]:
        raise ValueError(f"channel mismatch: {xd.shape[1]} vs {it.shape[1]}")
    if o.shape != (xd.shape[0],):
        raise ValueError(f"expected {xd.shape[0]} match indices, got shape {o.shape}")
    if o.size and (o.min() < 0 or o.max() >= it.shape[0]):
        raise ValueError(f"match index out of range [0, {it.shape[0]})")
    return _contrastive(xd, it, o, temperature)
