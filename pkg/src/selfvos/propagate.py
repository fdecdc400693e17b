"""Semi-supervised inference: propagate a first-frame mask through a video.

Each query frame reads mask values from a bank holding the first frame and
a sliding window of recent predictions, warps the bank's masks for a coarse
estimate, then refines it for ``R`` rounds through the mask encoder and
decoder.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import correspond as corr
from .datakit import write_label_maps
from .netcore import autograd as ag
from .netcore import decode_mask, encode_frame_mask, encode_visual
from .netcore.checkpoint import write_container

DEFAULT_WINDOW = 20
DEFAULT_ROUNDS = 3


# ---------------------------------------------------------------- mask sets


def labels_to_maskset(labels, num_objects=None):
    """Label map ``(H, W)`` to a one-hot distribution ``(K+1, H, W)`` (channel 0 is background)."""
    labels = np.asarray(labels)
    K = int(labels.max()) if num_objects is None else int(num_objects)
    if labels.max(initial=0) > K:
        raise ValueError(f"label {labels.max()} exceeds object count {K}")
    return (labels[None] == np.arange(K + 1)[:, None, None]).astype(np.float32)


def maskset_to_labels(probs):
    """Argmax over channels; ties go to the lower label."""
    return np.argmax(np.asarray(probs), axis=0).astype(np.uint8)


def aggregate_objects(fg_probs, size=None):
    """Merge independent per-object foreground probabilities ``(K, H, W)`` into ``(K+1, H, W)``.

    Background is ``prod_k (1 - p_k)``; the stack is renormalized to sum to one.
    The sum is always at least one, so the division is safe. An empty object
    list gives an all-background set of ``size``.
    """
    if len(fg_probs) == 0:
        if size is None:
            raise ValueError("size is required for an empty object list")
        return np.ones((1,) + tuple(size), np.float32)
    p = np.stack([np.asarray(m, dtype=np.float64) for m in fg_probs])
    if p.min() < 0.0 or p.max() > 1.0:
        raise ValueError("foreground probabilities must lie in [0, 1]")
    bg = np.prod(1.0 - p, axis=0, keepdims=True)
    stack = np.concatenate([bg, p], axis=0)
    return (stack / stack.sum(axis=0, keepdims=True)).astype(np.float32)


def _pool(x, stride):
    c, H, W = x.shape
    return x.reshape(c, H // stride, stride, W // stride, stride).mean(axis=(2, 4))


# ---------------------------------------------------------------- bank


@dataclass
class BankEntry:
    index: int
    keys: np.ndarray          # (h*w, D)
    masks: np.ndarray         # (h*w, K+1) at feature resolution
    values: np.ndarray = None  # (K, h*w, D'); None in warp-only mode


@dataclass
class ReferenceBank:
    """First frame (always kept) plus the ``window`` most recent predicted frames."""

    window: int = DEFAULT_WINDOW
    first: BankEntry = None
    recent: list = field(default_factory=list)

    def add(self, entry):
        if self.first is None:
            self.first = entry
            return
        self.recent.append(entry)
        if len(self.recent) > self.window:
            self.recent.pop(0)

    @property
    def entries(self):
        return ([self.first] if self.first is not None else []) + list(self.recent)

    @property
    def indices(self):
        return [e.index for e in self.entries]

    def stacked(self):
        ents = self.entries
        keys = np.concatenate([e.keys for e in ents])
        masks = np.concatenate([e.masks for e in ents])
        values = None
        if ents[0].values is not None:
            values = np.concatenate([e.values for e in ents], axis=1)
        return keys, masks, values


# ---------------------------------------------------------------- refinement


def _values_for(params, frame, fg_maps):
    """V on one frame paired with each object's probability map; returns ``(K, h*w, D')``."""
    K = fg_maps.shape[0]
    fm = encode_frame_mask(params, np.repeat(frame[None], K, axis=0), np.clip(fg_maps, 0.0, 1.0)).tensor.data
    return fm.transpose(0, 2, 3, 1).reshape(K, -1, fm.shape[1])


def refine(params, query_frame, coarse, V_q, skips, rounds=DEFAULT_ROUNDS):
    """Iteratively refine a coarse mask set.

    ``coarse`` is ``(K+1, H, W)``; ``V_q`` is ``(K, h*w, D')`` read out from the
    bank. Round 0 decodes with an all-zero mask embedding in place of the
    query's own; each later round encodes the previous estimate with V and
    decodes ``[V_q, V̄_q]``. Returns the final ``(K+1, H, W)`` distribution.
    """
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    desc = params.descriptor
    K = V_q.shape[0]
    H, W = coarse.shape[1:]
    h, w = H // desc.stride, W // desc.stride
    vq = V_q.reshape(K, h, w, -1).transpose(0, 3, 1, 2)
    sk = [ag.Tensor(s) for s in skips]

    def decode(vbar):
        logits = decode_mask(params, ag.Tensor(np.concatenate([vq, vbar], axis=1)), sk, (H, W)).data
        # softmax over (bg, fg) -> foreground probability
        fg = 1.0 / (1.0 + np.exp(np.clip(logits[:, 0] - logits[:, 1], -60, 60)))
        return aggregate_objects(fg)

    if rounds == 0:
        return decode(np.zeros_like(vq))
    y = coarse
    for _ in range(rounds):
        vbar = _values_for(params, query_frame, y[1:]).reshape(K, h, w, -1).transpose(0, 3, 1, 2)
        y = decode(vbar)
    return y


# ---------------------------------------------------------------- video


@dataclass
class Prediction:
    video_id: str
    probs: np.ndarray         # (T, K+1, H, W)

    @property
    def labels(self):
        return np.argmax(self.probs, axis=1).astype(np.uint8)


def infer_video(params, video, first_mask, window=DEFAULT_WINDOW, rounds=DEFAULT_ROUNDS,
                mode="full", temperature=corr.DEFAULT_TEMPERATURE, num_objects=None):
    """Predict a mask set for every frame given the first frame's label map.

    ``mode="full"`` reads out values and refines; ``mode="warp"`` only warps
    the bank's masks (no mask encoder or decoder). Frame 0 returns the given
    mask. Predictions for frame ``t`` depend on frames ``0..t`` only.
    """
    if mode not in ("full", "warp"):
        raise ValueError(f"unknown mode {mode!r}")
    if window < 0:
        raise ValueError("window must be >= 0")
    frames = video.frames
    T = frames.shape[0]
    H, W = frames.shape[2:]
    first = np.asarray(first_mask)
    if first.shape != (H, W):
        raise ValueError(f"first mask {first.shape} does not match frame size {(H, W)}")
    y0 = labels_to_maskset(first, num_objects)
    K = y0.shape[0] - 1
    stride = params.descriptor.stride
    h, w = H // stride, W // stride
    out = np.zeros((T, K + 1, H, W), np.float32)
    out[0] = y0
    if K == 0:
        out[:, 0] = 1.0
        return Prediction(video.id, out)

    def entry(t, keys, y):
        vals = _values_for(params, frames[t], y[1:]) if mode == "full" else None
        return BankEntry(t, keys, _pool(y, stride).reshape(K + 1, -1).T.copy(), vals)

    bank = ReferenceBank(window)
    fm0 = encode_visual(params, frames[0])
    bank.add(entry(0, fm0.tensor.data[0].reshape(fm0.channels, -1).T.copy(), y0))
    for t in range(1, T):
        fm = encode_visual(params, frames[t])
        kq = fm.tensor.data[0].reshape(fm.channels, -1).T
        keys, masks, values = bank.stacked()
        A = corr.affinity(keys, kq, temperature).data        # (refs, h*w)
        coarse_small = (A.T @ masks).T.reshape(K + 1, h, w)
        coarse = ag.resize_bilinear(ag.Tensor(coarse_small), H, W).data
        coarse = coarse / coarse.sum(axis=0, keepdims=True)
        if mode == "warp":
            y = coarse.astype(np.float32)
        else:
            V_q = np.matmul(A.T[None], values)                # (K, h*w, D')
            y = refine(params, frames[t], coarse, V_q, [s.data for s in fm.skips], rounds)
        out[t] = y
        bank.add(entry(t, kq.copy(), y))
    return Prediction(video.id, out)


def copy_first_mask(video, first_mask):
    """Baseline: the first-frame labels repeated for every frame."""
    first = np.asarray(first_mask, dtype=np.uint8)
    return np.repeat(first[None], len(video), axis=0)


def write_prediction(labels, directory, probs=None):
    """PNG label maps (``00000.png``...) plus an optional ``probs.ckpt`` container."""
    directory = Path(directory)
    write_label_maps(labels, directory)
    if probs is not None:
        write_container(directory / "probs.ckpt", {"probs": np.asarray(probs, np.float32)},
                        {"layout": "T,K+1,H,W"})
