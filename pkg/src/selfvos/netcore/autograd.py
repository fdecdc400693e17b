"""A small reverse-mode autodiff engine over numpy arrays.

Each op records its parents and a closure that maps the output gradient to
parent gradients. ``Tensor.backward`` walks the recorded graph in reverse
topological order. Only the ops the networks and losses need are provided.
"""

import numpy as np

from .. import kernels


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, o):
        return mul(self, 1.0 / o) if np.isscalar(o) else div(self, o)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _coerce(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif b_t and not a_t:
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


def add(a, b):
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = _coerce(a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b):
    a, b = _coerce(a, b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        if gb is not None:
            gb = _unbroadcast(gb, b.shape)
        return ga, gb

    return _make(a.data @ b.data, (a, b), back)


def tsum(x, axis=None, keepdims=False):
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / float(n))


def reshape(x, shape):
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), back)


def take(x, indices, axis):
    """Gather along ``axis`` with an integer index array (a pure index remap)."""
    indices = np.asarray(indices)

    def back(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _make(np.take(x.data, indices, axis=axis), (x,), back)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, back)


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def log_softmax(x, axis=-1):
    m = np.max(x.data, axis=axis, keepdims=True)
    z = x.data - m
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * np.sum(g, axis=axis, keepdims=True),))


def softmax(x, axis=-1):
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - np.sum(g * out, axis=axis, keepdims=True)),))


def l2_normalize(x, axis, eps=1e-12):
    norm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def back(g):
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return _make(out, (x,), back)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation over ``(n, c, h, w)`` input with ``(o, c, kh, kw)`` weights."""
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {c2}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = kernels.im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gf = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (gf.T @ cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = gf.sum(axis=0)
        if x.requires_grad:
            gxp = kernels.col2im(gf @ wmat, (n, c, hp, wp), kh, kw, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        return (gx, gw) if b is None else (gx, gw, gb)

    return _make(out, parents, back)


def interp_matrix(n_in, n_out, dtype=np.float64):
    """Bilinear resampling matrix (align_corners=False, edge clamped)."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of the last two axes, as a fixed linear map ``Uy @ x @ Ux^T``."""
    h, w = x.shape[-2], x.shape[-1]
    uy = interp_matrix(h, out_h, x.dtype)
    ux = interp_matrix(w, out_w, x.dtype)
    out = uy @ x.data @ ux.T
    return _make(out, (x,), lambda g: (uy.T @ g @ ux,))


def avg_pool(x, k):
    """Non-overlapping ``k``×``k`` mean pooling of the last two axes."""
    h, w = x.shape[-2], x.shape[-1]
    if h % k or w % k:
        raise ValueError(f"avg_pool: {h}x{w} is not divisible by {k}")
    lead = x.shape[:-2]
    out = x.data.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def back(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1) / (k * k)
        return (g,)

    return _make(out, (x,), back)
