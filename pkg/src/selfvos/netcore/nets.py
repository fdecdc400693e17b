"""Visual encoder E, frame-mask encoder V and mask decoder D.

All three are small conv stacks built from :mod:`autograd` ops. Parameters
live in a flat ``{name: ndarray}`` mapping inside :class:`ModelParams`; a
forward pass takes either a ``ModelParams`` (inference, no graph) or the
``{name: Tensor}`` mapping returned by :meth:`ModelParams.bind` (training).
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor

FORMAT_VERSION = "selfvos-params/1"


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Layer layout shared by the three networks.

    ``widths`` holds one entry per stride-2 stage, so the feature stride is
    ``2 ** len(widths)``. ``res_blocks`` residual blocks run at the deepest
    stage of each encoder.
    """

    widths: tuple = (16, 32)
    res_blocks: int = 1
    key_dim: int = 128
    value_dim: int = 512
    head_hidden: int = 64
    decoder_width: int = 32
    image_channels: int = 3
    upsample: str = "bilinear+conv3x3"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if not self.widths:
            raise ValueError("descriptor needs at least one stage")
        if min(self.widths) < 1 or self.key_dim < 1 or self.value_dim < 1:
            raise ValueError("channel counts must be positive")

    @property
    def stride(self):
        return 2 ** len(self.widths)

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["widths"] = tuple(d["widths"])
        return cls(**d)

    def layer_shapes(self):
        """Ordered ``{name: shape}`` for every parameter tensor."""
        shapes = {}

        def conv(name, cout, cin, k):
            shapes[f"{name}.w"] = (cout, cin, k, k)
            shapes[f"{name}.b"] = (cout,)

        for net, cin, out_dim in (("E", self.image_channels, self.key_dim),
                                  ("V", self.image_channels + 1, self.value_dim)):
            prev = cin
            for i, w in enumerate(self.widths):
                conv(f"{net}.stage{i}", w, prev, 3)
                prev = w
            for r in range(self.res_blocks):
                conv(f"{net}.res{r}.a", prev, prev, 3)
                conv(f"{net}.res{r}.b", prev, prev, 3)
            conv(f"{net}.head.a", self.head_hidden, prev, 1)
            conv(f"{net}.head.b", out_dim, self.head_hidden, 1)

        dw = self.decoder_width
        conv("D.fuse", dw, 2 * self.value_dim, 1)
        levels = len(self.widths)
        for lvl in reversed(range(levels)):
            if lvl != levels - 1:
                conv(f"D.up{lvl}", dw, dw, 3)
            conv(f"D.skip{lvl}", dw, self.widths[lvl], 1)
            conv(f"D.res{lvl}.a", dw, dw, 3)
            conv(f"D.res{lvl}.b", dw, dw, 3)
        conv("D.out", 2, dw, 1)
        return shapes


@dataclass
class ModelParams:
    descriptor: ArchitectureDescriptor
    tensors: dict = field(default_factory=dict)
    version: str = FORMAT_VERSION

    def bind(self, requires_grad=True):
        """Wrap every tensor as an autograd leaf sharing the same buffer."""
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.tensors.items()}

    def astype(self, dtype):
        return ModelParams(self.descriptor, {k: v.astype(dtype) for k, v in self.tensors.items()}, self.version)

    def copy(self):
        return ModelParams(self.descriptor, {k: v.copy() for k, v in self.tensors.items()}, self.version)

    def validate(self):
        expected = self.descriptor.layer_shapes()
        if list(expected) != list(self.tensors):
            missing = [k for k in expected if k not in self.tensors]
            extra = [k for k in self.tensors if k not in expected]
            raise ValueError(f"parameter names do not match descriptor (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            arr = self.tensors[name]
            if arr.shape != shape:
                raise ValueError(f"tensor {name!r} has shape {arr.shape}, descriptor expects {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"tensor {name!r} has non-finite values")

    def num_parameters(self):
        return int(sum(v.size for v in self.tensors.values()))


def init_parameters(descriptor, seed, dtype=np.float32):
    """Fan-in scaled (He) normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in descriptor.layer_shapes().items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            if name == "D.out.w" or (".res" in name and name.endswith(".b.w")):
                # second conv of residual branches and the logit layer start small
                std *= 0.1
            tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return ModelParams(descriptor, tensors)


# ---------------------------------------------------------------- forward


def _params(params):
    if isinstance(params, ModelParams):
        return params.descriptor, params.bind(requires_grad=False)
    desc = params.get("__descriptor__")
    if desc is None:
        raise TypeError("bound parameter dicts must carry '__descriptor__'")
    return desc, params


def bind_for_training(params):
    """Bound leaves plus the descriptor entry the forward functions expect."""
    bound = params.bind(requires_grad=True)
    bound["__descriptor__"] = params.descriptor
    return bound


def _as_batch(x, dtype):
    if isinstance(x, Tensor):
        return x if x.ndim == 4 else ag.reshape(x, (1,) + x.shape)
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr if arr.ndim == 4 else arr[None])


def _conv(p, name, x, stride=1):
    k = p[f"{name}.w"].shape[-1]
    return ag.conv2d(x, p[f"{name}.w"], p[f"{name}.b"], stride=stride, padding=k // 2)


def _resblock(p, name, x):
    h = ag.relu(_conv(p, f"{name}.a", x))
    return ag.relu(x + _conv(p, f"{name}.b", h))


def _backbone(p, desc, net, x):
    skips = []
    for i in range(len(desc.widths)):
        x = ag.relu(_conv(p, f"{net}.stage{i}", x, stride=2))
        skips.append(x)
    for r in range(desc.res_blocks):
        x = _resblock(p, f"{net}.res{r}", x)
    head = _conv(p, f"{net}.head.b", ag.relu(_conv(p, f"{net}.head.a", x)))
    return head, x, skips


def _check_size(desc, h, w):
    s = desc.stride
    if h % s or w % s:
        raise ValueError(f"frame size {h}x{w} is not a multiple of the feature stride {s}")


@dataclass
class FeatureMap:
    """Per-cell embeddings ``(n, channels, h, w)`` plus the skip features the decoder needs."""

    tensor: Tensor
    stride: int
    normalized: bool = False
    skips: tuple = ()

    @property
    def channels(self):
        return self.tensor.shape[1]

    @property
    def grid(self):
        return self.tensor.shape[2:]


def encode_visual(params, frame):
    """E: frames ``(n, 3, H, W)`` (or one ``(3, H, W)``) to unit-norm keys at the feature stride.

    ``skips`` holds the per-stage activations, finest first.
    """
    desc, p = _params(params)
    x = _as_batch(frame, p["E.stage0.w"].dtype)
    if x.shape[1] != desc.image_channels:
        raise ValueError(f"expected {desc.image_channels} image channels, got {x.shape[1]}")
    _check_size(desc, x.shape[2], x.shape[3])
    head, _, skips = _backbone(p, desc, "E", x)
    key = ag.l2_normalize(head, axis=1)
    return FeatureMap(key, desc.stride, normalized=True, skips=tuple(skips))


def encode_frame_mask(params, frame, object_mask):
    """V: (frame, single-object probability map) pairs to D'-channel values."""
    desc, p = _params(params)
    dtype = p["V.stage0.w"].dtype
    x = _as_batch(frame, dtype)
    m = object_mask if isinstance(object_mask, Tensor) else Tensor(np.asarray(object_mask, dtype=dtype))
    md = m.data
    if md.min(initial=0.0) < 0.0 or md.max(initial=0.0) > 1.0:
        raise ValueError("object mask values must lie in [0, 1]")
    if m.ndim == 2:
        m = ag.reshape(m, (1, 1) + m.shape)
    elif m.ndim == 3:
        m = ag.reshape(m, (m.shape[0], 1) + m.shape[1:])
    if m.shape[2:] != x.shape[2:]:
        raise ValueError(f"mask size {m.shape[2:]} differs from frame size {x.shape[2:]}")
    if m.shape[0] != x.shape[0]:
        raise ValueError("frame and mask batch sizes differ")
    _check_size(desc, x.shape[2], x.shape[3])
    head, _, _ = _backbone(p, desc, "V", ag.concat([x, m], axis=1))
    return FeatureMap(head, desc.stride)


def decode_mask(params, fused, skips, out_size=None):
    """D: fused ``[V_q, V̄_q]`` features ``(n, 2D', h, w)`` to fg/bg logits at image resolution.

    Channel 0 is background, channel 1 foreground.
    """
    desc, p = _params(params)
    x = fused.tensor if isinstance(fused, FeatureMap) else fused
    if x.shape[1] != 2 * desc.value_dim:
        raise ValueError(f"decoder expects {2 * desc.value_dim} channels, got {x.shape[1]}")
    levels = len(desc.widths)
    if len(skips) != levels:
        raise ValueError(f"decoder expects {levels} skip tensors, got {len(skips)}")
    x = ag.relu(_conv(p, "D.fuse", x))
    for lvl in reversed(range(levels)):
        skip = skips[lvl]
        if skip.shape[0] != x.shape[0]:
            # one query frame decoded for several objects
            skip = ag.concat([skip] * (x.shape[0] // skip.shape[0]), axis=0)
        if lvl != levels - 1:
            x = ag.resize_bilinear(x, skip.shape[2], skip.shape[3])
            x = _conv(p, f"D.up{lvl}", x)
        x = ag.relu(x + _conv(p, f"D.skip{lvl}", skip))
        x = _resblock(p, f"D.res{lvl}", x)
    h, w = out_size if out_size is not None else (x.shape[2] * 2, x.shape[3] * 2)
    x = ag.resize_bilinear(x, h, w)
    return _conv(p, "D.out", x)
