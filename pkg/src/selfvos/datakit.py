"""Synthetic moving-shape videos, dataset I/O, clip sampling and augmentation.

Frames are float32 arrays ``(T, 3, H, W)`` in [0, 1], quantized to multiples
of 1/255 so that PNG round trips are exact. Label maps are ``(T, H, W)``
uint8 with 0 for background.
"""

import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

SHAPES = ("ellipse", "rectangle", "polygon")


class VideoSequence:
    """Ordered frames plus optional ground-truth label maps.

    Reads of :attr:`gt_masks` are counted in :attr:`gt_reads` so that training
    code can be audited for never touching annotations.
    """

    def __init__(self, id, frames, gt_masks=None, meta=None):
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 4 or frames.shape[1] != 3:
            raise ValueError(f"frames must be (T, 3, H, W), got {frames.shape}")
        if gt_masks is not None:
            gt_masks = np.asarray(gt_masks, dtype=np.uint8)
            if gt_masks.shape != (frames.shape[0],) + frames.shape[2:]:
                raise ValueError(f"mask shape {gt_masks.shape} does not match frames {frames.shape}")
        self.id = str(id)
        self.frames = frames
        self._gt = gt_masks
        self.meta = dict(meta or {})
        self.gt_reads = 0

    def __len__(self):
        return self.frames.shape[0]

    def __repr__(self):
        return f"VideoSequence({self.id!r}, frames={self.frames.shape}, gt={'yes' if self._gt is not None else 'no'})"

    @property
    def size(self):
        return self.frames.shape[2], self.frames.shape[3]

    @property
    def has_gt(self):
        return self._gt is not None

    @property
    def gt_masks(self):
        self.gt_reads += 1
        return self._gt

    @property
    def num_objects(self):
        return int(self._gt.max()) if self._gt is not None else 0

    def without_gt(self):
        return VideoSequence(self.id, self.frames, None, self.meta)


# ---------------------------------------------------------------- scene specs


@dataclass
class ObjectSpec:
    shape: str = "ellipse"
    radius_y: float = 10.0
    radius_x: float = 10.0
    sides: int = 5
    center_y: float = 32.0
    center_x: float = 32.0
    velocity_y: float = 0.0
    velocity_x: float = 0.0
    angle: float = 0.0
    rotation_rate: float = 0.0
    color: tuple = (0.8, 0.2, 0.2)
    texture_seed: int = 0

    def extent(self):
        """Radius of a circle containing the shape at any rotation."""
        if self.shape == "rectangle":
            return float(np.hypot(self.radius_y, self.radius_x))
        return max(self.radius_y, self.radius_x)

    def pose(self, t):
        return (self.center_y + self.velocity_y * t,
                self.center_x + self.velocity_x * t,
                self.angle + self.rotation_rate * t)


@dataclass
class SceneSpec:
    """Scene layout. Objects left empty are drawn from the generator seed."""

    height: int = 64
    width: int = 64
    num_objects: int = 2
    frame_count: int = 24
    shapes: tuple = SHAPES
    min_radius: float = 12.0
    max_radius: float = 18.0
    max_speed: float = 1.2
    max_rotation: float = 0.06
    occlusion: bool = True
    background_seed: int = 0
    background_contrast: float = 0.3
    objects: list = field(default_factory=list)

    def validate(self):
        if self.num_objects < 1:
            raise ValueError("a scene needs at least one object")
        if self.frame_count < 6:
            raise ValueError("frame_count must be >= 6 so distant pairs exist")
        if self.objects and len(self.objects) != self.num_objects:
            raise ValueError("objects list length differs from num_objects")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")
        limit = min(self.height, self.width) / 2.0
        radii = [o.extent() for o in self.objects] or [self.max_radius]
        if max(radii) * 1.0 >= limit:
            raise ValueError(f"object extent {max(radii)} does not fit a {self.height}x{self.width} canvas")


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse_like(default, text):
    if isinstance(default, bool):
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [x.strip() for x in text.split(",") if x.strip()]
        if default and isinstance(default[0], float):
            return tuple(float(x) for x in items)
        return tuple(items)
    return text


def scene_to_text(spec):
    lines = []
    for f in fields(SceneSpec):
        if f.name == "objects":
            continue
        lines.append(f"{f.name} = {_fmt(getattr(spec, f.name))}")
    for i, obj in enumerate(spec.objects):
        for f in fields(ObjectSpec):
            lines.append(f"object.{i}.{f.name} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def scene_from_text(text):
    base = SceneSpec()
    kw, objs = {}, {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"bad line {raw!r}: expected key = value")
        key, val = key.strip(), val.strip()
        m = re.fullmatch(r"object\.(\d+)\.(\w+)", key)
        if m:
            idx, name = int(m.group(1)), m.group(2)
            if name not in ObjectSpec.__dataclass_fields__:
                raise ValueError(f"unknown object key {name!r}")
            objs.setdefault(idx, {})[name] = _parse_like(getattr(ObjectSpec(), name), val)
        elif key in SceneSpec.__dataclass_fields__ and key != "objects":
            kw[key] = _parse_like(getattr(base, key), val)
        else:
            raise ValueError(f"unknown scene key {key!r}")
    spec = SceneSpec(**kw)
    if objs:
        spec.objects = [ObjectSpec(**objs[i]) for i in sorted(objs)]
    return spec


# ---------------------------------------------------------------- rendering


def _pixel_grid(h, w, mirror=False):
    ys = np.arange(h, dtype=np.float64) + 0.5
    xs = np.arange(w, dtype=np.float64) + 0.5
    if mirror:
        xs = w - xs
    return np.meshgrid(ys, xs, indexing="ij")


def _local(obj, t, gy, gx):
    cy, cx, ang = obj.pose(t)
    dy, dx = gy - cy, gx - cx
    c, s = np.cos(ang), np.sin(ang)
    return c * dx + s * dy, -s * dx + c * dy   # (u along object x, v along object y)


def shape_mask(obj, t, gy, gx):
    """Boolean coverage of ``obj`` at time ``t`` sampled at points ``(gy, gx)``."""
    u, v = _local(obj, t, gy, gx)
    if obj.shape == "ellipse":
        return (u / obj.radius_x) ** 2 + (v / obj.radius_y) ** 2 <= 1.0
    if obj.shape == "rectangle":
        return (np.abs(u) <= obj.radius_x) & (np.abs(v) <= obj.radius_y)
    if obj.shape == "polygon":
        # regular convex polygon scaled anisotropically: inside every edge half-plane
        n = max(3, int(obj.sides))
        uu, vv = u / obj.radius_x, v / obj.radius_y
        inside = np.ones_like(uu, dtype=bool)
        apothem = np.cos(np.pi / n)
        for k in range(n):
            a = 2 * np.pi * (k + 0.5) / n
            inside &= uu * np.cos(a) + vv * np.sin(a) <= apothem
        return inside
    raise ValueError(f"unknown shape {obj.shape!r}")


def _texture(obj, t, gy, gx):
    """Saturated base colour modulated in brightness by a pattern fixed to the object."""
    rng = np.random.default_rng(obj.texture_seed)
    u, v = _local(obj, t, gy, gx)
    base = np.asarray(obj.color, dtype=np.float64)
    f1, f2 = rng.uniform(0.5, 1.0, 2)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    w = 0.5 + 0.25 * np.sin(f1 * u + p1) + 0.25 * np.sin(f2 * v + p2)
    return base[:, None, None] * (0.55 + 0.45 * w)


def _background(spec, gy, gx):
    """Static, weakly tinted texture: mostly luminance structure plus soft blobs."""
    rng = np.random.default_rng(spec.background_seed)
    tint = rng.uniform(-0.05, 0.05, 3)
    mean = rng.uniform(0.35, 0.6)
    lum = np.zeros(gy.shape)
    for _ in range(6):
        fy, fx = rng.uniform(-0.4, 0.4, 2)
        lum += rng.uniform(0.03, 0.08) * np.sin(fy * gy + fx * gx + rng.uniform(0, 2 * np.pi))
    for _ in range(5):
        cy, cx = rng.uniform(0, spec.height), rng.uniform(0, spec.width)
        r = rng.uniform(3, 7)
        lum += rng.uniform(-0.2, 0.2) * np.exp(-((gy - cy) ** 2 + (gx - cx) ** 2) / (2 * r * r))
    return mean + spec.background_contrast * lum[None] + tint[:, None, None]


def render_scene(spec, mirror=False):
    """Render frames and label maps; ``mirror`` evaluates the scene in x-flipped pixel coordinates."""
    gy, gx = _pixel_grid(spec.height, spec.width, mirror)
    bg = _background(spec, gy, gx)
    T = spec.frame_count
    frames = np.empty((T, 3, spec.height, spec.width), dtype=np.float64)
    labels = np.zeros((T, spec.height, spec.width), dtype=np.uint8)
    for t in range(T):
        img = bg.copy()
        lab = labels[t]
        for k, obj in enumerate(spec.objects, start=1):   # later objects are in front
            m = shape_mask(obj, t, gy, gx)
            img[:, m] = _texture(obj, t, gy, gx)[:, m]
            lab[m] = k
        frames[t] = img
    frames = np.round(np.clip(frames, 0, 1) * 255) / 255
    return frames.astype(np.float32), labels


def overlap_frames(spec):
    """Frames in which at least two objects' analytic shapes cover a common pixel."""
    gy, gx = _pixel_grid(spec.height, spec.width)
    out = []
    for t in range(spec.frame_count):
        cover = sum(shape_mask(o, t, gy, gx).astype(np.int32) for o in spec.objects)
        if np.any(cover >= 2):
            out.append(t)
    return out


def _sample_objects(spec, rng):
    H, W, T = spec.height, spec.width, spec.frame_count
    objs = []
    hue0 = rng.uniform(0, 1)
    for k in range(spec.num_objects):
        shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
        ry, rx = rng.uniform(spec.min_radius, spec.max_radius, 2)
        if shape == "rectangle":
            ry, rx = ry / np.sqrt(2), rx / np.sqrt(2)
        r = min(ObjectSpec(shape, ry, rx).extent(), min(H, W) / 2 - 1)
        room_y, room_x = H - 2 * r, W - 2 * r
        vy, vx = rng.uniform(-spec.max_speed, spec.max_speed, 2)
        # shrink velocity so the whole trajectory stays on canvas
        vy = np.sign(vy) * min(abs(vy), room_y / (T - 1))
        vx = np.sign(vx) * min(abs(vx), room_x / (T - 1))
        lo_y = r + max(0.0, -vy * (T - 1))
        hi_y = H - r - max(0.0, vy * (T - 1))
        lo_x = r + max(0.0, -vx * (T - 1))
        hi_x = W - r - max(0.0, vx * (T - 1))
        cy = rng.uniform(lo_y, max(lo_y, hi_y))
        cx = rng.uniform(lo_x, max(lo_x, hi_x))
        # hues spread evenly around the wheel, jittered, so objects differ from each other
        hue = (hue0 + (k + rng.uniform(-0.15, 0.15)) / spec.num_objects) % 1.0
        color = tuple(float(c) for c in _hsv_to_rgb(hue, rng.uniform(0.75, 1.0), rng.uniform(0.8, 1.0)))
        objs.append(ObjectSpec(
            shape=shape, radius_y=float(ry), radius_x=float(rx), sides=int(rng.integers(3, 7)),
            center_y=float(cy), center_x=float(cx), velocity_y=float(vy), velocity_x=float(vx),
            angle=float(rng.uniform(0, np.pi)),
            rotation_rate=float(rng.uniform(-spec.max_rotation, spec.max_rotation)),
            color=color, texture_seed=int(rng.integers(2 ** 31))))
    return objs


def _hsv_to_rgb(h, s, v):
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def generate_synthetic_video(spec, seed, video_id=None, max_attempts=200):
    """Deterministic video for ``(spec, seed)``; every object is visible in frame 0."""
    spec.validate()
    rng = np.random.default_rng(seed)
    fixed = bool(spec.objects)
    for _ in range(max_attempts):
        scene = spec if fixed else replace(spec, objects=_sample_objects(spec, rng),
                                           background_seed=int(rng.integers(2 ** 31)))
        frames, labels = render_scene(scene)
        visible = all(np.any(labels[0] == k) for k in range(1, scene.num_objects + 1))
        occl = overlap_frames(scene)
        if visible and (spec.occlusion or not occl):
            meta = {"seed": seed, "occlusion_frames": occl, "scene": scene}
            return VideoSequence(video_id or f"synth{seed:05d}", frames, labels, meta)
        if fixed:
            break
    raise ValueError("could not place objects satisfying the scene constraints")


# ---------------------------------------------------------------- dataset I/O


def save_video(video, root):
    """Write ``<root>/<id>/frames/%05d.png`` and, when present, ``masks/%05d.png``."""
    vdir = Path(root) / video.id
    (vdir / "frames").mkdir(parents=True, exist_ok=True)
    for t in range(len(video)):
        img = np.round(video.frames[t].transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(img, "RGB").save(vdir / "frames" / f"{t:05d}.png")
    if video.has_gt:
        write_label_maps(video.gt_masks, vdir / "masks")
    return vdir


def write_label_maps(labels, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, lab in enumerate(labels):
        Image.fromarray(np.asarray(lab, dtype=np.uint8), "L").save(directory / f"{t:05d}.png")


def numbered_files(directory):
    files = {}
    for p in Path(directory).glob("*.png"):
        if p.stem.isdigit():
            files[int(p.stem)] = p
    return files


def read_label_maps(directory, count=None):
    files = numbered_files(directory)
    n = count if count is not None else (max(files) + 1 if files else 0)
    missing = [i for i in range(n) if i not in files]
    if missing:
        raise FileNotFoundError(f"{directory}: missing label index {missing[0]}")
    return np.stack([np.asarray(Image.open(files[i]).convert("L")) for i in range(n)]) if n else \
        np.zeros((0, 0, 0), np.uint8)


def load_video(path, with_masks=True):
    """Load a frame directory (and masks, when present) as a :class:`VideoSequence`."""
    path = Path(path)
    frames_dir = path / "frames"
    files = numbered_files(frames_dir)
    if not files:
        raise FileNotFoundError(f"{frames_dir}: no numbered frames")
    n = max(files) + 1
    missing = [i for i in range(n) if i not in files]
    if missing:
        raise FileNotFoundError(f"{frames_dir}: missing frame index {missing[0]}")
    frames = np.stack([np.asarray(Image.open(files[i]).convert("RGB")) for i in range(n)])
    frames = frames.transpose(0, 3, 1, 2).astype(np.float32) / 255.0
    masks = None
    mdir = path / "masks"
    if with_masks and mdir.is_dir() and numbered_files(mdir):
        masks = read_label_maps(mdir, n)
        if masks.shape[1:] != frames.shape[2:]:
            raise ValueError(f"{mdir}: mask size {masks.shape[1:]} differs from frame size {frames.shape[2:]}")
    return VideoSequence(path.name, frames, masks)


def list_videos(root):
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "frames").is_dir())


def load_dataset(root, with_masks=True):
    return [load_video(Path(root) / vid, with_masks) for vid in list_videos(root)]


# ---------------------------------------------------------------- clips


@dataclass
class Clip:
    video_id: str
    indices: list                 # sampled frame indices, temporal order
    reference_frames: list        # [(frame, label map)], length n_refs
    query_frame: np.ndarray
    query_mask: np.ndarray
    aux_pair: tuple               # (frame_t, frame_t+1)
    distant_pair: tuple           # (frame_t, frame_t')
    aux_indices: tuple = ()
    distant_indices: tuple = ()
    num_objects: int = 0


def sample_training_clip(video, masks, n_frames=3, n_refs=2, rng=None):
    """Draw ``n_frames`` ordered frames (first ``n_refs`` references, last query) plus loss pairs.

    ``masks`` is a ``(T, H, W)`` label array (pseudo masks) or ``None`` when only
    the correspondence pairs are needed.
    """
    rng = rng if rng is not None else np.random.default_rng()
    T = len(video)
    if T < n_frames:
        raise ValueError(f"video {video.id} has {T} frames, clip needs {n_frames}")
    if not 1 <= n_refs < n_frames:
        raise ValueError("need 1 <= n_refs < n_frames")
    idx = sorted(int(i) for i in rng.choice(T, size=n_frames, replace=False))
    labels = None if masks is None else np.asarray(masks)
    ref = [(video.frames[i], None if labels is None else labels[i]) for i in idx[:n_refs]]
    q = idx[-1]
    t = int(rng.integers(T - 1))
    aux = (t, t + 1)
    if T > 5:
        pairs_t = int(rng.integers(T))
        far = [u for u in range(T) if abs(u - pairs_t) >= 5]
        while not far:
            pairs_t = int(rng.integers(T))
            far = [u for u in range(T) if abs(u - pairs_t) >= 5]
        dist = (pairs_t, int(far[rng.integers(len(far))]))
    else:
        dist = (0, T - 1)
    return Clip(video.id, idx, ref, video.frames[q], None if labels is None else labels[q],
                (video.frames[aux[0]], video.frames[aux[1]]),
                (video.frames[dist[0]], video.frames[dist[1]]), aux, dist,
                0 if labels is None else int(labels.max()))


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class ImageTransform:
    """Scale by ``scale`` (bilinear frames / nearest masks), crop ``out_size`` at (top, left), optional flip."""

    scale: float = 1.0
    top: int = 0
    left: int = 0
    out_size: tuple = (64, 64)
    flip: bool = False


@dataclass(frozen=True)
class AugmentConfig:
    scale_range: tuple = (0.8, 1.25)
    min_crop_area: float = 0.75
    flip_prob: float = 0.5
    out_size: tuple = (64, 64)


def sample_image_transform(in_size, cfg, rng):
    """Random scale → crop → flip, keeping the crop inside the scaled image and ≥ ``min_crop_area`` of it."""
    H, W = in_size
    oh, ow = cfg.out_size
    lo = max(cfg.scale_range[0], oh / H, ow / W)
    hi = min(cfg.scale_range[1], np.sqrt(oh * ow / (cfg.min_crop_area * H * W)))
    s = float(rng.uniform(lo, hi)) if hi > lo else lo
    sh, sw = int(round(H * s)), int(round(W * s))
    top = int(rng.integers(sh - oh + 1))
    left = int(rng.integers(sw - ow + 1))
    return ImageTransform(s, top, left, (oh, ow), bool(rng.random() < cfg.flip_prob))


def _resize(img, sh, sw, nearest):
    h, w = img.shape[-2:]
    if (sh, sw) == (h, w):
        return img
    zoom = (1,) * (img.ndim - 2) + (sh / h, sw / w)
    if nearest:
        ys = np.minimum(((np.arange(sh) + 0.5) * h / sh).astype(int), h - 1)
        xs = np.minimum(((np.arange(sw) + 0.5) * w / sw).astype(int), w - 1)
        return img[..., ys[:, None], xs[None, :]]
    out = ndimage.zoom(img, zoom, order=1, mode="nearest", grid_mode=True)
    return out[..., :sh, :sw].astype(img.dtype)


def transform_image(tf, img, nearest=False):
    """Apply an :class:`ImageTransform` to ``(..., H, W)`` data."""
    H, W = img.shape[-2:]
    sh, sw = int(round(H * tf.scale)), int(round(W * tf.scale))
    oh, ow = tf.out_size
    if tf.top < 0 or tf.left < 0 or tf.top + oh > sh or tf.left + ow > sw:
        raise ValueError(f"crop window {tf.top},{tf.left},{oh}x{ow} outside scaled image {sh}x{sw}")
    out = _resize(img, sh, sw, nearest)[..., tf.top:tf.top + oh, tf.left:tf.left + ow]
    if tf.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment(clip, params=None, rng=None, config=AugmentConfig()):
    """Apply one geometric transform to every frame and label map of a clip.

    With ``params`` unset, a transform is drawn from ``config`` using ``rng``.
    """
    tf = params if params is not None else sample_image_transform(clip.query_frame.shape[-2:], config, rng)
    fr = lambda x: transform_image(tf, x).astype(np.float32)
    mk = lambda m: None if m is None else transform_image(tf, m, nearest=True)
    return replace(
        clip,
        reference_frames=[(fr(f), mk(m)) for f, m in clip.reference_frames],
        query_frame=fr(clip.query_frame),
        query_mask=mk(clip.query_mask),
        aux_pair=tuple(fr(f) for f in clip.aux_pair),
        distant_pair=tuple(fr(f) for f in clip.distant_pair),
    )
