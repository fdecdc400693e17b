"""Mask-embedded segmentation learning and the alternating two-stage schedule.

Stage 1 trains the visual encoder with the two correspondence losses only.
Stage 2 clusters every video into pseudo masks, then trains all three
networks on the full loss, re-clustering every ``recluster_period`` epochs.
"""

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import correspond as corr
from .cluster import cluster_video, derive_pseudo_masks
from .propagate import aggregate_objects
from .datakit import AugmentConfig, augment, sample_training_clip, write_label_maps
from .netcore import autograd as ag
from .netcore import (
    ArchitectureDescriptor,
    bind_for_training,
    decode_mask,
    encode_frame_mask,
    encode_visual,
    init_parameters,
)
from .netcore.checkpoint import load_checkpoint, read_container, save_checkpoint, write_container

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda1: float = 0.1
    lambda2: float = 0.5
    stage1_epochs: int = 60
    stage2_epochs: int = 40
    recluster_period: int = 10
    lr_stage1: float = 1e-4
    lr_stage2: float = 1e-3
    lr_decay: float = 0.5
    lr_decay_every: int = 20
    batch_size: int = 4
    clips_per_video: int = 1
    n_frames: int = 3
    n_refs: int = 2
    num_clusters: int = 5
    pe_weight: float = 0.1
    pe_dims: int = 8
    prune_threshold: float = 0.40
    kmeans_iters: int = 100
    kmeans_restarts: int = 4
    temperature: float = 0.07
    max_objects: int = 3
    train_rounds: int = 3
    loss_crop_min: float = 0.75
    loss_flip_prob: float = 0.5
    augment: bool = True
    image_size: int = 64
    widths: tuple = (16, 32)
    res_blocks: int = 1
    key_dim: int = 128
    value_dim: int = 512
    head_hidden: int = 64
    decoder_width: int = 32
    seed: int = 0

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.recluster_period < 1:
            raise ValueError("recluster_period must be >= 1")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        for name in ("lr_stage1", "lr_stage2", "batch_size", "clips_per_video", "lr_decay_every",
                     "num_clusters", "kmeans_iters", "kmeans_restarts", "train_rounds", "temperature", "image_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 1 <= self.n_refs < self.n_frames:
            raise ValueError("need 1 <= n_refs < n_frames")

    def descriptor(self):
        return ArchitectureDescriptor(widths=tuple(self.widths), res_blocks=self.res_blocks,
                                      key_dim=self.key_dim, value_dim=self.value_dim,
                                      head_hidden=self.head_hidden, decoder_width=self.decoder_width)

    @property
    def total_epochs(self):
        return self.stage1_epochs + self.stage2_epochs

    def to_text(self):
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(out) + "\n"

    @classmethod
    def from_text(cls, text):
        return cls().override(parse_config_text(text))

    def override(self, mapping):
        """New config with string or typed overrides; unknown keys are rejected."""
        known = {f.name: f for f in fields(self)}
        kw = asdict(self)
        for k, v in mapping.items():
            k = k.replace("-", "_")
            if k not in known:
                raise KeyError(f"unknown config key {k!r}")
            kw[k] = _coerce_like(getattr(self, k), v)
        cfg = TrainConfig(**kw)
        cfg.validate()
        return cfg


def parse_config_text(text):
    out = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ValueError(f"bad config line {raw!r}")
        out[k.strip()] = v.strip()
    return out


def _coerce_like(default, v):
    if not isinstance(v, str):
        return tuple(v) if isinstance(default, tuple) else type(default)(v)
    if isinstance(default, bool):
        return v.lower() in ("1", "true", "yes")
    if isinstance(default, tuple):
        return tuple(int(x) for x in v.split(",") if x.strip())
    return type(default)(v)


# ---------------------------------------------------------------- losses


def total_loss(l_seg, l_short, l_long, lambda1=0.1, lambda2=0.5):
    """``L_Seg + λ1·L_Short + λ2·L_Long``; works on floats and on Tensors."""
    for name, v in (("L_Seg", l_seg), ("L_Short", l_short), ("L_Long", l_long)):
        val = v.data if isinstance(v, ag.Tensor) else v
        if not np.all(np.isfinite(val)):
            raise FloatingPointError(f"{name} is not finite ({val})")
    return l_seg + lambda1 * l_short + lambda2 * l_long


def sample_loss_transform(h, w, cfg, rng):
    """Random integer-cell crop (≥ ``loss_crop_min`` per side) followed by an optional flip."""
    ch = int(rng.integers(max(1, math.ceil(cfg.loss_crop_min * h)), h + 1))
    cw = int(rng.integers(max(1, math.ceil(cfg.loss_crop_min * w)), w + 1))
    top = int(rng.integers(h - ch + 1))
    left = int(rng.integers(w - cw + 1))
    parts = [corr.TransformParams("crop", top, left, ch, cw)]
    if rng.random() < cfg.loss_flip_prob:
        parts.append(corr.TransformParams("flip_h"))
    return corr.compose(*parts)


def correspondence_losses(bound, clip, cfg, rng, dtype=np.float32):
    """``(L_Short, L_Long)`` for one clip's adjacent and distant frame pairs."""
    stride = bound["__descriptor__"].stride
    tau = cfg.temperature
    f_t, f_t1 = clip.aux_pair
    d_t, d_tp = clip.distant_pair
    h, w = f_t.shape[1] // stride, f_t.shape[2] // stride

    full = encode_visual(bound, np.stack([f_t1, d_tp, d_t]).astype(dtype)).tensor
    phi_s = sample_loss_transform(h, w, cfg, rng)
    phi_l = sample_loss_transform(h, w, cfg, rng)
    x_t_prime = encode_visual(bound, corr.apply_transform(phi_s.at_stride(stride), f_t).astype(dtype)).tensor
    x_t1 = corr.apply_transform(phi_s, full[0])
    l_short = corr.loss_short(corr.grid_to_matrix(x_t_prime), corr.grid_to_matrix(x_t1), tau)

    x_tp_prime = encode_visual(bound, corr.apply_transform(phi_l.at_stride(stride), d_tp).astype(dtype)).tensor
    x_tp = corr.grid_to_matrix(corr.apply_transform(phi_l, full[1]))
    i_t = corr.grid_to_matrix(full[2])
    o = corr.pseudo_match(corr.grid_to_matrix(x_tp_prime).data, i_t.data, tau)
    l_long = corr.loss_long(x_tp, i_t, o, tau)
    return l_short, l_long


def _choose_objects(clip, max_objects, rng):
    present = set()
    for _, m in clip.reference_frames:
        present.update(int(v) for v in np.unique(m) if v)
    ids = sorted(present)
    if len(ids) > max_objects:
        ids = sorted(int(i) for i in rng.choice(ids, size=max_objects, replace=False))
    return ids


def segmentation_step(bound, clip, cfg=None, rng=None, object_ids=None, dtype=np.float32):
    """Cross-entropy of the refined query prediction against the query's (pseudo) label map.

    Returns ``None`` when the references hold no object.
    """
    cfg = cfg or TrainConfig()
    if clip.query_mask is None or any(m is None for _, m in clip.reference_frames):
        raise ValueError("segmentation needs masks for the references and the query")
    rng = rng if rng is not None else np.random.default_rng(0)
    ids = object_ids if object_ids is not None else _choose_objects(clip, cfg.max_objects, rng)
    if not ids:
        return None
    desc = bound["__descriptor__"]
    stride = desc.stride
    tau = cfg.temperature
    ref_frames = np.stack([f for f, _ in clip.reference_frames]).astype(dtype)
    ref_labels = np.stack([m for _, m in clip.reference_frames])
    N = ref_frames.shape[0]
    H, W = ref_frames.shape[2:]
    h, w = H // stride, W // stride
    K = len(ids)

    keys = encode_visual(bound, np.concatenate([ref_frames, clip.query_frame[None].astype(dtype)]))
    k_r = corr.grid_to_matrix(keys.tensor[0:N])
    k_q = corr.grid_to_matrix(keys.tensor[N:N + 1])
    A = corr.affinity(k_r, k_q, tau)                                 # (N*h*w, h*w)
    q_skips = [s[N:N + 1] for s in keys.skips]

    # per object binary reference masks, object-major: (K*N, H, W)
    obj_masks = np.stack([(ref_labels == k) for k in ids]).astype(dtype)
    v_r = encode_frame_mask(bound, np.concatenate([ref_frames] * K), obj_masks.reshape(K * N, H, W)).tensor
    v_r = ag.reshape(ag.transpose(ag.reshape(v_r, (K, N, desc.value_dim, h, w)), (0, 1, 3, 4, 2)),
                     (K, N * h * w, desc.value_dim))
    v_q = ag.matmul(A.T, v_r)                                        # (K, h*w, D')

    small = obj_masks.reshape(K, N, h, stride, w, stride).mean(axis=(3, 5)).reshape(K, N * h * w)
    coarse = ag.matmul(ag.Tensor(small), A)                          # (K, h*w) = (A^T y)^T
    coarse_full = ag.resize_bilinear(ag.reshape(coarse, (K, h, w)), H, W)
    query = np.repeat(clip.query_frame[None].astype(dtype), K, axis=0)
    v_q_grid = ag.transpose(ag.reshape(v_q, (K, h, w, desc.value_dim)), (0, 3, 1, 2))

    # Rounds before the supervised one run on detached copies, so the decoder
    # also learns from its own earlier output as it will see at inference.
    rounds = int(rng.integers(1, cfg.train_rounds + 1)) if cfg.train_rounds > 1 else 1
    mask_in = coarse_full
    for _ in range(rounds - 1):
        v_bar = encode_frame_mask(bound, query, ag.Tensor(mask_in.data)).tensor
        out = decode_mask(bound, ag.concat([ag.Tensor(v_q_grid.data), ag.Tensor(v_bar.data)], axis=1),
                          [ag.Tensor(s.data) for s in q_skips], (H, W)).data
        fg = 1.0 / (1.0 + np.exp(np.clip(out[:, 0] - out[:, 1], -60, 60)))
        mask_in = ag.Tensor(aggregate_objects(fg)[1:].astype(dtype))
    v_bar = encode_frame_mask(bound, query, mask_in).tensor
    logits = decode_mask(bound, ag.concat([v_q_grid, v_bar], axis=1), q_skips, (H, W))
    target = np.stack([(clip.query_mask == k) for k in ids]).astype(np.int64)
    return cross_entropy(logits, target)


def cross_entropy(logits, target):
    """Mean fg/bg cross-entropy; ``logits`` ``(K, 2, H, W)``, ``target`` ``(K, H, W)`` in {0, 1}."""
    logp = ag.log_softmax(logits, axis=1)
    K, _, H, W = logits.shape
    kk, yy, xx = np.meshgrid(np.arange(K), np.arange(H), np.arange(W), indexing="ij")
    return -ag.mean(ag.getitem(logp, (kk, target, yy, xx)))


def clip_losses(bound, clip, cfg, rng, use_seg=True, dtype=np.float32):
    l_short, l_long = correspondence_losses(bound, clip, cfg, rng, dtype)
    l_seg = segmentation_step(bound, clip, cfg, rng, dtype=dtype) if use_seg else None
    return l_seg, l_short, l_long


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, shapes, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(s, np.float32) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, np.float32) for k, s in shapes.items()}
        self.t = 0

    def step(self, tensors, grads, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for k, g in grads.items():
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            tensors[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(tensors[k].dtype)

    def state(self):
        out = {f"m/{k}": v for k, v in self.m.items()}
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load(self, tensors, t):
        for k in self.m:
            self.m[k] = tensors[f"m/{k}"].copy()
            self.v[k] = tensors[f"v/{k}"].copy()
        self.t = t


# ---------------------------------------------------------------- schedule


@dataclass
class TrainState:
    epoch: int
    params: object
    optimizer: Adam
    pseudo: dict = field(default_factory=dict)        # video id -> PseudoMaskSet
    pseudo_history: list = field(default_factory=list)  # [(epoch, {video id: PseudoMaskSet})]
    history: list = field(default_factory=list)         # per-epoch loss rows


def learning_rate(cfg, epoch):
    """Step decay in stage 1; fixed rate in stage 2 (epochs are 1-based)."""
    if epoch <= cfg.stage1_epochs:
        return cfg.lr_stage1 * cfg.lr_decay ** ((epoch - 1) // cfg.lr_decay_every)
    return cfg.lr_stage2


def is_recluster_epoch(cfg, epoch):
    if epoch <= cfg.stage1_epochs:
        return False
    return (epoch - cfg.stage1_epochs - 1) % cfg.recluster_period == 0


def update_pseudo_labels(params, videos, cfg, epoch=0):
    """Re-cluster every video with the current encoder.

    Returns a fresh ``{video id: PseudoMaskSet}``; callers swap it in only once
    complete. A video that fails is skipped with a warning.
    """
    out = {}
    for i, video in enumerate(videos):
        try:
            state = cluster_video(video, params, cfg.num_clusters, cfg.pe_weight,
                                  seed=cfg.seed * 7919 + i, max_iters=cfg.kmeans_iters, pe_dims=cfg.pe_dims,
                                  n_init=cfg.kmeans_restarts)
            out[video.id] = derive_pseudo_masks(state, prune_threshold=cfg.prune_threshold,
                                                image_size=video.size, epoch=epoch)
        except (ValueError, FloatingPointError) as exc:
            log.warning("clustering failed for %s: %s", video.id, exc)
    return out


def _epoch_clips(videos, pseudo, cfg, rng, use_seg):
    items = []
    for _ in range(cfg.clips_per_video):
        for v in videos:
            ps = pseudo.get(v.id) if use_seg else None
            masks = ps.labels if ps is not None and not ps.empty else None
            items.append((v, masks))
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def train_epoch(state, videos, cfg):
    epoch = state.epoch + 1
    rng = np.random.default_rng([cfg.seed, epoch])
    use_seg = epoch > cfg.stage1_epochs
    lr = learning_rate(cfg, epoch)
    aug_cfg = AugmentConfig(out_size=(cfg.image_size, cfg.image_size))
    sums = {"L_Seg": [], "L_Short": [], "L_Long": [], "total": []}
    items = _epoch_clips(videos, state.pseudo, cfg, rng, use_seg)
    for b in range(0, len(items), cfg.batch_size):
        batch = items[b:b + cfg.batch_size]
        bound = bind_for_training(state.params)
        terms = []
        for video, masks in batch:
            clip = sample_training_clip(video, masks, cfg.n_frames, cfg.n_refs, rng)
            if cfg.augment:
                clip = augment(clip, rng=rng, config=aug_cfg)
            seg_on = use_seg and masks is not None
            l_seg, l_short, l_long = clip_losses(bound, clip, cfg, rng, use_seg=seg_on)
            if l_seg is None:
                l_seg = 0.0
            else:
                sums["L_Seg"].append(float(l_seg.data))
            tot = total_loss(l_seg, l_short, l_long, cfg.lambda1, cfg.lambda2)
            sums["L_Short"].append(float(l_short.data))
            sums["L_Long"].append(float(l_long.data))
            sums["total"].append(float(tot.data))
            terms.append(tot)
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(terms))
        loss.backward()
        grads = {k: t.grad for k, t in bound.items() if k != "__descriptor__"}
        for k, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {k} at epoch {epoch}")
        state.optimizer.step(state.params.tensors, grads, lr)
    row = {"epoch": epoch, "lr": lr}
    for k, vals in sums.items():
        row[k] = float(np.mean(vals)) if vals else float("nan") if k == "L_Seg" else 0.0
    state.history.append(row)
    state.epoch = epoch
    return row


def _refresh(state, videos, cfg, epoch, pseudo_root=None):
    fresh = update_pseudo_labels(state.params, videos, cfg, epoch)
    if not fresh or all(p.empty for p in fresh.values()):
        raise RuntimeError(
            f"epoch {epoch}: every video produced zero pseudo objects "
            f"(M={cfg.num_clusters}, prune_threshold={cfg.prune_threshold}); cannot train segmentation")
    state.pseudo = fresh
    state.pseudo_history.append((epoch, fresh))
    if pseudo_root is not None:
        for vid, ps in fresh.items():
            write_label_maps(ps.labels, Path(pseudo_root) / vid / f"{epoch:04d}")


def init_state(cfg):
    params = init_parameters(cfg.descriptor(), cfg.seed)
    shapes = {k: v.shape for k, v in params.tensors.items()}
    return TrainState(0, params, Adam(shapes))


def train(cfg, videos, workdir=None, pseudo_root=None, resume=True, final_refresh=True, on_epoch=None):
    """Run the two-stage schedule; returns the final :class:`TrainState`.

    With ``workdir`` set, a checkpoint, the optimizer state and the loss CSV
    are written after every epoch, and an existing run there is resumed.
    """
    cfg.validate()
    if not videos:
        raise ValueError("training needs at least one video")
    state = None
    if workdir is not None:
        workdir = Path(workdir)
        workdir.mkdir(parents=True, exist_ok=True)
        (workdir / "config.txt").write_text(cfg.to_text())
        if resume and (workdir / "state.json").exists():
            state = load_train_state(workdir, cfg, videos)
            log.info("resuming from epoch %d", state.epoch)
    if state is None:
        state = init_state(cfg)
    while state.epoch < cfg.total_epochs:
        epoch = state.epoch + 1
        if epoch == cfg.stage1_epochs + 1:
            # new stage: fresh optimizer moments
            state.optimizer = Adam({k: v.shape for k, v in state.params.tensors.items()})
        if is_recluster_epoch(cfg, epoch):
            _refresh(state, videos, cfg, epoch, pseudo_root)
        t0 = time.perf_counter()
        row = train_epoch(state, videos, cfg)
        row["seconds"] = time.perf_counter() - t0
        log.info("epoch %d  lr %.2g  seg %.4f  short %.4f  long %.4f  (%.1fs)", epoch, row["lr"],
                 row["L_Seg"], row["L_Short"], row["L_Long"], row["seconds"])
        if workdir is not None:
            save_train_state(workdir, state)
        if on_epoch is not None:
            on_epoch(state, row)
    if final_refresh and cfg.stage2_epochs > 0 and state.pseudo_history \
            and state.pseudo_history[-1][0] != state.epoch + 1:
        final = update_pseudo_labels(state.params, videos, cfg, state.epoch + 1)
        state.pseudo_history.append((state.epoch + 1, final))
        if pseudo_root is not None:
            for vid, ps in final.items():
                write_label_maps(ps.labels, Path(pseudo_root) / vid / f"{state.epoch + 1:04d}")
    return state


# ---------------------------------------------------------------- persistence

CSV_FIELDS = ["epoch", "L_Seg", "L_Short", "L_Long", "total", "lr", "seconds"]


def write_loss_csv(history, path):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        wr.writeheader()
        for row in history:
            wr.writerow(row)


def save_train_state(workdir, state):
    workdir = Path(workdir)
    save_checkpoint(state.params, workdir / "model.ckpt", {"epoch": state.epoch})
    write_container(workdir / "optimizer.ckpt", state.optimizer.state(), {"t": state.optimizer.t})
    pseudo = {f"{vid}": ps.labels.astype(np.float32) for vid, ps in state.pseudo.items()}
    write_container(workdir / "pseudo.ckpt", pseudo, {
        "survivors": {vid: ps.survivors for vid, ps in state.pseudo.items()},
        "epochs": {vid: ps.epoch for vid, ps in state.pseudo.items()},
    })
    write_loss_csv(state.history, workdir / "losses.csv")
    meta = {"epoch": state.epoch, "history": state.history,
            "pseudo_epochs": [e for e, _ in state.pseudo_history]}
    tmp = workdir / "state.json.tmp"
    tmp.write_text(json.dumps(meta))
    tmp.replace(workdir / "state.json")


def load_train_state(workdir, cfg, videos):
    from .cluster import PseudoMaskSet

    workdir = Path(workdir)
    meta = json.loads((workdir / "state.json").read_text())
    params = load_checkpoint(workdir / "model.ckpt", cfg.descriptor())
    opt_tensors, opt_meta = read_container(workdir / "optimizer.ckpt")
    opt = Adam({k: v.shape for k, v in params.tensors.items()})
    opt.load(opt_tensors, int(opt_meta["t"]))
    ps_tensors, ps_meta = read_container(workdir / "pseudo.ckpt")
    pseudo = {}
    for vid, lab in ps_tensors.items():
        surv = ps_meta["survivors"][vid]
        pseudo[vid] = PseudoMaskSet(lab.astype(np.uint8), surv, [], ps_meta["epochs"][vid], not surv)
    state = TrainState(int(meta["epoch"]), params, opt, pseudo, [], meta["history"])
    return state
