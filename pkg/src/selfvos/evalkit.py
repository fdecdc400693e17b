"""Region similarity J, boundary F-measure, aggregate reports and per-frame curves."""

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .datakit import numbered_files, read_label_maps


class InventoryMismatch(ValueError):
    """Prediction and ground-truth trees disagree on videos, frames or sizes."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("inventory mismatch:\n  " + "\n  ".join(self.problems))


def _check_pair(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def _check_id(pred, gt, object_id, num_objects):
    if int(object_id) != object_id or object_id < 1:
        raise ValueError(f"object id must be a positive integer, got {object_id}")
    if num_objects is not None:
        if object_id > num_objects:
            raise ValueError(f"unknown object id {object_id} (video has {num_objects} objects)")
    elif not (np.any(pred == object_id) or np.any(gt == object_id)):
        raise ValueError(f"unknown object id {object_id}: absent from both label maps")


def region_similarity(pred_labels, gt_labels, object_id, num_objects=None):
    """IoU of the object's binary masks; an object absent from both maps scores 1.

    Without ``num_objects`` the id must appear in at least one map.
    """
    pred, gt = _check_pair(pred_labels, gt_labels)
    _check_id(pred, gt, object_id, num_objects)
    p, g = pred == object_id, gt == object_id
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary(mask):
    """Foreground pixels with at least one in-image 4-neighbour in the background."""
    m = np.asarray(mask, dtype=bool)
    pad = np.pad(m, 1, mode="edge")
    inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~inner


def default_tolerance(shape):
    return max(1, math.ceil(0.008 * math.hypot(*shape[-2:]) - 1e-12))


def _matched_count(pb, gb, tol):
    """Size of a maximum one-to-one matching between boundary pixels closer than ``tol``."""
    py, px = np.nonzero(pb)
    gy, gx = np.nonzero(gb)
    if py.size == 0 or gy.size == 0:
        return 0
    r = int(math.floor(tol))
    g_index = -np.ones(gb.shape, dtype=np.int64)
    g_index[gy, gx] = np.arange(gy.size)
    rows, cols = [], []
    H, W = gb.shape
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if dy * dy + dx * dx > tol * tol:
                continue
            yy, xx = py + dy, px + dx
            ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
            idx = np.full(py.size, -1)
            idx[ok] = g_index[yy[ok], xx[ok]]
            hit = idx >= 0
            rows.append(np.nonzero(hit)[0])
            cols.append(idx[hit])
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    graph = csr_matrix((np.ones(rows.size), (rows, cols)), shape=(py.size, gy.size))
    match = maximum_bipartite_matching(graph, perm_type="column")
    return int(np.count_nonzero(match >= 0))


def contour_accuracy(pred_labels, gt_labels, object_id, tolerance_px=None, num_objects=None):
    """Boundary F-measure with one-to-one pixel matching within ``tolerance_px`` (Euclidean).

    The default tolerance is 0.8% of the image diagonal rounded up. Both
    boundaries empty scores 1; exactly one empty scores 0.
    """
    pred, gt = _check_pair(pred_labels, gt_labels)
    _check_id(pred, gt, object_id, num_objects)
    tol = default_tolerance(gt.shape) if tolerance_px is None else tolerance_px
    pb, gb = boundary(pred == object_id), boundary(gt == object_id)
    n_p, n_g = int(pb.sum()), int(gb.sum())
    if n_p == 0 and n_g == 0:
        return 1.0
    if n_p == 0 or n_g == 0:
        return 0.0
    m = _matched_count(pb, gb, tol)
    precision, recall = m / n_p, m / n_g
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def matched_iou(pseudo_labels, gt_labels):
    """Mean space-time IoU of gt objects after the best one-to-one assignment of pseudo labels.

    Every gt object counts; one left without a partner scores 0.
    """
    ps, gt = _check_pair(pseudo_labels, gt_labels)
    p_ids = [int(v) for v in np.unique(ps) if v]
    g_ids = [int(v) for v in np.unique(gt) if v]
    if not g_ids:
        raise ValueError("ground truth holds no objects")
    if not p_ids:
        return 0.0
    iou = np.zeros((len(g_ids), len(p_ids)))
    for a, g in enumerate(g_ids):
        gm = gt == g
        for b, q in enumerate(p_ids):
            pm = ps == q
            iou[a, b] = np.count_nonzero(gm & pm) / np.count_nonzero(gm | pm)
    rows, cols = linear_sum_assignment(iou, maximize=True)
    return float(iou[rows, cols].sum() / len(g_ids))


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    per_frame: dict = field(default_factory=dict)   # (video, object) -> (J array, F array, frame indices)
    J_m: float = 0.0
    F_m: float = 0.0
    J_r: float = 0.0
    F_r: float = 0.0
    curve: np.ndarray = None                        # mean J&F per frame index

    @property
    def JF_m(self):
        return (self.J_m + self.F_m) / 2

    def summary(self):
        return {"J&F_m": self.JF_m, "J_m": self.J_m, "F_m": self.F_m, "J_r": self.J_r, "F_r": self.F_r}

    def write_csv(self, path):
        path = Path(path)
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["video", "object", "frame", "J", "F"])
            for (vid, obj), (J, F, frames) in sorted(self.per_frame.items()):
                for t, j, f in zip(frames, J, F):
                    wr.writerow([vid, obj, int(t), f"{j:.6f}", f"{f:.6f}"])
        with open(path.with_name(path.stem + "_summary.csv"), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(list(self.summary()))
            wr.writerow([f"{v:.6f}" for v in self.summary().values()])

    def write_curve_svg(self, path, title="J&F by frame index"):
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.5))
        if self.curve is not None and self.curve.size:
            valid = ~np.isnan(self.curve)
            ax.plot(np.arange(self.curve.size)[valid], self.curve[valid], marker="o", ms=3)
        ax.set_xlabel("frame index")
        ax.set_ylabel("mean J&F")
        ax.set_ylim(0, 1.02)
        ax.set_title(title)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)


def score_video(pred, gt, skip_first=True, tolerance_px=None):
    """Per-object J and F arrays for one video's label stacks ``(T, H, W)``."""
    pred, gt = _check_pair(pred, gt)
    K = int(gt.max(initial=0))
    start = 1 if skip_first and gt.shape[0] > 1 else 0
    frames = np.arange(start, gt.shape[0])
    out = {}
    for k in range(1, K + 1):
        J = np.array([region_similarity(pred[t], gt[t], k, K) for t in frames])
        F = np.array([contour_accuracy(pred[t], gt[t], k, tolerance_px, K) for t in frames])
        out[k] = (J, F, frames)
    return out


def aggregate(per_frame, num_frames=None):
    """Report from ``{(video, object): (J, F, frames)}``; means are per object, then over objects."""
    rep = EvalReport(per_frame=dict(per_frame))
    if not per_frame:
        raise ValueError("nothing to evaluate: no objects in the ground truth")
    j_obj = np.array([J.mean() for J, _, _ in per_frame.values()])
    f_obj = np.array([F.mean() for _, F, _ in per_frame.values()])
    rep.J_m, rep.F_m = float(j_obj.mean()), float(f_obj.mean())
    rep.J_r, rep.F_r = float(np.mean(j_obj > 0.5)), float(np.mean(f_obj > 0.5))
    n = num_frames or 1 + max(int(fr.max()) for _, _, fr in per_frame.values())
    tot = np.zeros(n)
    cnt = np.zeros(n)
    for J, F, frames in per_frame.values():
        np.add.at(tot, frames, (J + F) / 2)
        np.add.at(cnt, frames, 1)
    with np.errstate(invalid="ignore"):
        rep.curve = np.where(cnt > 0, tot / np.maximum(cnt, 1), np.nan)
    return rep


def _label_dir(root, vid):
    d = Path(root) / vid
    return d / "masks" if (d / "masks").is_dir() else d


def _inventory(root):
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    out = {}
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        files = numbered_files(_label_dir(root, d.name))
        if files:
            out[d.name] = sorted(files)
    return out


def evaluate(pred_dir, gt_dir, skip_first=True, tolerance_px=None):
    """Score every ``<pred_dir>/<video>/%05d.png`` against the matching ground truth.

    Ground truth may be a dataset root (``<video>/masks/``) or a flat label
    tree. Any missing video or frame raises :class:`InventoryMismatch`.
    """
    pred_inv, gt_inv = _inventory(pred_dir), _inventory(gt_dir)
    problems = []
    for vid in sorted(set(gt_inv) - set(pred_inv)):
        problems.append(f"missing prediction for video {vid}")
    for vid in sorted(set(pred_inv) - set(gt_inv)):
        problems.append(f"prediction for unknown video {vid}")
    for vid in sorted(set(gt_inv) & set(pred_inv)):
        miss = sorted(set(gt_inv[vid]) - set(pred_inv[vid]))
        extra = sorted(set(pred_inv[vid]) - set(gt_inv[vid]))
        if miss:
            problems.append(f"{vid}: missing predicted frames {miss}")
        if extra:
            problems.append(f"{vid}: predicted frames without ground truth {extra}")
    if problems:
        raise InventoryMismatch(problems)
    per_frame = {}
    longest = 0
    for vid in sorted(gt_inv):
        n = len(gt_inv[vid])
        gt = read_label_maps(_label_dir(gt_dir, vid), n)
        pred = read_label_maps(_label_dir(pred_dir, vid), n)
        if pred.shape != gt.shape:
            raise InventoryMismatch([f"{vid}: prediction size {pred.shape[1:]} vs ground truth {gt.shape[1:]}"])
        longest = max(longest, n)
        for k, scores in score_video(pred, gt, skip_first, tolerance_px).items():
            per_frame[(vid, k)] = scores
    return aggregate(per_frame, longest)
