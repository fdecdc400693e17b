"""``selfvos`` command line: gen-data, train, infer, eval, report.

Exit codes: 0 success, 1 runtime failure, 2 invalid input.
"""

import os

# BLAS reads its thread count at import time, so set it before numpy loads.
if os.environ.get("SELFVOS_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["SELFVOS_THREADS"]

import argparse
import csv
import json
import logging
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

log = logging.getLogger("selfvos")


class InputError(Exception):
    """Bad user input; reported with exit code 2."""


def _print_config(title, mapping):
    print(f"# effective {title} config")
    for k, v in mapping.items():
        print(f"{k} = {v}")
    sys.stdout.flush()


# ---------------------------------------------------------------- gen-data


def video_seed(seed, index):
    return int(seed) * 100003 + int(index)


def cmd_gen_data(args):
    from .datakit import SceneSpec, generate_synthetic_video, save_video, scene_from_text, scene_to_text

    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise InputError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    spec = scene_from_text(Path(args.scene).read_text()) if args.scene else SceneSpec()
    if args.frames is not None:
        spec.frame_count = args.frames
    if args.objects is not None:
        spec.num_objects = args.objects
    if args.static:
        spec.max_speed = 0.0
        spec.max_rotation = 0.0
    spec.validate()
    _print_config("gen-data", {"out": out, "count": args.count, "seed": args.seed, "static": args.static})
    print(scene_to_text(spec), end="")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        vid = f"synth{i:05d}"
        s = video_seed(args.seed, i)
        video = generate_synthetic_video(spec, s, vid)
        save_video(video, out)
        entries.append({"id": vid, "seed": s, "frames": len(video), "objects": video.num_objects,
                        "occlusion_frames": video.meta.get("occlusion_frames", [])})
    (out / "scene.txt").write_text(scene_to_text(spec))
    manifest = {"format": "selfvos-dataset/1", "seed": args.seed, "count": args.count,
                "size": [spec.height, spec.width], "videos": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    print(f"wrote {args.count} videos to {out}")
    return 0


# ---------------------------------------------------------------- train


def _train_config(args):
    from .segtrain import TrainConfig, parse_config_text

    cfg = TrainConfig()
    try:
        if args.config:
            cfg = cfg.override(parse_config_text(Path(args.config).read_text()))
        flags = {f.name: getattr(args, f.name) for f in fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
        return cfg.override(flags)
    except (KeyError, ValueError) as exc:
        raise InputError(f"bad training config: {exc}") from exc


def cmd_train(args):
    from .datakit import load_dataset
    from .segtrain import train

    cfg = _train_config(args)
    data = Path(args.data)
    if not data.is_dir():
        raise InputError(f"dataset {data} does not exist")
    out = Path(args.out)
    _print_config("train", {"data": data, "out": out, "resume": not args.no_resume})
    print(cfg.to_text(), end="")
    # frames only: training never sees annotations
    videos = load_dataset(data, with_masks=False)
    if not videos:
        raise InputError(f"dataset {data} holds no videos")
    t0 = time.perf_counter()
    state = train(cfg, videos, workdir=out, pseudo_root=out / "pseudo", resume=not args.no_resume)
    last = state.history[-1] if state.history else {}
    print(f"trained {state.epoch} epochs in {time.perf_counter() - t0:.1f}s; final losses "
          + ", ".join(f"{k}={last[k]:.4f}" for k in ("L_Seg", "L_Short", "L_Long") if k in last))
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


# ---------------------------------------------------------------- infer


def parse_rounds(text):
    """``"3"``, ``"0,1,3"`` or ``"0..5"`` to a list of round counts."""
    try:
        if ".." in text:
            lo, hi = text.split("..")
            vals = list(range(int(lo), int(hi) + 1))
        else:
            vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise InputError(f"bad --rounds value {text!r}") from None
    if not vals or min(vals) < 0:
        raise InputError(f"bad --rounds value {text!r}")
    return vals


def _first_mask(data, vid):
    from PIL import Image

    p = Path(data) / vid / "masks" / "00000.png"
    if not p.is_file():
        raise InputError(f"{vid}: first-frame mask {p} not found")
    return np.asarray(Image.open(p).convert("L"))


def cmd_infer(args):
    from .datakit import list_videos, load_video
    from .netcore.checkpoint import load_checkpoint
    from .propagate import copy_first_mask, infer_video, write_prediction

    rounds = parse_rounds(args.rounds)
    data = Path(args.data)
    if not data.is_dir():
        raise InputError(f"dataset {data} does not exist")
    params = None
    if args.mode != "copy":
        ckpt = Path(args.checkpoint) if args.checkpoint else None
        if ckpt is None or not ckpt.is_file():
            raise InputError(f"checkpoint not found: {ckpt}")
        params = load_checkpoint(ckpt)
    out = Path(args.out)
    _print_config("infer", {"data": data, "checkpoint": args.checkpoint, "out": out, "mode": args.mode,
                            "window": args.window, "rounds": ",".join(map(str, rounds)),
                            "probs": args.probs})
    vids = list_videos(data)
    if args.videos:
        vids = [v for v in vids if v in set(args.videos.split(","))]
    sweep = len(rounds) > 1
    for r in rounds:
        target = out / f"R{r}" if sweep else out
        t0 = time.perf_counter()
        for vid in vids:
            video = load_video(data / vid, with_masks=False)
            first = _first_mask(data, vid)
            if args.mode == "copy":
                labels, probs = copy_first_mask(video, first), None
            else:
                pred = infer_video(params, video, first, window=args.window, rounds=r, mode=args.mode)
                labels, probs = pred.labels, pred.probs
            write_prediction(labels, target / vid, probs if args.probs else None)
        print(f"R={r}: {len(vids)} videos -> {target} ({time.perf_counter() - t0:.1f}s)")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args):
    from .evalkit import evaluate

    _print_config("eval", {"pred": args.pred, "gt": args.gt, "out": args.out, "tolerance": args.tolerance})
    for p in (args.pred, args.gt):
        if not Path(p).is_dir():
            raise InputError(f"{p}: not a directory")
    report = evaluate(args.pred, args.gt, tolerance_px=args.tolerance)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "scores.csv")
    report.write_curve_svg(out / "curve.svg")
    for k, v in report.summary().items():
        print(f"{k:6s} {v:.4f}")
    return 0


# ---------------------------------------------------------------- report


def _read_summary(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return dict(zip(rows[0], (float(x) for x in rows[1])))


def cmd_report(args):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Report", ""]
    if args.evals:
        lines += ["| run | J&F_m | J_m | F_m | J_r | F_r |", "|---|---|---|---|---|---|"]
        for item in args.evals:
            name, _, d = item.partition("=")
            if not d:
                name, d = Path(item).name, item
            s = Path(d) / "scores_summary.csv"
            if not s.is_file():
                raise InputError(f"no evaluation summary at {s}")
            v = _read_summary(s)
            lines.append(f"| {name} | " + " | ".join(f"{v[k]:.3f}" for k in ("J&F_m", "J_m", "F_m", "J_r", "F_r"))
                         + " |")
        lines.append("")
    for run in args.runs or []:
        csv_path = Path(run) / "losses.csv"
        if not csv_path.is_file():
            raise InputError(f"no loss curve at {csv_path}")
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ep = [int(r["epoch"]) for r in rows]
        for key in ("L_Seg", "L_Short", "L_Long", "total"):
            ys = [float(r[key]) if r[key] not in ("", "nan") else np.nan for r in rows]
            ax.plot(ep, ys, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend()
        ax.grid(alpha=0.3)
        fig.tight_layout()
        svg = out / f"losses_{Path(run).name}.svg"
        fig.savefig(svg, format="svg")
        plt.close(fig)
        lines.append(f"![{Path(run).name} losses]({svg.name})")
    (out / "report.md").write_text("\n".join(lines) + "\n")
    print(f"wrote {out / 'report.md'}")
    return 0


# ---------------------------------------------------------------- parser


def _add_train_flags(p):
    from .segtrain import TrainConfig

    defaults = TrainConfig()
    for f in fields(TrainConfig):
        d = getattr(defaults, f.name)
        flag = "--" + f.name.replace("_", "-")
        if isinstance(d, bool):
            p.add_argument(flag, type=lambda s: s.lower() in ("1", "true", "yes"), default=None,
                           help=f"(default {d})")
        elif isinstance(d, tuple):
            p.add_argument(flag, type=lambda s: tuple(int(x) for x in s.split(",")), default=None,
                           help=f"comma list (default {','.join(map(str, d))})")
        else:
            p.add_argument(flag, type=type(d), default=None, help=f"(default {d})")


def build_parser():
    ap = argparse.ArgumentParser(prog="selfvos", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic video corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--frames", type=int, default=None, help="frames per video (default 24)")
    g.add_argument("--objects", type=int, default=None, help="objects per video (default 2)")
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--scene", help="scene spec key=value file")
    g.add_argument("--static", action="store_true", help="zero motion and rotation")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage self-supervised training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value config file; flags win")
    t.add_argument("--no-resume", action="store_true")
    _add_train_flags(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="propagate first-frame masks")
    i.add_argument("--data", required=True)
    i.add_argument("--checkpoint")
    i.add_argument("--out", required=True)
    i.add_argument("--window", type=int, default=20)
    i.add_argument("--rounds", default="3", help="R, a list 0,1,3 or a range 0..5")
    i.add_argument("--mode", choices=("full", "warp", "copy"), default="full")
    i.add_argument("--videos", help="comma list of video ids")
    i.add_argument("--probs", action="store_true", help="also dump probabilities")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--tolerance", type=float, default=None, help="boundary tolerance in px")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="summarize evaluations and loss curves")
    r.add_argument("--out", required=True)
    r.add_argument("--evals", nargs="*", help="NAME=EVAL_DIR entries")
    r.add_argument("--runs", nargs="*", help="training run directories")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    from .evalkit import InventoryMismatch
    from .netcore.checkpoint import CheckpointError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, InventoryMismatch, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
