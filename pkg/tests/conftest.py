import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_desc():
    from selfvos.netcore import ArchitectureDescriptor

    return ArchitectureDescriptor(widths=(4, 6), res_blocks=1, key_dim=8, value_dim=6,
                                  head_hidden=5, decoder_width=4)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


# ---------------------------------------------------------------- desk-scale run

TRAIN_SEED, EVAL_SEED = 1, 2          # corpus seeds, as in `selfvos gen-data --seed`
N_TRAIN, N_EVAL = 20, 10


def corpus(seed, n, prefix, spec=None):
    from selfvos.cli import video_seed
    from selfvos.datakit import SceneSpec, generate_synthetic_video

    spec = spec or SceneSpec()
    return [generate_synthetic_video(spec, video_seed(seed, i), f"{prefix}{i:03d}") for i in range(n)]


def _score(videos, predict):
    from selfvos.evalkit import aggregate, score_video

    per, secs = {}, 0.0
    for v in videos:
        first = v.gt_masks[0]
        t = time.perf_counter()
        labels = predict(v, first)
        secs += time.perf_counter() - t
        for k, sc in score_video(labels, v.gt_masks).items():
            per[(v.id, k)] = sc
    return aggregate(per), secs


@pytest.fixture(scope="session")
def desk():
    """Default configuration trained on the default 20-video corpus, scored on 10 held-out videos."""
    from selfvos import segtrain
    from selfvos.propagate import DEFAULT_ROUNDS, copy_first_mask, infer_video

    cfg = segtrain.TrainConfig()
    train_videos = corpus(TRAIN_SEED, N_TRAIN, "train")
    eval_videos = corpus(EVAL_SEED, N_EVAL, "eval")
    snapshot = {}

    def on_epoch(state, row):
        # stage 1 does not depend on stage 2, so this is the stage2_epochs=0 model
        if state.epoch == cfg.stage1_epochs:
            snapshot["corr"] = state.params.copy()

    t0 = time.perf_counter()
    state = segtrain.train(cfg, train_videos, on_epoch=on_epoch)
    train_secs = time.perf_counter() - t0
    gt_reads = sum(v.gt_reads for v in train_videos)
    reports = {
        "copy": _score(eval_videos, lambda v, m: copy_first_mask(v, m)),
        "warp": _score(eval_videos, lambda v, m: infer_video(snapshot["corr"], v, m, mode="warp").labels),
    }
    for r in sorted({0, 3, DEFAULT_ROUNDS}):
        reports[f"R{r}"] = _score(eval_videos, lambda v, m, r=r: infer_video(state.params, v, m, rounds=r).labels)
    return dict(state=state, train_videos=train_videos, reports=reports, train_secs=train_secs, gt_reads=gt_reads,
                cfg=cfg, snapshot=snapshot["corr"], eval_videos=eval_videos)
