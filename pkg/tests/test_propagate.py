import numpy as np
import pytest
from hypothesis import given, strategies as st

from selfvos import propagate as prop
from selfvos.datakit import SceneSpec, VideoSequence, generate_synthetic_video
from selfvos.netcore import encode_visual, init_parameters
from selfvos.propagate import (
    BankEntry,
    ReferenceBank,
    aggregate_objects,
    infer_video,
    labels_to_maskset,
    maskset_to_labels,
    refine,
)

SPEC = SceneSpec(height=16, width=16, num_objects=2, frame_count=8, min_radius=3.0, max_radius=5.0)


@pytest.fixture
def model(small_desc):
    return init_parameters(small_desc, 0)


@pytest.fixture
def video():
    return generate_synthetic_video(SPEC, 3)


def test_aggregate_examples():
    out = aggregate_objects(np.array([[[0.5]], [[0.5]]]))
    np.testing.assert_allclose(out[:, 0, 0], [0.2, 0.4, 0.4], rtol=1e-6)
    out = aggregate_objects(np.array([[[1.0]], [[0.0]]]))
    np.testing.assert_allclose(out[:, 0, 0], [0, 1, 0])
    np.testing.assert_array_equal(aggregate_objects([], size=(2, 3)), np.ones((1, 2, 3)))
    with pytest.raises(ValueError):
        aggregate_objects(np.array([[[1.5]]]))


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_aggregate_gives_distributions(seed, K):
    p = np.random.default_rng(seed).random((K, 3, 5))
    p[0, 0, 0] = 1.0
    out = aggregate_objects(p)
    assert out.shape == (K + 1, 3, 5) and out.min() >= 0
    np.testing.assert_allclose(out.sum(0), 1.0, rtol=1e-6)


def test_maskset_round_trip():
    lab = np.array([[0, 1], [2, 2]])
    ms = labels_to_maskset(lab)
    assert ms.shape == (3, 2, 2)
    np.testing.assert_array_equal(maskset_to_labels(ms), lab)
    assert labels_to_maskset(lab, 4).shape == (5, 2, 2)
    with pytest.raises(ValueError):
        labels_to_maskset(lab, 1)


def test_bank_keeps_first_and_window():
    bank = ReferenceBank(window=3)
    for t in range(10):
        bank.add(BankEntry(t, np.zeros((1, 2)), np.zeros((1, 2))))
        assert len(bank.entries) <= 4
    assert bank.indices == [0, 7, 8, 9]
    bank0 = ReferenceBank(window=0)
    for t in range(4):
        bank0.add(BankEntry(t, np.zeros((1, 2)), np.zeros((1, 2))))
    assert bank0.indices == [0]


def test_single_frame_video(model, video):
    v = VideoSequence("one", video.frames[:1], video.gt_masks[:1])
    pred = infer_video(model, v, v.gt_masks[0])
    np.testing.assert_array_equal(pred.labels[0], v.gt_masks[0])


def test_first_frame_and_shapes(model, video):
    pred = infer_video(model, video, video.gt_masks[0], rounds=1)
    assert pred.probs.shape == (8, 3, 16, 16)
    np.testing.assert_array_equal(pred.labels[0], video.gt_masks[0])
    np.testing.assert_allclose(pred.probs.sum(1), 1.0, rtol=1e-5)


def test_no_objects(model, video):
    pred = infer_video(model, video, np.zeros((16, 16), np.uint8))
    assert pred.probs.shape[1] == 1 and not pred.labels.any()


def test_window_changes_references(model):
    v = generate_synthetic_video(SceneSpec(height=16, width=16, num_objects=2, frame_count=12,
                                           min_radius=3.0, max_radius=5.0), 3)
    a = infer_video(model, v, v.gt_masks[0], window=0, mode="warp").probs
    b = infer_video(model, v, v.gt_masks[0], window=20, mode="warp").probs
    # frame 1 sees only frame 0 either way
    np.testing.assert_array_equal(a[1], b[1])
    assert not np.allclose(a[5:], b[5:])


def test_deterministic(model, video):
    a = infer_video(model, video, video.gt_masks[0]).probs
    b = infer_video(model, video, video.gt_masks[0]).probs
    np.testing.assert_array_equal(a, b)


def test_causal(model, video):
    a = infer_video(model, video, video.gt_masks[0], rounds=2).probs
    frames = video.frames.copy()
    frames[5:] = np.random.default_rng(0).random(frames[5:].shape)
    b = infer_video(model, VideoSequence("x", frames), video.gt_masks[0], rounds=2).probs
    np.testing.assert_array_equal(a[:5], b[:5])
    assert not np.array_equal(a[5:], b[5:])


def _refine_inputs(model, video, rng):
    fm = encode_visual(model, video.frames[1])
    K = 2
    coarse = aggregate_objects(rng.random((K, 16, 16)))
    V_q = rng.standard_normal((K, 16, model.descriptor.value_dim)).astype(np.float32)
    return coarse, V_q, [s.data for s in fm.skips]


def test_round_zero_skips_mask_encoder(model, video, rng, monkeypatch):
    coarse, V_q, skips = _refine_inputs(model, video, rng)
    calls = []
    real = prop.encode_frame_mask
    monkeypatch.setattr(prop, "encode_frame_mask", lambda *a, **k: calls.append(1) or real(*a, **k))
    refine(model, video.frames[1], coarse, V_q, skips, rounds=0)
    assert calls == []
    refine(model, video.frames[1], coarse, V_q, skips, rounds=2)
    assert len(calls) == 2


def test_loop_equals_unrolled(model, video, rng):
    coarse, V_q, skips = _refine_inputs(model, video, rng)
    y = coarse
    for _ in range(3):
        y = refine(model, video.frames[1], y, V_q, skips, rounds=1)
    np.testing.assert_array_equal(refine(model, video.frames[1], coarse, V_q, skips, rounds=3), y)


def test_round_zero_ignores_coarse(model, video, rng):
    coarse, V_q, skips = _refine_inputs(model, video, rng)
    a = refine(model, video.frames[1], coarse, V_q, skips, rounds=0)
    b = refine(model, video.frames[1], coarse[::-1].copy(), V_q, skips, rounds=0)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        refine(model, video.frames[1], coarse, V_q, skips, rounds=-1)


def test_warp_mode_and_errors(model, video):
    p = infer_video(model, video, video.gt_masks[0], mode="warp")
    np.testing.assert_allclose(p.probs.sum(1), 1.0, rtol=1e-5)
    with pytest.raises(ValueError, match="mode"):
        infer_video(model, video, video.gt_masks[0], mode="magic")
    with pytest.raises(ValueError, match="first mask"):
        infer_video(model, video, np.zeros((8, 8), np.uint8))


def test_write_prediction(tmp_path, video):
    from selfvos.datakit import read_label_maps
    from selfvos.netcore.checkpoint import read_container
    lab = prop.copy_first_mask(video, video.gt_masks[0])
    probs = np.stack([labels_to_maskset(l, 2) for l in lab])
    prop.write_prediction(lab, tmp_path / "v", probs)
    np.testing.assert_array_equal(read_label_maps(tmp_path / "v"), lab)
    t, meta = read_container(tmp_path / "v" / "probs.ckpt")
    assert t["probs"].shape == probs.shape
