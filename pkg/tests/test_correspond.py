import numpy as np
import pytest
from hypothesis import given, strategies as st

from selfvos import correspond as corr
from selfvos.correspond import TransformParams, apply_transform, compose, index_map
from selfvos.netcore.autograd import Tensor


def _unit(rng, n, c):
    x = rng.standard_normal((n, c))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.integers(1, 12), st.floats(0.01, 2.0))
def test_affinity_columns_are_distributions(seed, nr, nq, tau):
    rng = np.random.default_rng(seed)
    A = corr.affinity(_unit(rng, nr, 5), _unit(rng, nq, 5), tau).data
    assert A.shape == (nr, nq)
    assert np.all(A >= 0)
    np.testing.assert_allclose(A.sum(axis=0), 1.0, atol=1e-9)


@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_warp_yields_distributions(seed, K):
    rng = np.random.default_rng(seed)
    A = corr.affinity(_unit(rng, 9, 4), _unit(rng, 7, 4)).data
    m = rng.random((9, K + 1))
    m /= m.sum(axis=1, keepdims=True)
    out = corr.warp_mask(A, m).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)


def test_one_hot_affinity_copies_masks(rng):
    labels = rng.integers(0, 3, 10)
    masks = np.eye(3)[labels]
    perm = rng.permutation(10)
    A = np.zeros((10, 10))
    A[perm, np.arange(10)] = 1.0
    np.testing.assert_array_equal(corr.warp_mask(A, masks).data, masks[perm])


def test_warp_list_must_agree_on_objects(rng):
    with pytest.raises(ValueError, match="object count"):
        corr.warp_mask(np.ones((4, 1)) / 4, [np.ones((2, 2)), np.ones((2, 3))])


def test_affinity_validation():
    with pytest.raises(ValueError, match="temperature"):
        corr.affinity(np.ones((2, 3)), np.ones((2, 3)), 0.0)
    with pytest.raises(ValueError, match="channel mismatch"):
        corr.affinity(np.ones((2, 3)), np.ones((2, 4)))


def test_grid_matrix_round_trip(rng):
    g = rng.random((5, 3, 4))
    m = corr.grid_to_matrix(g)
    assert m.shape == (12, 5)
    np.testing.assert_array_equal(corr.matrix_to_grid(m, 3, 4).data, g)


# ---------------------------------------------------------------- transforms

crops = st.builds(lambda t, l, h, w: TransformParams("crop", t, l, h, w),
                  st.integers(0, 2), st.integers(0, 2), st.integers(1, 4), st.integers(1, 4))
simple = st.one_of(st.just(TransformParams()), st.just(TransformParams("flip_h")), crops,
                   st.builds(lambda f: TransformParams("scale", factor=f), st.integers(1, 2)))


@given(st.lists(simple, min_size=1, max_size=3), st.integers(0, 2**31 - 1))
def test_transform_equals_index_map_composition(parts, seed):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 6, 6))
    phi = compose(*parts)
    # explicit composition: apply each index map in turn with fancy indexing
    ref = x
    try:
        for p in parts:
            r, c = index_map(p, ref.shape[1], ref.shape[2])
            ref = ref[:, r, c]
    except ValueError:
        with pytest.raises(ValueError):
            apply_transform(phi, x)
        return
    np.testing.assert_array_equal(apply_transform(phi, x), ref)
    np.testing.assert_array_equal(apply_transform(phi, Tensor(x)).data, ref)


@given(st.integers(0, 2**31 - 1), st.integers(1, 7), st.integers(1, 7))
def test_flip_is_involution(seed, h, w):
    x = np.random.default_rng(seed).random((2, h, w))
    f = TransformParams("flip_h")
    np.testing.assert_array_equal(apply_transform(f, apply_transform(f, x)), x)


def test_crop_outside_grid_rejected():
    with pytest.raises(ValueError, match="outside"):
        apply_transform(TransformParams("crop", 2, 0, 4, 4), np.zeros((1, 5, 5)))


def test_at_stride_matches_pooling(rng):
    phi = compose(TransformParams("crop", 1, 2, 3, 2), TransformParams("flip_h"))
    img = rng.random((1, 24, 24))
    pooled = img.reshape(1, 6, 4, 6, 4).mean(axis=(2, 4))
    out = apply_transform(phi.at_stride(4), img)
    np.testing.assert_allclose(out.reshape(1, 3, 4, 2, 4).mean(axis=(2, 4)), apply_transform(phi, pooled))


# ---------------------------------------------------------------- losses


def _ce_oracle(anchors, cands, targets, tau):
    total = 0.0
    for i in range(anchors.shape[0]):
        logits = [float(anchors[i] @ cands[j]) / tau for j in range(cands.shape[0])]
        m = max(logits)
        lse = m + np.log(sum(np.exp(l - m) for l in logits))
        total += lse - logits[targets[i]]
    return total / anchors.shape[0]


def test_losses_match_scalar_oracle(rng):
    a, b = _unit(rng, 7, 4), _unit(rng, 7, 4)
    np.testing.assert_allclose(float(corr.loss_short(a, b, 0.3).data),
                               _ce_oracle(b, a, np.arange(7), 0.3), rtol=1e-12)
    o = rng.integers(0, 9, 7)
    c = _unit(rng, 9, 4)
    np.testing.assert_allclose(float(corr.loss_long(a, c, o, 0.2).data),
                               _ce_oracle(a, c, o, 0.2), rtol=1e-12)


def test_loss_short_uniform_is_log_n():
    x = np.zeros((5, 3))
    np.testing.assert_allclose(float(corr.loss_short(x, x).data), np.log(5))


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_pseudo_match_ignores_temperature(seed, t1, t2):
    rng = np.random.default_rng(seed)
    a, b = _unit(rng, 6, 3), _unit(rng, 8, 3)
    m = corr.pseudo_match(a, b, t1)
    np.testing.assert_array_equal(m, corr.pseudo_match(a, b, t2))
    np.testing.assert_array_equal(m, np.argmax(a @ b.T, axis=1))


def test_loss_long_validation(rng):
    a = _unit(rng, 3, 2)
    with pytest.raises(ValueError, match="out of range"):
        corr.loss_long(a, a, np.array([0, 1, 3]))
    with pytest.raises(ValueError, match="match indices"):
        corr.loss_long(a, a, np.array([0, 1]))
