import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfvos import kernels
from selfvos import _pykernels

c = pytest.importorskip("selfvos._ckernels")


def naive_im2col(x, kh, kw, stride):
    n, ch, hp, wp = x.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    out = np.zeros((n * ho * wo, ch * kh * kw), x.dtype)
    r = 0
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                out[r] = x[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw].reshape(-1)
                r += 1
    return out


shapes = st.tuples(st.integers(1, 2), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
                   st.sampled_from([1, 3]), st.sampled_from([1, 2]))


@given(shapes, st.integers(0, 2**16))
def test_im2col_backends_match_loop(shape, seed):
    n, ch, hp, wp, k, stride = shape
    x = np.random.default_rng(seed).standard_normal((n, ch, hp, wp))
    want = naive_im2col(x, k, k, stride)
    np.testing.assert_array_equal(_pykernels.im2col(x, k, k, stride), want)
    np.testing.assert_array_equal(c.im2col(x, k, k, stride), want)


@given(shapes, st.integers(0, 2**16))
def test_col2im_is_adjoint(shape, seed):
    n, ch, hp, wp, k, stride = shape
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, ch, hp, wp))
    cols = naive_im2col(x, k, k, stride)
    y = rng.standard_normal(cols.shape)
    for backend in (_pykernels, c):
        back = backend.col2im(y, n, ch, hp, wp, k, k, stride)
        assert np.isclose(np.sum(cols * y), np.sum(x * back), rtol=1e-10)


def test_float32_supported():
    x = np.random.default_rng(0).standard_normal((1, 2, 5, 5)).astype(np.float32)
    out = c.im2col(x, 3, 3, 1)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, _pykernels.im2col(x, 3, 3, 1))


@given(st.integers(1, 40), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**16))
def test_kmeans_assign_matches_bruteforce(n, m, d, seed):
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((n, d))
    cen = rng.standard_normal((m, d))
    d2 = ((pts[:, None] - cen[None]) ** 2).sum(-1)
    for backend in (_pykernels, c):
        lab, dist = backend.kmeans_assign(pts, cen)
        np.testing.assert_array_equal(lab, d2.argmin(1))
        np.testing.assert_allclose(dist, d2.min(1), rtol=1e-9, atol=1e-12)


def test_kmeans_assign_ties_take_lowest_index():
    pts = np.array([[0.0], [1.0]])
    cen = np.array([[-1.0], [1.0], [1.0]])
    for backend in (_pykernels, c):
        lab, _ = backend.kmeans_assign(pts, cen)
        assert lab.tolist() == [0, 1]


def test_selected_backend_is_reported():
    assert kernels.BACKEND in ("c", "python")
    assert kernels.get_backend("python") is _pykernels
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")
