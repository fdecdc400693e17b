import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfvos.netcore import autograd as ag
from selfvos.netcore.autograd import Tensor
from selfvos.netcore.gradcheck import gradient_check


def loop_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for bi in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[bi, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[bi, oc, i, j] = np.sum(patch * w[oc]) + b[oc]
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)])
def test_conv2d_matches_loops(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, pad), rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_conv2d_gradients(rng, stride, pad):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    target = rng.standard_normal(ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).shape)

    def loss(p, _):
        y = ag.conv2d(p["x"], p["w"], p["b"], stride, pad)
        return ag.tsum(y * Tensor(target))

    assert gradient_check(loss, {"x": x, "w": w, "b": b}) < 1e-5


OPS = {
    "softmax0": lambda t: ag.softmax(t, axis=0),
    "log_softmax1": lambda t: ag.log_softmax(t, axis=1),
    "l2norm": lambda t: ag.l2_normalize(t, axis=1),
    "sigmoid": ag.sigmoid,
    "exp": ag.exp,
    "relu_shift": lambda t: ag.relu(t + 0.3),
    "matmul": lambda t: ag.matmul(t, t.T),
    "resize": lambda t: ag.resize_bilinear(ag.reshape(t, (1, 4, 3)), 7, 5),
    "pool": lambda t: ag.avg_pool(ag.reshape(t, (1, 4, 3))[:, :, :2], 2),
    "take": lambda t: ag.take(t, np.array([2, 0, 0, 1]), axis=1),
    "getitem": lambda t: ag.getitem(t, (np.array([0, 0, 3]), np.array([1, 1, 2]))),
    "concat": lambda t: ag.concat([t, t * 2.0], axis=0),
    "stack": lambda t: ag.stack([t, t], axis=1),
    "transpose": lambda t: ag.reshape(ag.transpose(t, (1, 0)), (3, 4)) * Tensor(np.arange(12.0).reshape(3, 4)),
    "div": lambda t: t / (ag.exp(t) + 1.0),
    "mean": lambda t: ag.mean(t, axis=0, keepdims=True) - t,
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(rng, name):
    x = rng.standard_normal((4, 3))
    proj = {}

    def loss(p, _):
        y = OPS[name](p["x"])
        if "w" not in proj:
            proj["w"] = np.random.default_rng(7).standard_normal(y.shape)
        return ag.tsum(y * Tensor(proj["w"]))

    assert gradient_check(loss, {"x": x}) < 1e-5


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = ag.tsum(x * x + x)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_interp_matrix_rows_are_convex():
    for n_in, n_out in [(4, 8), (16, 64), (5, 3), (7, 7)]:
        m = ag.interp_matrix(n_in, n_out)
        np.testing.assert_allclose(m.sum(1), 1.0)
        assert m.min() >= 0
    np.testing.assert_allclose(ag.interp_matrix(6, 6), np.eye(6))


@given(st.integers(1, 5), st.integers(0, 1000))
def test_log_softmax_is_normalized(n, seed):
    x = np.random.default_rng(seed).standard_normal((n, 6)) * 30
    lp = ag.log_softmax(Tensor(x), axis=1).data
    np.testing.assert_allclose(np.exp(lp).sum(1), 1.0, rtol=1e-12)


def test_gradient_check_flags_wrong_gradient():
    def bad_square(x):
        return ag._make(x.data ** 2, (x,), lambda g: (g * x.data,))   # missing factor 2

    def loss(p, _):
        return ag.tsum(bad_square(p["x"]))

    assert gradient_check(loss, {"x": np.array([1.0, -2.0, 3.0])}) > 0.3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_gradient_check_rejects_nonfinite():
    with pytest.raises(FloatingPointError):
        gradient_check(lambda p, _: ag.tsum(ag.log(p["x"])), {"x": np.array([-1.0])})
