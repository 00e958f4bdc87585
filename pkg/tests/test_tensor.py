import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from mbrobust import tensor as T
from mbrobust.tensor import ShapeError, Tape, Tensor, backward, finite_diff_check


def grad_of(f, *arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*leaves)
    return out, tape.gradient(out, leaves)


def conv_loops(x, w, b):
    # direct quadruple loop, valid padding
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((n, o, h - kh + 1, wd - kw + 1))
    for i in range(n):
        for j in range(o):
            for r in range(h - kh + 1):
                for s in range(wd - kw + 1):
                    out[i, j, r, s] = np.sum(x[i, :, r:r + kh, s:s + kw] * w[j]) + b[j]
    return out


def test_default_dtype_and_float64_preserved():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    assert Tensor(np.ones(2)).dtype == np.float64


def test_square_gradient():
    _, (g,) = grad_of(lambda x: T.sum_all(x * x), np.array([3.0, -2.0]))
    np.testing.assert_allclose(g, [6.0, -4.0])


def test_conv2d_matches_loops():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, 3, 2))
    b = rng.normal(size=4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(out, conv_loops(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv2d_padding_matches_padded_input():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    ref = conv_loops(np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1))), w, np.zeros(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.ones((1, 3, 5, 5))), Tensor(np.ones((2, 4, 3, 3))))


def test_maxpool_values_and_first_max_gradient():
    x = np.array([[[[1.0, 5.0, 2.0, 2.0], [3.0, 0.0, 2.0, 2.0]]]])
    _, (g,) = grad_of(lambda t: T.sum_all(T.maxpool2d(t)), x)
    np.testing.assert_array_equal(T.maxpool2d(Tensor(x)).data, [[[[5.0, 2.0]]]])
    # tie in the second window goes to its first element
    np.testing.assert_array_equal(g, [[[[0, 1, 1, 0], [0, 0, 0, 0]]]])


def test_log_softmax_matches_logsumexp():
    rng = np.random.default_rng(2)
    a = rng.normal(scale=30, size=(5, 7))
    ref = a - np.log(np.sum(np.exp(a - a.max(1, keepdims=True)), 1, keepdims=True)) - a.max(1, keepdims=True)
    np.testing.assert_allclose(T.log_softmax(Tensor(a)).data, ref, atol=1e-10)
    np.testing.assert_allclose(T.softmax(Tensor(a)).data.sum(1), 1.0)


def test_clamp_subgradient():
    x = np.array([-0.5, 0.0, 0.3, 1.0, 1.5])
    _, (g,) = grad_of(lambda t: T.sum_all(T.clamp(t, 0.0, 1.0)), x)
    np.testing.assert_array_equal(g, [0, 0, 1, 0, 0])


def test_broadcast_add_gradient_sums():
    a = np.ones((3, 4))
    b = np.arange(4.0)
    _, (ga, gb) = grad_of(lambda s, t: T.sum_all(s * t + t), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(b, (3, 4)))
    np.testing.assert_allclose(gb, 3 * np.ones(4) + 3)


def test_incompatible_shapes_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_unreached_source_gets_zero():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = T.sum_all(a * a)
    ga, gb = tape.gradient(y, [a, b])
    np.testing.assert_array_equal(gb, 0)
    assert backward(tape, y)[a].shape == (3,)


def test_no_tape_no_nodes():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        T.sum_all(Tensor(np.ones(3)) * 2.0)
    assert tape.leaves == []
    assert T.sum_all(a * a).data == 3


def test_pick_and_reductions():
    a = np.arange(6.0).reshape(2, 3)
    _, (g,) = grad_of(lambda t: T.sum_all(T.pick(t, np.array([2, 0]))), a)
    np.testing.assert_array_equal(g, [[0, 0, 1], [1, 0, 0]])
    _, (g,) = grad_of(lambda t: T.mean_all(t), a)
    np.testing.assert_allclose(g, np.full((2, 3), 1 / 6))


@pytest.mark.parametrize("op", ["conv", "matmul", "logsoftmax", "relu_pool", "log"])
def test_finite_differences_float64(op):
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 2, 3, 3))
    m72 = rng.normal(size=(72, 3))
    fns = {
        "conv": lambda t: T.sum_all(T.conv2d(t, Tensor(w)) * T.conv2d(t, Tensor(w))),
        "matmul": lambda t: T.sum_all(T.relu(T.matmul(T.reshape(t, (2, 72)), Tensor(m72)))),
        "logsoftmax": lambda t: T.sum_all(T.pick(T.log_softmax(T.reshape(t, (12, 12))), np.arange(12))),
        "relu_pool": lambda t: T.sum_all(T.maxpool2d(T.relu(t)) * T.maxpool2d(T.relu(t))),
        "log": lambda t: T.sum_all(T.log(T.add_scalar(t * t, 1.0))),
    }
    x = Tensor(rng.normal(size=(2, 2, 6, 6)))
    assert finite_diff_check(fns[op], x) < 1e-5


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-5, 5)))
def test_softmax_rows_are_distributions(a):
    p = T.softmax(Tensor(a)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(1), 1.0, rtol=1e-12)


def test_identity_matmul_and_relu_examples():
    a = np.random.default_rng(5).normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    _, (g,) = grad_of(lambda t: T.sum_all(T.relu(t)), np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(g, [0, 1])


def test_small_conv_matches_loops_float32():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(1, 1, 5, 5)).astype(np.float32)
    w = rng.normal(size=(1, 1, 3, 3)).astype(np.float32)
    out = T.conv2d(Tensor(x), Tensor(w)).data
    np.testing.assert_allclose(out, conv_loops(x.astype(float), w.astype(float), np.zeros(1)), atol=1e-6)


def test_nonscalar_loss_rejected():
    a = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = a * a
    with pytest.raises(ShapeError):
        tape.gradient(y, [a])


def test_sum_check_is_exact():
    assert finite_diff_check(T.sum_all, Tensor(np.random.default_rng(0).normal(size=(4, 3)))) < 1e-9


def test_cross_entropy_check_float32():
    rng = np.random.default_rng(7)
    labels = rng.integers(0, 6, 5)
    logits = Tensor(rng.normal(size=(5, 6)).astype(np.float32))
    f = lambda t: T.mean_all(-T.pick(T.log_softmax(t), labels))  # noqa: E731
    assert finite_diff_check(f, logits) <= 1e-3


@pytest.mark.parametrize("dtype,tol", [(np.float32, 1e-3), (np.float64, 1e-5)])
def test_two_layer_net_check(dtype, tol):
    rng = np.random.default_rng(8)
    w1 = Tensor(rng.normal(size=(6, 8)).astype(dtype))
    w2 = Tensor(rng.normal(size=(8, 3)).astype(dtype))
    x = Tensor(rng.normal(size=(4, 6)).astype(dtype))
    labels = np.array([0, 2, 1, 2])

    def net_loss(w):
        h = T.relu(T.matmul(x, w))
        return T.mean_all(-T.pick(T.log_softmax(T.matmul(h, w2)), labels))

    assert finite_diff_check(net_loss, w1) <= tol


def test_backward_linearity():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 4))
    f = lambda t: T.sum_all(T.relu(t) * t)  # noqa: E731
    g = lambda t: T.sum_all(T.log_softmax(t))  # noqa: E731
    _, (gf,) = grad_of(f, x)
    _, (gg,) = grad_of(g, x)
    _, (gc,) = grad_of(lambda t: T.add(T.scale(f(t), 2.5), T.scale(g(t), -1.5)), x)
    np.testing.assert_allclose(gc, 2.5 * gf - 1.5 * gg, atol=1e-6)


def test_forward_deterministic():
    rng = np.random.default_rng(10)
    x, w = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3))
    a = T.maxpool2d(T.relu(T.conv2d(Tensor(x), Tensor(w)))).data
    b = T.maxpool2d(T.relu(T.conv2d(Tensor(x), Tensor(w)))).data
    np.testing.assert_array_equal(a, b)
    assert np.all(np.isfinite(a))
