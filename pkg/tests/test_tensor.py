"""Gradient and shape contracts for the tensor core."""

import numpy as np
import pytest

from ltoad import tensor as T


def _rand(rng, *shape, away_from=None, margin=0.01):
    x = rng.standard_normal(shape)
    if away_from is not None:
        d = x - away_from
        x = np.where(np.abs(d) < margin, away_from + np.sign(d + 1e-30) * margin, x)
    return x


def test_grad_check_self_consistency_against_softmax_jacobian():
    # Hand-derived: d/dx_j sum(w * softmax(x)) = s_j * (w_j - sum(w * s)).
    rng = np.random.default_rng(7)
    x = rng.standard_normal(5)
    w = rng.standard_normal(5)
    e = np.exp(x - x.max())
    s = e / e.sum()
    manual = s * (w - float((w * s).sum()))

    xt = T.Tensor(x.copy(), requires_grad=True)
    out = T.tsum(T.mul(T.softmax(xt), T.constant(w)))
    T.backward(out)
    np.testing.assert_allclose(xt.grad, manual, rtol=1e-12, atol=1e-12)

    err = T.grad_check(lambda t: T.tsum(T.mul(T.softmax(t), T.constant(w))), [xt])
    assert err < 1e-3


OPS = {
    "add": lambda a, b: T.tsum(T.add(a, b)),
    "sub": lambda a, b: T.tsum(T.mul(T.sub(a, b), T.sub(a, b))),
    "mul": lambda a, b: T.tsum(T.mul(a, b)),
    "matmul": lambda a, b: T.tsum(T.matmul(T.reshape(a, (3, 4)), T.reshape(b, (4, 3)))),
    "relu": lambda a, b: T.tsum(T.mul(T.relu(a), b)),
    "softmax": lambda a, b: T.tsum(T.mul(T.softmax(a), b)),
    "mean": lambda a, b: T.tmean(T.mul(a, b)),
    "l2_normalize": lambda a, b: T.tsum(T.mul(T.l2_normalize(a), b)),
    "cosine": lambda a, b: T.tsum(T.cosine_sim(a, b)),
    "concat": lambda a, b: T.tsum(T.mul(T.concat([a, b], axis=0), T.concat([b, a], axis=0))),
    "clip_min": lambda a, b: T.tsum(T.mul(T.clip_min(a, 0.0), b)),
    "elem_max": lambda a, b: T.tsum(T.elem_max(a, b)),
    "elem_min": lambda a, b: T.tsum(T.elem_min(a, b)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    fn = OPS[name]
    for seed in range(100):
        rng = np.random.default_rng(seed)
        away = 0.0 if name in ("relu", "clip_min") else None
        a = T.Tensor(_rand(rng, 12, away_from=away), requires_grad=True)
        b = T.Tensor(_rand(rng, 12), requires_grad=True)
        if name in ("elem_max", "elem_min"):
            # keep the pair away from ties, where max/min are non-smooth
            d = a.data - b.data
            b.data = np.where(np.abs(d) < 0.01, a.data - np.sign(d + 1e-30) * 0.01, b.data)
        err = T.grad_check(fn, [a, b])
        assert err < 1e-3, f"{name} seed {seed}: rel err {err}"


@pytest.mark.parametrize("seed", range(20))
def test_spatial_op_gradients(seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    w = rng.standard_normal((3, 4))
    err = T.grad_check(lambda t: T.tsum(T.mul(T.avg_pool2d(t, 3), T.constant(w))), [x])
    assert err < 1e-3

    x3 = T.Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
    w3 = rng.standard_normal((6, 8, 2))
    err = T.grad_check(lambda t: T.tsum(T.mul(T.upsample_nearest(t, (6, 8)), T.constant(w3))), [x3])
    assert err < 1e-3

    xb = T.Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    gm = T.Tensor(rng.standard_normal(3), requires_grad=True)
    bt = T.Tensor(rng.standard_normal(3), requires_grad=True)
    w2 = rng.standard_normal((7, 3))

    def bn(x_, g_, b_):
        out, _, _ = T.standardize(x_, g_, b_)
        return T.tsum(T.mul(out, T.constant(w2)))

    err = T.grad_check(bn, [xb, gm, bt])
    assert err < 1e-3


@pytest.mark.parametrize("seed", range(20))
def test_gather_and_take_gradients(seed):
    rng = np.random.default_rng(seed)
    tab = T.Tensor(rng.standard_normal((5, 4)), requires_grad=True)
    idx = rng.integers(0, 5, size=9)
    w = rng.standard_normal((9, 4))
    err = T.grad_check(lambda t: T.tsum(T.mul(T.gather_rows(t, idx), T.constant(w))), [tab])
    assert err < 1e-3

    p = T.Tensor(rng.standard_normal(6), requires_grad=True)
    err = T.grad_check(lambda t: T.mul(T.take(t, 2), T.take(t, 4)), [p])
    assert err < 1e-3


def test_cosine_identities():
    rng = np.random.default_rng(0)
    v = T.Tensor(rng.standard_normal(16))
    assert abs(T.cosine_sim(v, v).item() - 1.0) < 1e-6
    a = np.zeros(4)
    a[0] = 1.0
    b = np.zeros(4)
    b[1] = 1.0
    assert abs(T.cosine_sim(T.Tensor(a), T.Tensor(b)).item()) < 1e-12
    # range stays within [-1, 1]
    for seed in range(50):
        g = np.random.default_rng(seed)
        m = T.Tensor(g.standard_normal((4, 5, 8)))
        u = T.Tensor(g.standard_normal(8))
        c = T.cosine_sim(m, u).data
        assert (c <= 1.0 + 1e-6).all() and (c >= -1.0 - 1e-6).all()


def test_cosine_zero_norm_slice_is_zero():
    m = np.zeros((2, 2, 3))
    m[0, 0] = [1.0, 0, 0]
    c = T.cosine_sim(T.Tensor(m), T.Tensor(np.array([1.0, 0, 0]))).data
    assert c[0, 0] == pytest.approx(1.0)
    assert c[1, 1] == 0.0


def test_softmax_is_a_distribution():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = T.Tensor(rng.standard_normal((3, 7)) * 10)
        s = T.softmax(x).data
        assert (s >= 0).all()
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    u = T.softmax(T.Tensor(np.zeros(4))).data
    np.testing.assert_allclose(u, 0.25, atol=1e-12)


def test_sum_backward_is_all_ones():
    x = T.Tensor(np.arange(12, dtype=float).reshape(3, 4), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_grad_accumulates_until_cleared():
    x = T.Tensor(np.ones(3), requires_grad=True)
    T.backward(T.tsum(x))
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
    T.zero_grads([x])
    assert x.grad is None


def test_self_cosine_loss_is_stationary():
    rng = np.random.default_rng(3)
    a = T.Tensor(rng.standard_normal((4, 4, 6)), requires_grad=True)
    loss = T.global_avg_pool(T.sub(T.constant(1.0), T.cosine_sim(a, a)))
    T.backward(loss)
    assert abs(loss.item()) < 1e-12
    np.testing.assert_allclose(a.grad, 0.0, atol=1e-9)


def test_concat_then_slice_roundtrips_bit_exact():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 2)).astype(np.float32)
    b = rng.standard_normal((3, 5)).astype(np.float32)
    c = T.concat([T.Tensor(a), T.Tensor(b)], axis=1).data
    assert (c[:, :2] == a).all() and (c[:, 2:] == b).all()


def test_avg_pool_kernel_clips_to_map():
    x = T.Tensor(np.arange(16, dtype=float).reshape(4, 4))
    out = T.avg_pool2d(x, 16)
    assert out.shape == (1, 1)
    assert out.data[0, 0] == pytest.approx(7.5)


def test_avg_pool_moving_window_values():
    x = T.Tensor(np.array([[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]]))
    out = T.avg_pool2d(x, 2).data
    np.testing.assert_allclose(out, [[2.0, 3.0]])


def test_upsample_nearest_integer_replication():
    x = T.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    up = T.upsample_nearest(x, (4, 4)).data
    np.testing.assert_array_equal(up, np.kron(x.data, np.ones((2, 2))))


def test_shape_errors():
    with pytest.raises(T.ShapeError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 5))))
    with pytest.raises(T.ShapeError):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
    with pytest.raises(T.ShapeError):
        T.relu(T.Tensor(np.zeros((0, 3))))
    with pytest.raises(T.ShapeError):
        T.backward(T.tsum(T.Tensor(np.ones(3)), axis=0, keepdims=True) + T.Tensor(np.ones(2)))


def test_backward_requires_scalar_root():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(x, 2.0))


def test_no_grad_suppresses_recording():
    x = T.Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = T.tsum(T.mul(x, 2.0))
    assert y._parents is None and not y.requires_grad


def test_reverse_traversal_matches_recording_order():
    order = []
    x = T.Tensor(np.array([2.0]), requires_grad=True)

    def spy(name, t):
        real = t._vjp

        def wrapped(g):
            order.append(name)
            return real(g)

        t._vjp = wrapped
        return t

    a = spy("a", T.mul(x, 3.0))
    b = spy("b", T.add(a, 1.0))
    c = spy("c", T.mul(b, a))
    T.backward(T.tsum(c))
    assert order == ["c", "b", "a"]


def test_stop_capture_replays_values():
    sc = T.StopCapture("capture")
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    first = sc.stop(T.mul(x, 2.0)).data.copy()
    sc.rewind()
    x.data = np.array([5.0, 5.0])
    replayed = sc.stop(T.mul(x, 2.0)).data
    np.testing.assert_array_equal(first, replayed)


def test_weighted_mean_handles_empty_mask():
    x = T.Tensor(np.ones((2, 2)), requires_grad=True)
    out = T.weighted_mean(x, np.zeros((2, 2)))
    assert out.item() == 0.0
    out2 = T.weighted_mean(x, np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert out2.item() == pytest.approx(1.0)
