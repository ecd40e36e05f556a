import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import max_rel_err, numeric_grad
from l2plab import tensor as T
from l2plab.tensor import SGD, GraphError, ShapeError, Tensor, kernels

# mpmath at 30 digits: log(e + e^2 + e^3) - 3
CE_123_TARGET2 = 0.407605964444380304


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# ------------------------------------------------------------------ forward ops
def test_relu_values():
    assert T.relu(leaf([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_matmul_identity(rng):
    A = rng.standard_normal((3, 3))
    out = T.matmul(Tensor(np.eye(3)), Tensor(A))
    assert np.array_equal(out.data, A)


def test_conv_ones_window_sum():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = T.conv2d(x, w, stride=1, pad=0)
    assert out.shape == (1, 1, 2, 2)
    assert np.all(out.data == 4.0)


def _conv_loops(x, w, b, stride, pad):
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((N, F, Ho, Wo))
    for n in range(N):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, f, i, j] = (patch * w[f]).sum() + b[f]
    return out


@given(
    n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), hw=st.integers(3, 7),
    k=st.sampled_from([1, 2, 3]), stride=st.sampled_from([1, 2]), pad=st.integers(0, 1),
    seed=st.integers(0, 10**6),
)
def test_conv_matches_direct_loops(n, c, f, hw, k, stride, pad, seed):
    r = np.random.default_rng(seed)
    x, w, b = r.standard_normal((n, c, hw, hw)), r.standard_normal((f, c, k, k)), r.standard_normal(f)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, _conv_loops(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(leaf(np.zeros((2, 3))), leaf(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        T.matmul(leaf(np.zeros((2, 3))), leaf(np.zeros((2, 3))))
    with pytest.raises(ShapeError):
        T.conv2d(leaf(np.zeros((1, 2, 4, 4))), leaf(np.zeros((1, 3, 3, 3))))


def test_graph_recorded_only_when_needed():
    a, b = Tensor(np.ones(3)), Tensor(np.ones(3))
    assert T.add(a, b)._prev == ()
    c = leaf(np.ones(3))
    assert T.add(a, c)._prev != ()
    with T.no_grad():
        assert not T.add(a, c).requires_grad


# ---------------------------------------------------------------- cross-entropy
def test_ce_uniform_is_log_c():
    for C in (2, 5, 10):
        loss = T.softmax_cross_entropy(Tensor(np.zeros((1, C))), [C - 1])
        assert loss.item() == pytest.approx(np.log(C), rel=1e-15)


def test_ce_saturated_no_overflow():
    loss = T.softmax_cross_entropy(Tensor(np.array([[1000.0, 0.0]])), [0])
    assert np.isfinite(loss.item()) and loss.item() == pytest.approx(0.0, abs=1e-300)


def test_ce_oracle_value():
    loss = T.softmax_cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0]])), [2])
    assert loss.item() == pytest.approx(CE_123_TARGET2, rel=1e-14)


def test_ce_rejects_bad_target():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(ValueError):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), [-1])


# --------------------------------------------------------------------- backward
def test_backward_sum_all_ones(rng):
    x = leaf(rng.standard_normal((2, 3, 4)))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = leaf([1.0, 2.0])
    T.square(x).sum().backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_errors():
    with pytest.raises(GraphError):
        leaf([1.0, 2.0]).backward()  # not a scalar
    with pytest.raises(GraphError):
        Tensor(np.array(3.0)).backward()  # detached


def test_accumulation_over_consumers():
    x = leaf([1.0, -2.0, 3.0])
    (x + x + x * 2.0).sum().backward()
    assert x.grad.tolist() == [4.0, 4.0, 4.0]


def test_backward_linearity(rng):
    x0 = rng.standard_normal((3, 4))
    w = Tensor(rng.standard_normal((4, 2)))

    def grad_of(fn):
        x = leaf(x0)
        fn(x).backward()
        return x.grad

    l1 = lambda x: T.tsum(T.relu(T.matmul(x, w)))
    l2 = lambda x: T.tmean(T.square(x))
    g1, g2 = grad_of(l1), grad_of(l2)
    g12 = grad_of(lambda x: l1(x) * 2.5 + l2(x) * -0.5)
    np.testing.assert_allclose(g12, 2.5 * g1 - 0.5 * g2, rtol=1e-13, atol=1e-15)


def _check_op(build, arrays, tol=1e-4):
    leaves = [leaf(a) for a in arrays]
    build(*leaves).backward()
    for t in leaves:
        f = lambda: build(*[Tensor(l.data) for l in leaves]).item()
        num = numeric_grad(f, t.data)
        assert max_rel_err(t.grad, num) <= tol


OPS = {
    "add": (lambda a, b: T.tsum(T.square(T.add(a, b))), [(3, 4), (3, 4)]),
    "sub": (lambda a, b: T.tsum(T.square(T.sub(a, b))), [(3, 4), (3, 4)]),
    "mul": (lambda a, b: T.tsum(T.mul(a, b)), [(3, 4), (3, 4)]),
    "neg": (lambda a: T.tsum(T.square(T.neg(a))), [(5,)]),
    "relu": (lambda a: T.tsum(T.square(T.relu(a))), [(4, 5)]),
    "matmul": (lambda a, b: T.tsum(T.square(T.matmul(a, b))), [(3, 4), (4, 2)]),
    "add_bias2d": (lambda a, b: T.tsum(T.square(T.add_bias(a, b))), [(3, 4), (4,)]),
    "add_bias4d": (lambda a, b: T.tsum(T.square(T.add_bias(a, b))), [(2, 3, 2, 2), (3,)]),
    "mean": (lambda a: T.square(T.tmean(a)), [(3, 3)]),
    "spatial_mean": (lambda a: T.tsum(T.square(T.spatial_mean(a))), [(2, 3, 4, 4)]),
    "reshape": (lambda a: T.tsum(T.square(T.matmul(T.reshape(a, (2, 6)), Tensor(np.arange(12.).reshape(6, 2))))),
                [(3, 4)]),
    "flatten": (lambda a: T.tsum(T.square(T.flatten(a))), [(2, 2, 3)]),
    "pad_channels": (lambda a: T.tsum(T.square(T.pad_channels(a, 1, 2))), [(2, 2, 3, 3)]),
    "avg_pool": (lambda a: T.tsum(T.square(T.avg_pool2d(a, 2))), [(2, 2, 4, 4)]),
    "channel_affine": (lambda a: T.tsum(T.square(T.channel_affine(a, np.array([2.0, 0.5]), np.array([0.1, -1.0])))),
                       [(2, 2, 3, 3)]),
    "conv_s1p1": (lambda x, w, b: T.tsum(T.square(T.conv2d(x, w, b, 1, 1))), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    "conv_s2p1": (lambda x, w, b: T.tsum(T.square(T.conv2d(x, w, b, 2, 1))), [(2, 2, 6, 6), (3, 2, 3, 3), (3,)]),
    "conv_1x1": (lambda x, w: T.tsum(T.square(T.conv2d(x, w, None, 2, 0))), [(1, 3, 4, 4), (2, 3, 1, 1)]),
    "ce": (lambda z: T.softmax_cross_entropy(z, [0, 2, 1]), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_finite_difference_per_op(name, seed):
    build, shapes = OPS[name]
    r = np.random.default_rng(seed)
    _check_op(build, [r.standard_normal(s) for s in shapes])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_debug_mode_catches_nonfinite():
    T.set_debug(True)
    try:
        with pytest.raises(FloatingPointError):
            T.mul(leaf([np.inf]), 0.0)
    finally:
        T.set_debug(False)


def test_determinism(rng):
    x0, w0 = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
    outs = []
    for _ in range(2):
        x, w = leaf(x0), leaf(w0)
        y = T.tsum(T.square(T.conv2d(x, w, None, 1, 1)))
        y.backward()
        outs.append((y.item(), x.grad.tobytes(), w.grad.tobytes()))
    assert outs[0] == outs[1]


# ------------------------------------------------------------------- backends
@pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="extension not built")
@given(
    n=st.integers(1, 3), c=st.integers(1, 4), h=st.integers(2, 9), w=st.integers(2, 9),
    k=st.integers(1, 3), stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 10**6),
)
def test_backends_bitwise_equal(n, c, h, w, k, stride, pad, seed):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    cy, py = kernels.BACKENDS["cython"], kernels.BACKENDS["numpy"]
    a, b = cy.im2col(x, k, k, stride, pad), py.im2col(x, k, k, stride, pad)
    assert np.array_equal(a, b)
    cols = r.standard_normal(a.shape)
    assert np.array_equal(cy.col2im(cols, x.shape, k, k, stride, pad), py.col2im(cols, x.shape, k, k, stride, pad))
    if h % 2 == 0 and w % 2 == 0:
        assert np.array_equal(cy.avg_pool_forward(x, 2), py.avg_pool_forward(x, 2))
        g = r.standard_normal((n, c, h // 2, w // 2))
        assert np.array_equal(cy.avg_pool_backward(g, 2), py.avg_pool_backward(g, 2))


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


# ------------------------------------------------------------------ optimizer
def test_sgd_plain_step():
    p = leaf([1.0, -2.0])
    p.grad = np.array([0.5, 1.0])
    SGD(lr=0.1, momentum=0.0, weight_decay=0.0).step([("p", p, True)])
    np.testing.assert_array_equal(p.data, np.array([1.0, -2.0]) - 0.1 * np.array([0.5, 1.0]))


def test_sgd_nesterov_unrolled():
    g, lr, m = np.array([0.3, -1.2]), 0.1, 0.9
    p0 = np.array([1.0, 2.0])
    p = leaf(p0)
    opt = SGD(lr=lr, momentum=m, nesterov=True, weight_decay=0.0)
    for _ in range(2):
        p.grad = g.copy()
        opt.step([("p", p, True)])
    # hand unroll: v1 = g, p1 = p0 - lr (g + m g); v2 = m g + g, p2 = p1 - lr (g + m v2)
    v2 = m * g + g
    p2 = p0 - lr * (g + m * g) - lr * (g + m * v2)
    np.testing.assert_allclose(p.data, p2, rtol=0, atol=1e-15)


def test_sgd_decay_only_on_flagged():
    w, th = leaf([2.0]), leaf([2.0])
    w.grad, th.grad = np.zeros(1), np.zeros(1)
    SGD(lr=0.1, momentum=0.9, weight_decay=1e-4).step([("w", w, True), ("t", th, False)])
    assert w.data[0] == pytest.approx(2.0 * (1 - 0.1 * 1e-4 * 1.9), rel=1e-15)
    assert th.data[0] == 2.0


def test_sgd_decay_only_momentum_free():
    w = leaf([3.0])
    w.grad = np.zeros(1)
    SGD(lr=0.1, momentum=0.0, weight_decay=1e-4).step([("w", w, True)])
    assert w.data[0] == pytest.approx(3.0 * (1 - 0.1 * 1e-4), rel=1e-15)


def test_sgd_missing_grad():
    with pytest.raises(GraphError):
        SGD().step([("w", leaf([1.0]), True)])
