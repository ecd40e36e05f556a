import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from conftest import max_rel_err, numeric_grad
from l2plab.nn import build_model, mini_resnet_spec
from l2plab.perturb import PerturbationLayer, inject, mean_theta, project_theta, theta_stats
from l2plab.tensor import ShapeError, Tensor, softmax_cross_entropy


def layer(shape, theta0=0.01, seed=0, enabled=True, theta_min=0.0):
    p = PerturbationLayer(shape, theta0=theta0, seed=seed, theta_min=theta_min)
    p.enabled = enabled
    return p


def test_theta_zero_identity(rng):
    x = Tensor(rng.standard_normal((3, 2, 2)))
    assert np.array_equal(inject(x, layer((2, 2), theta0=0.0)).data, x.data)


def test_disabled_returns_input_object(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    out = inject(x, layer((4,), theta0=1.0, enabled=False))
    assert out is x


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        inject(Tensor(np.zeros((2, 3))), layer((4,)))


def test_monte_carlo_moments():
    t = 0.37
    p = layer((1,), theta0=t, seed=3)
    x = Tensor(np.zeros((10_000, 1)))
    d = inject(x, p).data[:, 0]
    assert abs(d.mean()) <= 3 * t / 100
    assert abs(d.std() - t) <= 0.05 * t


def test_ks_gaussian_for_fixed_element():
    t, mu = 0.8, 1.5
    p = layer((3,), theta0=t, seed=11)
    x = Tensor(np.full((10_000, 3), mu))
    out = inject(x, p).data[:, 1]
    assert stats.kstest(out, "norm", args=(mu, t)).pvalue > 0.01


def test_fresh_noise_per_batch_element():
    p = layer((2,), theta0=1.0)
    out = inject(Tensor(np.zeros((2, 2))), p).data
    assert not np.array_equal(out[0], out[1])


def test_reparameterized_grad_with_replayed_noise(rng):
    shape = (2, 3)
    feats = rng.standard_normal((4,) + shape)
    w = rng.standard_normal((4,) + shape)
    p = layer(shape, theta0=0.5, seed=7)
    th = p.theta

    def loss():
        p.reseed(7)
        out = inject(Tensor(feats), p)
        return float((out.data * w).sum() ** 2 / 10)

    p.reseed(7)
    x = Tensor(feats.copy(), requires_grad=True)
    out = inject(x, p)
    ((out * Tensor(w)).sum() * (out * Tensor(w)).sum() * 0.1).backward()
    num_theta = numeric_grad(loss, th.data)
    assert max_rel_err(th.grad, num_theta) <= 1e-4
    # d output / d theta == z: with loss = sum(out) the theta grad is sum_batch z
    p.reseed(7)
    th.grad = None
    inject(Tensor(feats), p).sum().backward()
    np.testing.assert_array_equal(th.grad, p.last_noise.sum(axis=0))


def test_project_theta_examples():
    p = layer((2,), theta_min=0.01)
    p.theta.data[:] = [-0.3, 0.2]
    project_theta(p)
    assert p.theta.data.tolist() == [0.01, 0.2]
    project_theta(p)
    assert p.theta.data.tolist() == [0.01, 0.2]
    q = layer((1,))
    q.theta.data[:] = [-1e-9]
    project_theta(q)
    assert q.theta.data.tolist() == [0.0]


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=20), st.floats(0, 1))
def test_project_theta_floor_property(vals, floor):
    p = layer((len(vals),), theta_min=floor)
    p.theta.data[:] = vals
    project_theta(p)
    assert np.all(p.theta.data >= floor)
    kept = np.array(vals) >= floor
    assert np.array_equal(p.theta.data[kept], np.array(vals)[kept])


def test_theta_stats_exact():
    p = layer((3,))
    p.theta.data[:] = [1.0, 2.0, 3.0]
    assert theta_stats([p]) == [{"layer": p.name, "mean": 2.0, "min": 1.0, "max": 3.0}]


def test_stats_initial_mean_is_theta0():
    m = build_model(mini_resnet_spec(base=4, blocks=(1, 1), input_hw=8), (3, 8, 8), theta0=0.03)
    assert all(s["mean"] == pytest.approx(0.03, rel=1e-15) for s in theta_stats(m))
    assert mean_theta(m) == pytest.approx(0.03, rel=1e-15)


def test_model_with_noise_grad_reaches_theta(rng):
    m = build_model(mini_resnet_spec(base=4, blocks=(1, 1), input_hw=8), (3, 8, 8), seed=2, theta0=0.2)
    m.set_noise(True)
    with m.grad_scope("theta"):
        softmax_cross_entropy(m(rng.random((3, 3, 8, 8))), [0, 1, 2]).backward()
    assert all(np.any(p.theta.grad != 0) for p in m.perturbations)
