import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from l2plab.attacks import PGDConfig
from l2plab.data import synthetic
from l2plab.nn import build_model, mini_resnet_spec, mlp_spec
from l2plab.perturb import mean_theta
from l2plab.tensor import SGD
from l2plab.trainer import (
    IsolationError,
    TrainConfig,
    WarmupError,
    read_theta_csv,
    regularizer_g,
    tau,
    theta_step,
    train,
    w_step,
    write_theta_csv,
)

# exact harmonic number H_10 = 7381/2520 (fractions oracle)
H10 = float(Fraction(7381, 2520))


def small(seed=0, theta0=0.01, perturb=True):
    return build_model(mlp_spec([16, 3], perturb=perturb), (1, 4, 4), seed=seed, theta0=theta0)


def data(n=48, seed=0):
    return synthetic(n, classes=3, shape=(1, 4, 4), seed=seed)


def cfg(**kw):
    base = dict(epochs=3, warmup_epochs=1, batch_size=16, milestones=(2,), adversarial=PGDConfig(steps=1))
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------------------ tau
def test_tau_examples():
    assert tau(5, 5) == 1.0
    assert tau(6, 5) == 1.5
    assert tau(14, 5) == pytest.approx(2.9289682, abs=1e-7)
    assert tau(14, 5) == H10


def test_tau_rejects_before_start():
    with pytest.raises(ValueError):
        tau(3, 4)


@given(st.integers(0, 100), st.integers(0, 200))
def test_tau_strictly_increasing(s, k):
    assert tau(s + k + 1, s) > tau(s + k, s)
    assert tau(s + k, s) >= math.log(k + 1)  # H_n > ln(n+1): unbounded


# ---------------------------------------------------------------- regularizer
def test_regularizer_examples():
    g, _ = regularizer_g([np.array([1.0])], 1.0)
    assert g == -1.0
    _, (d,) = regularizer_g([np.array([4.0])], 2.0)
    fd = (regularizer_g([np.array([4.0 + 1e-5])], 2.0)[0] - regularizer_g([np.array([4.0 - 1e-5])], 2.0)[0]) / 2e-5
    assert d[0] == -0.125
    assert fd == pytest.approx(-0.125, rel=1e-8)
    _, (d0,) = regularizer_g([np.array([0.0])], 1.0)
    assert np.isfinite(d0).all()
    with pytest.raises(ValueError):
        regularizer_g([np.array([1.0])], 0.0)


@given(st.floats(1e-6, 100), st.floats(1e-6, 100), st.floats(0.5, 50), st.floats(0.5, 50))
def test_regularizer_monotone(a, b, t1, t2):
    lo, hi = sorted((a, b))
    tl, th = sorted((t1, t2))
    if hi == lo or th == tl:
        return
    g_lo, (d_lo,) = regularizer_g([np.array([lo])], tl)
    g_hi, (d_hi,) = regularizer_g([np.array([hi])], tl)
    assert g_hi < g_lo
    assert abs(d_hi[0]) < abs(d_lo[0])
    _, (d_late,) = regularizer_g([np.array([lo])], th)
    assert abs(d_late[0]) < abs(d_lo[0])


# ---------------------------------------------------------------------- steps
def test_theta_step_l2p_r_closed_form():
    m = small(theta0=1.0)
    m.set_noise(True)
    ds = data()
    theta_step(m, ds.images[:8], ds.labels[:8], cfg(mode="l2p-r"), lr=123.0, tau_value=1.0)
    assert all(np.all(p.theta.data == 1.0 + 1e-4 * 0.5) for p in m.perturbations)


def test_theta_step_pni_zero_loss_grad_unchanged():
    m = small(theta0=0.3)
    m.set_noise(True)
    for _, t in m.params.items("W"):
        t.data[...] = 0.0  # constant logits: zero loss gradient for theta
    ds = data()
    theta_step(m, ds.images[:8], ds.labels[:8], cfg(mode="pni-style"), lr=0.1, tau_value=1.0)
    assert all(np.all(p.theta.data == 0.3) for p in m.perturbations)


def test_theta_step_during_warmup_rejected():
    m = small()
    ds = data()
    with pytest.raises(WarmupError):
        theta_step(m, ds.images[:4], ds.labels[:4], cfg(), 0.1, 1.0)


@pytest.mark.parametrize("mode", ["l2p", "l2p-r", "pni-style"])
def test_step_isolation(mode):
    m = small(theta0=0.05)
    m.set_noise(True)
    ds = data()
    c = cfg(mode=mode)
    x, y = ds.images[:16], ds.labels[:16]
    th0 = m.params.digest("theta")
    w_step(m, x, y, c, SGD(), x)
    assert m.params.digest("theta") == th0
    w0 = m.params.digest("W")
    theta_step(m, x, y, c, 0.1, 1.0, x)
    assert m.params.digest("W") == w0
    assert m.params.digest("theta") != th0


def test_mode_weights():
    assert cfg(mode="vanilla").weights == (0.0, 1.0)
    assert cfg(mode="none").weights == (1.0, 0.0)
    assert cfg(mode="l2p").weights == (0.5, 0.5)
    assert cfg(mode="l2p", adversarial=None).weights == (1.0, 0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(milestones=(3, 2))
    with pytest.raises(ValueError):
        cfg(mode="bayes")
    with pytest.raises(ValueError):
        cfg(epochs=2, warmup_epochs=3)


def test_lr_schedule():
    c = TrainConfig(lr=0.1, milestones=(150, 250))
    assert c.lr_at(150) == 0.1
    assert c.lr_at(151) == pytest.approx(0.01)
    assert c.lr_at(251) == pytest.approx(0.001)


# ---------------------------------------------------------------------- train
def test_single_epoch_all_warmup_keeps_theta0():
    m = small(theta0=0.02)
    r = train(m, data(), cfg(epochs=1, warmup_epochs=1, milestones=()))
    assert all(np.all(p.theta.data == 0.02) for p in m.perturbations)
    assert r.records[0].noise is False


def test_warmup_forward_has_no_noise():
    m = small(theta0=0.5)
    drawn = {}

    def on_epoch(rec, mdl, opt):
        drawn[rec.epoch] = [p.last_noise is not None for p in mdl.perturbations]

    train(m, data(), cfg(epochs=2, warmup_epochs=1, milestones=()), on_epoch=on_epoch)
    assert drawn == {1: [False], 2: [True]}


def test_train_deterministic():
    outs = []
    for _ in range(2):
        m = small(seed=4)
        train(m, data(), cfg(mode="l2p"))
        outs.append((m.params.digest("W"), m.params.digest("theta")))
    assert outs[0] == outs[1]


def test_train_isolation_checks_counted():
    m = small()
    r = train(m, data(n=32), cfg(check_isolation=True))
    # 2 batches per epoch; 3 epochs of w steps, 2 epochs of theta steps
    assert r.isolation_checks == 2 * 3 + 2 * 2


def test_isolation_violation_detected(monkeypatch):
    import l2plab.trainer as tr

    real = tr.w_step

    def leaky(model, *a, **k):
        out = real(model, *a, **k)
        model.perturbations[0].theta.data[0] += 1.0
        return out

    monkeypatch.setattr(tr, "w_step", leaky)
    with pytest.raises(IsolationError):
        train(small(), data(), cfg(check_isolation=True))


def test_epoch_alternation_runs():
    m = small()
    r = train(m, data(), cfg(alternation="epoch"))
    assert r.records[-1].mean_theta != 0.01


def test_modes_without_noise_keep_model_deterministic():
    for mode in ("vanilla", "none"):
        m = small(perturb=False)
        train(m, data(), cfg(mode=mode))
        assert not m.is_stochastic()


def test_empty_dataset_rejected():
    ds = data()
    from dataclasses import replace
    empty = replace(ds, images=ds.images[:0], labels=ds.labels[:0])
    with pytest.raises(ValueError):
        train(small(), empty, cfg())


def test_theta_csv_matches_recomputation(tmp_path):
    m = build_model(mini_resnet_spec(base=2, blocks=(1,), input_hw=4, in_channels=1, mean=(), std=()), (1, 4, 4))
    r = train(m, data(), cfg(mode="l2p"))
    write_theta_csv(tmp_path / "t.csv", r.records)
    rows = read_theta_csv(tmp_path / "t.csv")
    last = [row for row in rows if row["epoch"] == 3]
    assert [row["mean"] for row in last] == [float(p.theta.data.mean()) for p in m.perturbations]
    assert r.records[-1].mean_theta == mean_theta(m)
