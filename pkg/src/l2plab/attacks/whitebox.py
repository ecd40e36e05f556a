"""Gradient-based attacks on raw [0, 1] inputs.

Every attack queries the model through :func:`input_gradient`, so enabled
perturbation layers inject fresh noise on each query.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from ..tensor import Tensor, softmax_cross_entropy
from ..tensor import no_grad
from .config import AdvExample, CWConfig, PGDConfig


def input_gradient(model, x: np.ndarray, y: np.ndarray):
    """Gradient of the mean cross-entropy w.r.t. ``x``, plus the logits of that pass."""
    with model.grad_scope(None):
        xt = Tensor(x, requires_grad=True)
        logits = model(xt)
        softmax_cross_entropy(logits, y).backward()
    return xt.grad, logits.data


def eot_gradient(model, x: np.ndarray, y: np.ndarray, samples: int, rng=None) -> np.ndarray:
    """Monte-Carlo mean of the input gradient over ``samples`` noise draws.

    The running-mean update is exact when every draw returns the same
    gradient (deterministic model), for any ``samples``.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    mean = None
    for k in range(1, samples + 1):
        g, _ = input_gradient(model, x, y)
        if mean is None:
            mean = g
        else:
            mean += (g - mean) / k
    return mean


def predict(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model(x[i:i + batch_size]).data.argmax(axis=1))
    return np.concatenate(out)


def project_linf(x_adv: np.ndarray, x0: np.ndarray, eps: float) -> np.ndarray:
    """Project onto the l_inf ball around ``x0`` and the [0, 1] box.

    The ball bound is enforced in computed arithmetic: entries whose rounded
    offset still exceeds ``eps`` are nudged one ulp toward ``x0``.
    """
    out = np.clip(x_adv, x0 - eps, x0 + eps)
    for _ in range(4):
        over = np.abs(out - x0) > eps
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x0[over])
    return np.clip(out, 0.0, 1.0)


def _grad_fn(model, y, eot_samples: int) -> Callable[[np.ndarray], np.ndarray]:
    if eot_samples > 1:
        return lambda x: eot_gradient(model, x, y, eot_samples)
    return lambda x: input_gradient(model, x, y)[0]


def fgsm(model, x, y, eps: float, rng=None, eot_samples: int = 1) -> AdvExample:
    """One signed-gradient step of size ``eps``; sign(0) is 0."""
    x = np.asarray(x, dtype=np.float64)
    g = _grad_fn(model, y, eot_samples)(x)
    x_adv = project_linf(x + eps * np.sign(g), x, eps)
    return AdvExample.build(x, x_adv, predict(model, x_adv) != y)


def pgd(model, x, y, cfg: PGDConfig, rng: Optional[np.random.Generator] = None, eot_samples: int = 1) -> AdvExample:
    x0 = np.asarray(x, dtype=np.float64)
    grad = _grad_fn(model, y, eot_samples)
    if cfg.random_start and cfg.eps > 0:
        rng = rng if rng is not None else np.random.default_rng()
        x_adv = project_linf(x0 + rng.uniform(-cfg.eps, cfg.eps, size=x0.shape), x0, cfg.eps)
    else:
        x_adv = x0.copy()
    for _ in range(cfg.steps):
        g = grad(x_adv)
        x_adv = project_linf(x_adv + cfg.step_size * np.sign(g), x0, cfg.eps)
    return AdvExample.build(x0, x_adv, predict(model, x_adv) != y)


# -------------------------------------------------------------------- C&W L2
def cw_margin(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``Z_true - max_{j != true} Z_j`` per row."""
    rows = np.arange(len(y))
    true = logits[rows, y]
    other = logits.copy()
    other[rows, y] = -np.inf
    return true - other.max(axis=1)


def cw_objective(logits: np.ndarray, y: np.ndarray, kappa: float) -> np.ndarray:
    """Hinged margin ``max(Z_true - max_other, -kappa)``; adversarial once it reaches ``-kappa``."""
    return np.maximum(cw_margin(logits, y), -kappa)


def cw_success(logits: np.ndarray, y: np.ndarray, kappa: float) -> np.ndarray:
    m = cw_margin(logits, y)
    return (m <= -kappa) & (m < 0)


def cw_l2(model, x, y, cfg: CWConfig, rng=None) -> AdvExample:
    """Carlini-Wagner L2 with tanh box reparameterization and a binary search over c.

    Samples that already satisfy the margin condition keep ``delta = 0``.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = len(x0)
    rows = np.arange(n)
    axes = tuple(range(1, x0.ndim))

    with no_grad():
        z0 = model(x0).data
    best_l2 = np.full(n, np.inf)
    best_x = x0.copy()
    best_logits = z0.copy()
    ok0 = cw_success(z0, y, cfg.kappa)
    best_l2[ok0] = 0.0
    history = [best_l2.copy()]

    lo = np.zeros(n)
    hi = np.full(n, cfg.c_hi)
    c = np.full(n, cfg.c_lo)
    w0 = np.arctanh(np.clip(2.0 * x0 - 1.0, -1 + 1e-12, 1 - 1e-12))

    for _ in range(cfg.binary_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = ok0.copy()
        for it in range(1, cfg.max_iters + 1):
            tw = np.tanh(w)
            xa = (tw + 1.0) / 2.0
            with model.grad_scope(None):
                xt = Tensor(xa, requires_grad=True)
                logits = model(xt)
                z = logits.data
                margin = cw_margin(z, y)
                active = margin > -cfg.kappa
                other = z.copy()
                other[rows, y] = -np.inf
                j = other.argmax(axis=1)
                G = np.zeros_like(z)
                G[rows[active], y[active]] = c[active]
                G[rows[active], j[active]] -= c[active]
                (logits * Tensor._wrap(G)).sum().backward()
            delta = xa - x0
            grad_x = 2.0 * delta + xt.grad
            grad_w = grad_x * (1.0 - tw * tw) / 2.0

            l2 = np.sqrt((delta * delta).sum(axis=axes))
            ok = cw_success(z, y, cfg.kappa)
            improve = ok & (l2 < best_l2)
            if improve.any():
                best_l2[improve] = l2[improve]
                best_x[improve] = xa[improve]
                best_logits[improve] = z[improve]
                history.append(best_l2.copy())
            found |= ok

            # Adam
            m = 0.9 * m + 0.1 * grad_w
            v = 0.999 * v + 0.001 * grad_w * grad_w
            mhat = m / (1 - 0.9 ** it)
            vhat = v / (1 - 0.999 ** it)
            w = w - cfg.lr * mhat / (np.sqrt(vhat) + 1e-8)

        hi = np.where(found, np.minimum(hi, c), hi)
        lo = np.where(found, lo, np.maximum(lo, c))
        bounded = hi < cfg.c_hi
        c = np.where(bounded, (lo + hi) / 2.0, np.minimum(c * 10.0, cfg.c_hi))

    success = np.isfinite(best_l2)
    if not success.all():
        # report the last iterate for failures
        fail = ~success
        best_x[fail] = np.clip((np.tanh(w) + 1.0) / 2.0, 0.0, 1.0)[fail]
    best_x = np.clip(best_x, 0.0, 1.0)
    return AdvExample.build(
        x0, best_x, success, logits=best_logits, best_l2_history=np.array(history), final_c=c
    )
