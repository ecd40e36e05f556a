"""Few-pixel black-box attack driven by differential evolution (rand/1/bin).

A candidate encodes ``k`` tuples ``(row, col, c_1 .. c_C)``; rows/cols are
continuous in ``[0, H)`` / ``[0, W)`` and floored when applied, colour values
live in ``[0, 1]``. The model is only queried through forward passes.
"""

from __future__ import annotations

import numpy as np

from ..tensor import no_grad, softmax
from .config import AdvExample, FewPixelConfig


def _bounds(k: int, shape):
    C, H, W = shape
    lo = np.tile(np.r_[0.0, 0.0, np.zeros(C)], k)
    hi = np.tile(np.r_[H - 1e-9, W - 1e-9, np.ones(C)], k)
    return lo, hi


def apply_pixels(x: np.ndarray, cand: np.ndarray, levels=None) -> np.ndarray:
    """Write candidate pixels into copies of the (C, H, W) image ``x``.

    ``cand`` is ``(P, k*(2+C))``; returns ``(P, C, H, W)``.
    """
    C, H, W = x.shape
    P = cand.shape[0]
    tuples = cand.reshape(P, -1, 2 + C)
    out = np.broadcast_to(x, (P, C, H, W)).copy()
    rows = np.clip(np.floor(tuples[:, :, 0]).astype(np.int64), 0, H - 1)
    cols = np.clip(np.floor(tuples[:, :, 1]).astype(np.int64), 0, W - 1)
    colors = np.clip(tuples[:, :, 2:], 0.0, 1.0)
    if levels is not None:
        colors = np.round(colors * (levels - 1)) / (levels - 1)
    idx = np.arange(P)
    for t in range(tuples.shape[1]):
        out[idx, :, rows[:, t], cols[:, t]] = colors[:, t, :]
    return out


def _fitness(model, x, y, cand, levels, batch_size=512):
    """True-class probability (to minimise) and predicted label per candidate."""
    probs, preds = [], []
    with no_grad():
        for i in range(0, len(cand), batch_size):
            imgs = apply_pixels(x, cand[i:i + batch_size], levels)
            z = model(imgs).data
            p = softmax(z)
            probs.append(p[:, y])
            preds.append(z.argmax(axis=1))
    return np.concatenate(probs), np.concatenate(preds)


def differential_evolution(model, x: np.ndarray, y: int, cfg: FewPixelConfig, rng=None):
    """Minimise the true-class probability of one image; returns (best, fitness, pred, gens)."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    lo, hi = _bounds(cfg.k, x.shape)
    D = lo.size
    P = cfg.pop_size
    pop = lo + rng.random((P, D)) * (hi - lo)
    fit, pred = _fitness(model, x, y, pop, cfg.levels)
    gens = 0
    for gens in range(1, cfg.max_gens + 1):
        b = int(np.argmin(fit))
        if cfg.early_stop and pred[b] != y:
            gens -= 1
            break
        # three distinct partners per member, all different from the member itself
        r = np.empty((P, 3), dtype=np.int64)
        for i in range(P):
            choice = rng.choice(P - 1, size=3, replace=False)
            r[i] = choice + (choice >= i)
        mutant = pop[r[:, 0]] + cfg.mutation * (pop[r[:, 1]] - pop[r[:, 2]])
        mutant = np.clip(mutant, lo, hi)
        cross = rng.random((P, D)) < cfg.crossover
        cross[np.arange(P), rng.integers(0, D, size=P)] = True
        trial = np.where(cross, mutant, pop)
        tfit, tpred = _fitness(model, x, y, trial, cfg.levels)
        keep = tfit <= fit
        pop[keep] = trial[keep]
        fit[keep] = tfit[keep]
        pred[keep] = tpred[keep]
    b = int(np.argmin(fit))
    return pop[b].copy(), float(fit[b]), int(pred[b]), gens


def few_pixel(model, x, y, cfg: FewPixelConfig, rng=None) -> AdvExample:
    """Attack each image in the batch independently; at most ``k`` pixels change."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x_adv = np.empty_like(x)
    best_fit = np.empty(len(x))
    gens = np.empty(len(x), dtype=np.int64)
    cands = []
    for i in range(len(x)):
        cand, fit, _, g = differential_evolution(model, x[i], int(y[i]), cfg, rng)
        x_adv[i] = apply_pixels(x[i], cand[None], cfg.levels)[0]
        best_fit[i] = fit
        gens[i] = g
        cands.append(cand)
    with no_grad():
        pred = model(x_adv).data.argmax(axis=1)
    return AdvExample.build(
        x, x_adv, pred != y, fitness=best_fit, generations=gens, candidates=np.array(cands)
    )
