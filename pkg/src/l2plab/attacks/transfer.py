"""Attack dispatch, robust accuracy and source -> victim transfer evaluation."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .config import (
    AdvExample,
    AttackConfig,
    CWConfig,
    EOTConfig,
    FewPixelConfig,
    FGSMConfig,
    PGDConfig,
    distortion,
)
from .fewpixel import few_pixel
from .whitebox import cw_l2, fgsm, pgd, predict


def run_attack(model, x, y, cfg: AttackConfig, rng: Optional[np.random.Generator] = None) -> AdvExample:
    if isinstance(cfg, FGSMConfig):
        return fgsm(model, x, y, cfg.eps, rng)
    if isinstance(cfg, PGDConfig):
        return pgd(model, x, y, cfg, rng)
    if isinstance(cfg, CWConfig):
        return cw_l2(model, x, y, cfg, rng)
    if isinstance(cfg, FewPixelConfig):
        return few_pixel(model, x, y, cfg, rng)
    if isinstance(cfg, EOTConfig):
        if isinstance(cfg.inner, FGSMConfig):
            return fgsm(model, x, y, cfg.inner.eps, rng, eot_samples=cfg.samples)
        return pgd(model, x, y, cfg.inner, rng, eot_samples=cfg.samples)
    raise TypeError(f"unsupported attack config {cfg!r}")


def craft(model, x, y, cfg: AttackConfig, rng, batch_size: int = 128) -> np.ndarray:
    """Adversarial inputs for a whole array, crafted batch by batch."""
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    for i in range(0, len(x), batch_size):
        out[i:i + batch_size] = run_attack(model, x[i:i + batch_size], y[i:i + batch_size], cfg, rng).x_adv
    return out


def robust_accuracy(source, victim, x, y, cfg: Optional[AttackConfig], rng, batch_size: int = 128) -> float:
    """Accuracy of ``victim`` on inputs crafted against ``source`` (clean if ``cfg`` is None)."""
    x_eval = x if cfg is None else craft(source, x, y, cfg, rng, batch_size)
    return float(np.mean(predict(victim, x_eval) == y))


def reseed_pair(source, victim, seed: int, repeat: int) -> None:
    """Put both models' noise streams in the state fixed by ``(seed, repeat)``."""
    noise_seed = int(np.random.SeedSequence([seed, 8, repeat]).generate_state(1)[0])
    source.reseed_noise(noise_seed)
    if victim is not source:
        victim.reseed_noise(noise_seed)


def transfer_eval(source, victim, x, y, cfg: Optional[AttackConfig], repeats: int = 5, seed: int = 0,
                  batch_size: int = 128) -> dict:
    """Victim accuracy on source-crafted examples, mean and std over ``repeats``.

    Each repeat reseeds the models' noise streams; the attack's own random
    start stream is the same in every repeat, so a deterministic model
    reports identical accuracies.
    """
    if source.input_shape != victim.input_shape or source.num_classes != victim.num_classes:
        raise ValueError(
            f"source {source.input_shape}->{source.num_classes} and victim "
            f"{victim.input_shape}->{victim.num_classes} are incompatible"
        )
    x = np.asarray(x, dtype=np.float64)
    accs, linf, l2 = [], 0.0, []
    for r in range(repeats):
        reseed_pair(source, victim, seed, r)
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
        x_eval = x if cfg is None else craft(source, x, y, cfg, rng, batch_size)
        accs.append(float(np.mean(predict(victim, x_eval, batch_size) == y)))
        d_inf, d_2, _ = distortion(x, x_eval)
        linf = max(linf, float(d_inf.max())) if len(x) else linf
        l2.append(float(d_2.mean()) if len(x) else 0.0)
    out = summarize(accs)
    out["max_linf"] = linf
    out["mean_l2"] = float(np.mean(l2))
    return out


def summarize(accs) -> dict:
    """Mean and sample std; identical repeats give exactly their value and 0."""
    accs = np.asarray(accs, dtype=np.float64)
    repeats = len(accs)
    if np.all(accs == accs[0]):
        mean, std = float(accs[0]), 0.0
    else:
        mean, std = float(accs.mean()), float(accs.std(ddof=1))
    return {
        "accuracies": accs.tolist(),
        "mean": mean,
        "std": std,
        "repeats": repeats,
        "single_repeat": repeats == 1,
    }
