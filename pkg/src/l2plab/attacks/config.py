"""Attack settings and the adversarial-example record."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Optional, Union

import numpy as np


def parse_eps(value) -> float:
    """Accept floats or exact fraction strings such as ``"8/255"``."""
    if isinstance(value, (int, float)):
        return float(value)
    return float(Fraction(str(value).strip()))


@dataclass(frozen=True)
class FGSMConfig:
    eps: float = 8 / 255
    kind: str = field(default="fgsm", init=False)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")


@dataclass(frozen=True)
class PGDConfig:
    eps: float = 8 / 255
    steps: int = 7
    step_size: float = 0.01
    random_start: bool = True
    kind: str = field(default="pgd", init=False)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError(f"eps must be >= 0, got {self.eps}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")


@dataclass(frozen=True)
class CWConfig:
    c_lo: float = 1e-3
    c_hi: float = 1e10
    binary_steps: int = 9
    max_iters: int = 1000
    lr: float = 5e-4
    kappa: float = 0.0
    kind: str = field(default="cw", init=False)

    def __post_init__(self):
        if not self.c_lo < self.c_hi:
            raise ValueError(f"need c_lo < c_hi, got {self.c_lo}, {self.c_hi}")
        if self.binary_steps < 1 or self.max_iters < 1:
            raise ValueError("binary_steps and max_iters must be >= 1")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")


@dataclass(frozen=True)
class FewPixelConfig:
    k: int = 1
    pop_size: int = 400
    max_gens: int = 75
    seed: int = 0
    mutation: float = 0.5
    crossover: float = 0.9
    levels: Optional[int] = None
    early_stop: bool = True
    kind: str = field(default="fewpixel", init=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.pop_size < 4:
            raise ValueError("differential evolution needs pop_size >= 4")
        if self.levels is not None and self.levels < 2:
            raise ValueError("levels must be >= 2")


@dataclass(frozen=True)
class EOTConfig:
    inner: Union[FGSMConfig, PGDConfig] = field(default_factory=PGDConfig)
    samples: int = 80
    kind: str = field(default="eot", init=False)

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if not isinstance(self.inner, (FGSMConfig, PGDConfig)):
            raise TypeError("EOT wraps FGSM or PGD only")

    @property
    def eps(self) -> float:
        return self.inner.eps


AttackConfig = Union[FGSMConfig, PGDConfig, CWConfig, FewPixelConfig, EOTConfig]

_BY_KIND = {"fgsm": FGSMConfig, "pgd": PGDConfig, "cw": CWConfig, "fewpixel": FewPixelConfig}


def attack_to_dict(cfg: AttackConfig) -> dict:
    d = asdict(cfg)
    if isinstance(cfg, EOTConfig):
        d["inner"] = attack_to_dict(cfg.inner)
    return d


def attack_from_dict(d: dict) -> AttackConfig:
    d = dict(d)
    kind = d.pop("kind")
    if kind == "eot":
        inner = attack_from_dict(d.pop("inner"))
        return EOTConfig(inner=inner, **d)
    try:
        cls = _BY_KIND[kind]
    except KeyError:
        raise ValueError(f"unknown attack kind {kind!r}") from None
    if "eps" in d:
        d["eps"] = parse_eps(d["eps"])
    return cls(**d)


def attack_label(cfg: AttackConfig) -> str:
    if isinstance(cfg, FGSMConfig):
        return f"FGSM(eps={cfg.eps:.4g})"
    if isinstance(cfg, PGDConfig):
        return f"PGD-{cfg.steps}(eps={cfg.eps:.4g})"
    if isinstance(cfg, CWConfig):
        return f"CW-L2(kappa={cfg.kappa:g})"
    if isinstance(cfg, FewPixelConfig):
        return f"{cfg.k}-pixel"
    return f"EOT-{cfg.samples}/{attack_label(cfg.inner)}"


@dataclass
class AdvExample:
    """Batch of adversarial inputs with per-sample success and measured distortion."""

    x_adv: np.ndarray
    success: np.ndarray
    linf: np.ndarray
    l2: np.ndarray
    pixels: np.ndarray
    extras: dict = field(default_factory=dict)

    @classmethod
    def build(cls, x: np.ndarray, x_adv: np.ndarray, success, **extras) -> "AdvExample":
        linf, l2, pixels = distortion(x, x_adv)
        return cls(x_adv, np.asarray(success, dtype=bool), linf, l2, pixels, extras)


def distortion(x: np.ndarray, x_adv: np.ndarray):
    """Per-sample l_inf, l_2 and changed-pixel count (a pixel is one spatial position)."""
    d = (x_adv - x).reshape(x.shape[0], -1)
    linf = np.abs(d).max(axis=1)
    l2 = np.sqrt((d * d).sum(axis=1))
    if x.ndim == 4:
        changed = np.any(x_adv != x, axis=1).reshape(x.shape[0], -1).sum(axis=1)
    else:
        changed = (d != 0).sum(axis=1)
    return linf, l2, changed
