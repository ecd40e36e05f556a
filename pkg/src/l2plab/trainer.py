"""Alternating training of network weights and perturbation scales.

Per post-warmup batch the trainer runs a weight step (theta frozen) and then
a theta step (weights frozen). The theta step combines the loss gradient with
an annealed square-root reward on theta whose weight decays like
1 / harmonic-number of the epochs since noise was switched on.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from .attacks.config import PGDConfig
from .attacks.whitebox import pgd
from .data import BatchPlan, Dataset, batches
from .perturb import mean_theta, project_theta, theta_stats
from .tensor import SGD, softmax_cross_entropy

MODES = ("l2p", "l2p-r", "pni-style", "vanilla", "none")

# (alpha, beta) weights of clean and adversarial loss per mode
MODE_WEIGHTS = {
    "l2p": (0.5, 0.5),
    "l2p-r": (0.5, 0.5),
    "pni-style": (0.5, 0.5),
    "vanilla": (0.0, 1.0),
    "none": (1.0, 0.0),
}
NOISY_MODES = ("l2p", "l2p-r", "pni-style")


class WarmupError(RuntimeError):
    """A theta step was requested before noise injection is active."""


class IsolationError(AssertionError):
    """A step changed the parameter group it must leave untouched."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 128
    lr: float = 0.1
    milestones: Tuple[int, ...] = (20, 32)
    lr_factor: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    gamma: float = 1e-4
    alpha: Optional[float] = None
    beta: Optional[float] = None
    warmup_epochs: int = 20
    mode: str = "l2p"
    adversarial: Optional[PGDConfig] = field(default_factory=lambda: PGDConfig(steps=7))
    alternation: str = "batch"
    reg_eps: float = 1e-12
    seed: int = 0
    check_isolation: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.alternation not in ("batch", "epoch"):
            raise ValueError(f"alternation must be 'batch' or 'epoch', got {self.alternation!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing: {self.milestones}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        # warmup may span the whole run (then no theta step ever happens)
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError(f"warmup_epochs must lie in [0, epochs], got {self.warmup_epochs}")

    @property
    def weights(self) -> Tuple[float, float]:
        a, b = MODE_WEIGHTS[self.mode]
        a = a if self.alpha is None else self.alpha
        b = b if self.beta is None else self.beta
        if self.adversarial is None:
            return 1.0, 0.0
        return a, b

    @property
    def noise_start(self) -> int:
        """First (1-based) epoch with noise injection."""
        return self.warmup_epochs + 1

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for m in self.milestones if epoch > m)
        return self.lr * self.lr_factor ** drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    clean_loss: float
    adv_loss: float
    noise: bool
    tau: float
    mean_theta: float
    theta: List[dict]


# ------------------------------------------------------------------ schedule
def tau(t: int, s: int) -> float:
    """Harmonic number ``H_{t-s+1}``: 1 at t = s, 1.5 at t = s + 1, ..."""
    if t < s:
        raise ValueError(f"tau undefined before the start epoch: t={t} < s={s}")
    return math.fsum(1.0 / (i - s + 1) for i in range(s, t + 1))


def regularizer_g(thetas, tau_value: float, eps: float = 1e-12):
    """Return ``(g, [dg/dtheta])`` for ``g = -sum(sqrt(max(theta, eps))) / tau``."""
    if tau_value <= 0:
        raise ValueError(f"tau must be positive, got {tau_value}")
    arrays = [t.data if hasattr(t, "data") else np.asarray(t, dtype=np.float64) for t in thetas]
    value = 0.0
    grads = []
    for a in arrays:
        r = np.sqrt(np.maximum(a, eps))
        value -= float(r.sum()) / tau_value
        grads.append(-1.0 / (2.0 * tau_value * r))
    return value, grads


# --------------------------------------------------------------------- steps
def _objective(model, x, y, x_adv, weights):
    a, b = weights
    loss, clean, adv = None, float("nan"), float("nan")
    if a:
        lc = softmax_cross_entropy(model(x), y)
        clean = lc.item()
        loss = lc * a
    if b and x_adv is not None:
        la = softmax_cross_entropy(model(x_adv), y)
        adv = la.item()
        loss = la * b if loss is None else loss + la * b
    return loss, clean, adv


def make_adversarial(model, x, y, cfg: TrainConfig, rng) -> Optional[np.ndarray]:
    if cfg.adversarial is None or cfg.weights[1] == 0:
        return None
    return pgd(model, x, y, cfg.adversarial, rng).x_adv


def w_step(model, x, y, cfg: TrainConfig, opt: SGD, x_adv=None) -> Tuple[float, float]:
    """One SGD step on the weights with theta held fixed."""
    with model.grad_scope("W"):
        model.params.zero_grad()
        loss, clean, adv = _objective(model, x, y, x_adv, cfg.weights)
        loss.backward()
        opt.step((n, t, True) for n, t in model.params.items("W"))
        model.params.zero_grad()
    return clean, adv


def theta_step(model, x, y, cfg: TrainConfig, lr: float, tau_value: float, x_adv=None) -> None:
    """One gradient step on theta with the weights held fixed, then floor projection."""
    if not model.noise_enabled:
        raise WarmupError("theta_step called while noise injection is disabled (warmup)")
    layers = model.perturbations
    use_loss = cfg.mode in ("l2p", "pni-style")
    use_reg = cfg.mode in ("l2p", "l2p-r") and cfg.gamma != 0
    loss_grads = [None] * len(layers)
    if use_loss:
        with model.grad_scope("theta"):
            model.params.zero_grad()
            loss, _, _ = _objective(model, x, y, x_adv, cfg.weights)
            loss.backward()
            loss_grads = [l.theta.grad for l in layers]
            model.params.zero_grad()
    reg_grads = regularizer_g([l.theta for l in layers], tau_value, cfg.reg_eps)[1] if use_reg else None
    for i, layer in enumerate(layers):
        th = layer.theta.data
        if loss_grads[i] is not None:
            th -= lr * loss_grads[i]
        if reg_grads is not None:
            th -= cfg.gamma * reg_grads[i]
        project_theta(layer)


# ---------------------------------------------------------------------- train
@dataclass
class TrainResult:
    model: object
    records: List[EpochRecord]
    optimizer: SGD
    isolation_checks: int = 0


def _check(model, group, before, what):
    if model.params.digest(group) != before:
        raise IsolationError(f"{what} modified the {group} parameters")


def train(
    model,
    dataset: Dataset,
    cfg: TrainConfig,
    on_epoch: Optional[Callable[[EpochRecord, object, SGD], None]] = None,
    log: Optional[Callable[[str], None]] = None,
    plan: Optional[BatchPlan] = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs; epochs up to ``warmup_epochs`` train W only with noise off."""
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    plan = plan if plan is not None else BatchPlan(batch_size=cfg.batch_size, seed=cfg.seed)
    opt = SGD(lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov, weight_decay=cfg.weight_decay)
    attack_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    model.reseed_noise(cfg.seed)
    noisy_mode = cfg.mode in NOISY_MODES
    model.set_noise(False)
    records: List[EpochRecord] = []
    checks = 0

    def guarded_w(x, y, x_adv):
        nonlocal checks
        before = model.params.digest("theta") if cfg.check_isolation else None
        out = w_step(model, x, y, cfg, opt, x_adv)
        if before is not None:
            _check(model, "theta", before, "w_step")
            checks += 1
        return out

    def guarded_theta(x, y, lr, tv, x_adv):
        nonlocal checks
        before = model.params.digest("W") if cfg.check_isolation else None
        theta_step(model, x, y, cfg, lr, tv, x_adv)
        if before is not None:
            _check(model, "W", before, "theta_step")
            checks += 1

    for epoch in range(1, cfg.epochs + 1):
        noise = noisy_mode and epoch >= cfg.noise_start
        model.set_noise(noise)
        lr = cfg.lr_at(epoch)
        opt.lr = lr
        tv = tau(epoch, cfg.noise_start) if noise else 0.0
        clean_losses, adv_losses = [], []
        batch_list = list(batches(dataset, plan, epoch))
        for x, y in batch_list:
            x_adv = make_adversarial(model, x, y, cfg, attack_rng)
            c, a = guarded_w(x, y, x_adv)
            clean_losses.append(c)
            adv_losses.append(a)
            if noise and cfg.alternation == "batch":
                guarded_theta(x, y, lr, tv, x_adv)
        if noise and cfg.alternation == "epoch":
            for x, y in batch_list:
                x_adv = make_adversarial(model, x, y, cfg, attack_rng)
                guarded_theta(x, y, lr, tv, x_adv)
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            clean_loss=float(np.mean(clean_losses)),
            adv_loss=float(np.mean(adv_losses)),
            noise=noise,
            tau=tv,
            mean_theta=mean_theta(model),
            theta=theta_stats(model),
        )
        records.append(rec)
        if log is not None:
            log(
                f"epoch {epoch:3d}/{cfg.epochs} lr={lr:.4g} clean={rec.clean_loss:.4f} "
                f"adv={rec.adv_loss:.4f} noise={'on' if noise else 'off'} mean_theta={rec.mean_theta:.5f}"
            )
        if on_epoch is not None:
            on_epoch(rec, model, opt)
    model.set_noise(noisy_mode and cfg.epochs >= cfg.noise_start)
    return TrainResult(model, records, opt, checks)


# ------------------------------------------------------------------- logging
EPOCH_FIELDS = ("epoch", "lr", "clean_loss", "adv_loss", "noise", "tau", "mean_theta")


def write_epoch_csv(path, records: List[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPOCH_FIELDS)
        for r in records:
            w.writerow([repr(getattr(r, f)) if isinstance(getattr(r, f), float) else getattr(r, f)
                        for f in EPOCH_FIELDS])


def write_theta_csv(path, records: List[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("epoch", "layer", "mean", "min", "max"))
        for r in records:
            for s in r.theta:
                w.writerow((r.epoch, s["layer"], repr(s["mean"]), repr(s["min"]), repr(s["max"])))


def read_theta_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return [
            {"epoch": int(row["epoch"]), "layer": row["layer"], "mean": float(row["mean"]),
             "min": float(row["min"]), "max": float(row["max"])}
            for row in csv.DictReader(fh)
        ]
