"""SGD with (Nesterov) momentum and per-parameter weight-decay flags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .tensor import GraphError, Tensor


@dataclass
class SGD:
    """Velocity buffers are keyed by parameter name.

    The update follows the common formulation::

        d = grad + wd * p            (wd only for decayable params)
        v = momentum * v + d
        p -= lr * (d + momentum * v)     if nesterov
        p -= lr * v                      otherwise
    """

    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: Iterable[Tuple[str, Tensor, bool]]) -> None:
        """Apply one update to ``(name, tensor, decayable)`` triples."""
        for name, p, decayable in params:
            if p.grad is None:
                raise GraphError(f"parameter {name!r} has no gradient")
            d = p.grad
            if decayable and self.weight_decay:
                d = d + self.weight_decay * p.data
            if self.momentum:
                v = self.velocity.get(name)
                if v is None:
                    v = np.zeros_like(p.data)
                elif v.shape != p.data.shape:
                    raise ValueError(f"velocity for {name!r} has shape {v.shape}, param {p.data.shape}")
                v = self.momentum * v + d
                self.velocity[name] = v
                d = d + self.momentum * v if self.nesterov else v
            p.data -= self.lr * d

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "nesterov": self.nesterov,
            "weight_decay": self.weight_decay,
        }


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
