"""Learnable per-element Gaussian feature perturbation.

A :class:`PerturbationLayer` owns one scale parameter per element of the
feature map it is attached to and adds ``theta * z`` with ``z ~ N(0, 1)``
drawn fresh for every sample in the batch.
"""

from __future__ import annotations

from typing import List, Optional

import numpy as np

from .tensor import ShapeError, Tensor
from .tensor.tensor import _result

THETA0 = 0.01
THETA_MIN = 0.0


class PerturbationLayer:
    def __init__(
        self,
        shape,
        theta0: float = THETA0,
        theta_min: float = THETA_MIN,
        seed: int = 0,
        name: str = "perturb",
    ):
        if theta_min < 0:
            raise ValueError(f"theta_min must be >= 0, got {theta_min}")
        self.shape = tuple(int(s) for s in shape)
        self.theta = Tensor(np.full(self.shape, float(theta0)), requires_grad=True, name=name)
        self.theta0 = float(theta0)
        self.theta_min = float(theta_min)
        self.enabled = False
        self.name = name
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self.last_noise: Optional[np.ndarray] = None

    def reseed(self, seed: Optional[int] = None) -> None:
        if seed is not None:
            self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)

    def __call__(self, features: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        return inject(features, self, rng)

    def __repr__(self):
        state = "on" if self.enabled else "off"
        return f"PerturbationLayer({self.name}, shape={self.shape}, {state})"


def inject(features: Tensor, layer: PerturbationLayer, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Return ``features + theta * z``; identity (no graph node) when disabled."""
    if features.shape[1:] != layer.shape:
        raise ShapeError(f"inject: features {features.shape} do not match theta {layer.shape}")
    if not layer.enabled:
        return features
    gen = layer.rng if rng is None else rng
    z = gen.standard_normal(features.shape)
    layer.last_noise = z
    theta = layer.theta

    def _bw(g):
        if features.requires_grad:
            features._accumulate(g)
        if theta.requires_grad:
            theta._accumulate((g * z).sum(axis=0))

    return _result(features.data + theta.data * z, (features, theta), "inject", _bw)


def project_theta(layer: PerturbationLayer) -> None:
    """Clamp theta from below at ``theta_min`` in place."""
    np.maximum(layer.theta.data, layer.theta_min, out=layer.theta.data)


def theta_stats(model) -> List[dict]:
    """Per-layer mean/min/max of theta for every perturbation layer in ``model``."""
    layers = model.perturbations if hasattr(model, "perturbations") else model
    out = []
    for layer in layers:
        t = layer.theta.data
        out.append(
            {
                "layer": layer.name,
                "mean": float(t.mean()),
                "min": float(t.min()),
                "max": float(t.max()),
            }
        )
    return out


def mean_theta(model) -> float:
    """Mean over all theta elements of all layers (element-weighted)."""
    total = sum(float(l.theta.data.sum()) for l in model.perturbations)
    count = sum(l.theta.size for l in model.perturbations)
    return total / count if count else 0.0
