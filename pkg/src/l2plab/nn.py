"""Layer specs, parameter store and model builders.

Models are plain ordered layer lists. Residual blocks carry an optional
perturbation slot on their pre-activation output; standalone ``perturb-slot``
layers can be placed anywhere else.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .perturb import THETA0, THETA_MIN, PerturbationLayer, inject
from .tensor import ShapeError, Tensor

KINDS = ("linear", "conv", "relu", "avgpool", "residual-block", "normalize", "perturb-slot")

CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


class SpecError(ValueError):
    """A layer list does not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    k: int = 2
    shortcut: str = "avgpool"
    perturb: bool = True
    mean: Tuple[float, ...] = ()
    std: Tuple[float, ...] = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        d["mean"] = tuple(d.get("mean", ()))
        d["std"] = tuple(d.get("std", ()))
        return cls(**d)


def spec_hash(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> str:
    blob = json.dumps(
        {"input": list(input_shape), "layers": [s.to_dict() for s in specs]}, sort_keys=True
    )
    return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------- param store
class ParamStore:
    """Named parameters partitioned into the network set ``W`` and noise set ``theta``."""

    GROUPS = ("W", "theta")

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._group: Dict[str, str] = {}

    def add(self, name: str, t: Tensor, group: str = "W") -> Tensor:
        if group not in self.GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.name = name
        self._params[name] = t
        self._group[name] = group
        return t

    def __len__(self):
        return len(self._params)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self, group: Optional[str] = None) -> List[str]:
        return [n for n in self._params if group is None or self._group[n] == group]

    def group_of(self, name: str) -> str:
        return self._group[name]

    def items(self, group: Optional[str] = None) -> Iterator[Tuple[str, Tensor]]:
        for n in self.names(group):
            yield n, self._params[n]

    def tensors(self, group: Optional[str] = None) -> List[Tensor]:
        return [t for _, t in self.items(group)]

    def count(self, group: Optional[str] = None) -> int:
        return sum(t.size for t in self.tensors(group))

    def digest(self, group: Optional[str] = None) -> str:
        h = hashlib.sha256()
        for n, t in self.items(group):
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def arrays(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}


# --------------------------------------------------------------------- layers
def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Linear:
    def __init__(self, store, name, d_in, d_out, rng):
        self.w = store.add(f"{name}.weight", Tensor(_he(rng, (d_in, d_out), d_in), requires_grad=True))
        self.b = store.add(f"{name}.bias", Tensor(np.zeros(d_out), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2:
            x = T.flatten(x)
        return T.add_bias(x @ self.w, self.b)


class Conv:
    def __init__(self, store, name, c_in, c_out, kernel, stride, pad, rng):
        fan_in = c_in * kernel * kernel
        self.w = store.add(
            f"{name}.weight",
            Tensor(_he(rng, (c_out, c_in, kernel, kernel), fan_in), requires_grad=True),
        )
        self.b = store.add(f"{name}.bias", Tensor(np.zeros(c_out), requires_grad=True))
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class ReLU:
    def __call__(self, x):
        return T.relu(x)


class AvgPool:
    def __init__(self, k):
        self.k = k

    def __call__(self, x):
        return T.avg_pool2d(x, self.k)


class Normalize:
    """Non-trainable ``(x - mean) / std`` applied per channel."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if np.any(self.std == 0):
            raise SpecError("normalize: std must be non-zero")

    def __call__(self, x):
        return normalize_layer(x, self.mean, self.std)


class PerturbSlot:
    def __init__(self, layer: PerturbationLayer):
        self.layer = layer

    def __call__(self, x):
        return inject(x, self.layer)


class ResidualBlock:
    """conv-relu-conv plus shortcut, optional perturbation, then ReLU."""

    def __init__(self, store, name, c_in, c_out, stride, shortcut, perturb, out_hw, rng, noise_kw):
        self.conv1 = Conv(store, f"{name}.conv1", c_in, c_out, 3, stride, 1, rng)
        self.conv2 = Conv(store, f"{name}.conv2", c_out, c_out, 3, 1, 1, rng)
        self.stride = stride
        self.c_in, self.c_out = c_in, c_out
        self.shortcut = shortcut
        self.proj = None
        if shortcut == "conv1x1" and (stride != 1 or c_in != c_out):
            self.proj = Conv(store, f"{name}.proj", c_in, c_out, 1, stride, 0, rng)
        self.perturbation = None
        if perturb:
            self.perturbation = PerturbationLayer(
                (c_out,) + tuple(out_hw), name=f"{name}.perturb.theta", **noise_kw
            )
            store.add(self.perturbation.name, self.perturbation.theta, group="theta")

    def _shortcut(self, x):
        if self.proj is not None:
            return self.proj(x)
        if self.stride != 1:
            x = T.avg_pool2d(x, self.stride)
        if self.c_out != self.c_in:
            extra = self.c_out - self.c_in
            x = T.pad_channels(x, extra // 2, extra - extra // 2)
        return x

    def __call__(self, x):
        h = self.conv2(T.relu(self.conv1(x)))
        h = h + self._shortcut(x)
        if self.perturbation is not None:
            h = inject(h, self.perturbation)
        return T.relu(h)


def normalize_layer(x: Tensor, mean, std) -> Tensor:
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if x.ndim != 4 or mean.shape != (x.shape[1],) or std.shape != (x.shape[1],):
        raise ShapeError(f"normalize: channel count mismatch {x.shape} vs mean {mean.shape}")
    if np.any(std == 0):
        raise ValueError("normalize: std must be non-zero")
    return T.channel_affine(x, 1.0 / std, -mean / std)


# ---------------------------------------------------------------- shape check
def _infer(spec: LayerSpec, shape: tuple) -> tuple:
    kind = spec.kind
    if kind not in KINDS:
        raise SpecError(f"unknown layer kind {kind!r}")
    if kind == "linear":
        if spec.out <= 0:
            raise SpecError("linear needs out > 0")
        return (spec.out,)
    if kind in ("relu", "perturb-slot"):
        return shape
    if len(shape) != 3:
        raise SpecError(f"{kind} needs a (C, H, W) input, got {shape}")
    C, H, W = shape
    if kind == "normalize":
        if len(spec.mean) != C or len(spec.std) != C:
            raise SpecError(f"normalize has {len(spec.mean)} channels, input has {C}")
        if any(s == 0 for s in spec.std):
            raise SpecError("normalize: std must be non-zero")
        return shape
    if kind == "conv":
        if spec.kernel > H + 2 * spec.pad or spec.kernel > W + 2 * spec.pad or spec.out <= 0:
            raise SpecError(f"conv kernel {spec.kernel} does not fit input {shape}")
        return (
            spec.out,
            (H + 2 * spec.pad - spec.kernel) // spec.stride + 1,
            (W + 2 * spec.pad - spec.kernel) // spec.stride + 1,
        )
    if kind == "avgpool":
        if H % spec.k or W % spec.k:
            raise SpecError(f"avgpool k={spec.k} does not divide input {shape}")
        return (C, H // spec.k, W // spec.k)
    # residual-block
    if spec.stride not in (1, 2) or H % spec.stride or W % spec.stride:
        raise SpecError(f"residual-block stride {spec.stride} does not fit input {shape}")
    if spec.shortcut not in ("avgpool", "conv1x1"):
        raise SpecError(f"unknown shortcut {spec.shortcut!r}")
    if spec.shortcut == "avgpool" and spec.out < C:
        raise SpecError(f"avgpool shortcut cannot shrink channels {C} -> {spec.out}")
    return (spec.out, H // spec.stride, W // spec.stride)


def check_spec(specs: Sequence[LayerSpec], input_shape: Sequence[int]) -> List[tuple]:
    """Return the shape after every layer or raise naming the first bad pair."""
    shape = tuple(input_shape)
    shapes = [shape]
    for i, spec in enumerate(specs):
        if spec.kind == "normalize" and i != 0:
            raise SpecError(f"layer {i} (normalize) must be the first layer")
        try:
            shape = _infer(spec, shape)
        except SpecError as exc:
            prev = f"layer {i - 1} ({specs[i - 1].kind})" if i else "input"
            raise SpecError(f"{prev} -> layer {i} ({spec.kind}): {exc}") from None
        shapes.append(shape)
    return shapes


# ---------------------------------------------------------------------- model
class Model:
    def __init__(
        self,
        specs: Sequence[LayerSpec],
        input_shape: Sequence[int],
        seed: int = 0,
        theta0: float = THETA0,
        theta_min: float = THETA_MIN,
    ):
        self.specs = list(specs)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.seed = int(seed)
        self.shapes = check_spec(self.specs, self.input_shape)
        self.params = ParamStore()
        self.perturbations: List[PerturbationLayer] = []
        self.layers = []
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0]))
        noise_kw = {"theta0": theta0, "theta_min": theta_min}
        for i, spec in enumerate(self.specs):
            shape_in, shape_out = self.shapes[i], self.shapes[i + 1]
            name = f"layers.{i}"
            if spec.kind == "linear":
                layer = Linear(self.params, name, int(np.prod(shape_in)), spec.out, rng)
            elif spec.kind == "conv":
                layer = Conv(self.params, name, shape_in[0], spec.out, spec.kernel, spec.stride, spec.pad, rng)
            elif spec.kind == "relu":
                layer = ReLU()
            elif spec.kind == "avgpool":
                layer = AvgPool(spec.k)
            elif spec.kind == "normalize":
                layer = Normalize(spec.mean, spec.std)
            elif spec.kind == "perturb-slot":
                p = PerturbationLayer(shape_in, name=f"{name}.theta", **noise_kw)
                self.params.add(p.name, p.theta, group="theta")
                layer = PerturbSlot(p)
            else:
                layer = ResidualBlock(
                    self.params, name, shape_in[0], spec.out, spec.stride, spec.shortcut,
                    spec.perturb, shape_out[1:], rng, noise_kw,
                )
            self.layers.append(layer)
            p = getattr(layer, "layer", None) or getattr(layer, "perturbation", None)
            if p is not None:
                self.perturbations.append(p)
        self.reseed_noise(self.seed)

    # ---------------------------------------------------------------- noise
    def reseed_noise(self, seed: int) -> None:
        """Reset every perturbation layer's private stream from ``seed``."""
        for j, p in enumerate(self.perturbations):
            p.reseed(int(np.random.SeedSequence([int(seed), 1, j]).generate_state(1)[0]))

    def set_noise(self, enabled: bool) -> None:
        for p in self.perturbations:
            p.enabled = bool(enabled)

    @property
    def noise_enabled(self) -> bool:
        return any(p.enabled for p in self.perturbations)

    def is_stochastic(self) -> bool:
        return any(p.enabled and np.any(p.theta.data != 0) for p in self.perturbations)

    def noise_state(self) -> list:
        return [p.rng.bit_generator.state for p in self.perturbations]

    def set_noise_state(self, states: list) -> None:
        for p, s in zip(self.perturbations, states):
            p.rng.bit_generator.state = s

    # -------------------------------------------------------------- forward
    def forward(self, x, noise: bool = True) -> Tensor:
        """Logits for a batch; ``noise=False`` bypasses every perturbation layer."""
        if not isinstance(x, Tensor):
            x = Tensor._wrap(np.ascontiguousarray(x, dtype=np.float64))
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"model expects input (N, {self.input_shape}), got {x.shape}")
        if noise:
            for layer in self.layers:
                x = layer(x)
            return x
        saved = [p.enabled for p in self.perturbations]
        self.set_noise(False)
        try:
            for layer in self.layers:
                x = layer(x)
        finally:
            for p, s in zip(self.perturbations, saved):
                p.enabled = s
        return x

    __call__ = forward

    @property
    def num_classes(self) -> int:
        return int(self.shapes[-1][0])

    @property
    def spec_hash(self) -> str:
        return spec_hash(self.specs, self.input_shape)

    # -------------------------------------------------------- grad scoping
    @contextlib.contextmanager
    def grad_scope(self, group: Optional[str]):
        """Only parameters of ``group`` record gradients inside the block (None: none)."""
        saved = {n: t.requires_grad for n, t in self.params.items()}
        for n, t in self.params.items():
            t.requires_grad = group is not None and self.params.group_of(n) == group
        try:
            yield
        finally:
            for n, t in self.params.items():
                t.requires_grad = saved[n]


def build_model(specs: Sequence[LayerSpec], input_shape: Sequence[int], seed: int = 0, **kw) -> Model:
    return Model(specs, input_shape, seed=seed, **kw)


# -------------------------------------------------------------------- presets
def mlp_spec(sizes: Sequence[int], perturb: bool = False) -> List[LayerSpec]:
    """``sizes`` lists hidden and output widths; input width comes from the model."""
    specs: List[LayerSpec] = []
    for i, n in enumerate(sizes):
        specs.append(LayerSpec("linear", out=n))
        if i < len(sizes) - 1:
            if perturb:
                specs.append(LayerSpec("perturb-slot"))
            specs.append(LayerSpec("relu"))
    return specs


def mini_resnet_spec(
    version: str = "v1",
    base: int = 16,
    blocks: Sequence[int] = (1, 1, 1),
    num_classes: int = 10,
    input_hw: int = 32,
    in_channels: int = 3,
    mean: Sequence[float] = CIFAR10_MEAN,
    std: Sequence[float] = CIFAR10_STD,
    perturb: bool = True,
) -> List[LayerSpec]:
    """Reduced residual network: v1 downsamples the shortcut by avg-pool, v2 by 1x1 conv."""
    shortcut = {"v1": "avgpool", "v2": "conv1x1"}[version]
    specs = []
    if mean:
        specs.append(LayerSpec("normalize", mean=tuple(mean)[:in_channels], std=tuple(std)[:in_channels]))
    specs += [LayerSpec("conv", out=base, kernel=3, stride=1, pad=1), LayerSpec("relu")]
    hw = input_hw
    width = base
    for stage, n in enumerate(blocks):
        for b in range(n):
            stride = 2 if stage > 0 and b == 0 else 1
            hw //= stride
            specs.append(
                LayerSpec("residual-block", out=width, stride=stride, shortcut=shortcut, perturb=perturb)
            )
        width *= 2
    specs.append(LayerSpec("avgpool", k=hw))
    specs.append(LayerSpec("linear", out=num_classes))
    return specs
