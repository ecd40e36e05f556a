"""Dense float64 tensors with define-by-run reverse-mode differentiation."""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GraphError(RuntimeError):
    """Backward was requested on something that is not a connected scalar."""


_GRAD_ENABLED = True
_DEBUG = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf when enabled."""
    global _DEBUG
    _DEBUG = bool(flag)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"all dims must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = ""
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._prev = ()
        t._backward = None
        t.op = ""
        t.name = None
        return t

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._prev

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # --------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def relu(self):
        return relu(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self):
        return flatten(self)

    # ---------------------------------------------------------------- backward
    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every tensor ``t`` in the graph."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward on a tensor that is not connected to any parameter")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        # interior grads are rebuilt per pass; leaves accumulate
        for node in order:
            if node._prev:
                node.grad = None
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor._wrap(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise
def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)

        def _bw(g):
            a._accumulate(g)

        return _result(a.data + c, (a,), "add", _bw)
    a = as_tensor(a)
    _same_shape("add", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _result(a.data + b.data, (a, b), "add", _bw)


def neg(a: Tensor) -> Tensor:
    def _bw(g):
        a._accumulate(-g)

    return _result(-a.data, (a,), "neg", _bw)


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    return add(a, neg(b))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)

        def _bw(g):
            a._accumulate(g * c)

        return _result(a.data * c, (a,), "mul", _bw)
    _same_shape("mul", a, b)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    return _result(a.data * b.data, (a, b), "mul", _bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def _bw(g):
        a._accumulate(g * mask)

    return _result(np.where(mask, a.data, 0.0), (a,), "relu", _bw)


def square(a: Tensor) -> Tensor:
    def _bw(g):
        a._accumulate(2.0 * g * a.data)

    return _result(a.data * a.data, (a,), "square", _bw)


# ------------------------------------------------------------------ reductions
def tsum(a: Tensor) -> Tensor:
    def _bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _result(np.array(a.data.sum()), (a,), "sum", _bw)


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def _bw(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _result(np.array(a.data.mean()), (a,), "mean", _bw)


def spatial_mean(a: Tensor) -> Tensor:
    """Global average pool: (N, C, H, W) -> (N, C)."""
    if a.ndim != 4:
        raise ShapeError(f"spatial_mean expects (N, C, H, W), got {a.shape}")
    N, C, H, W = a.shape
    area = H * W

    def _bw(g):
        a._accumulate(np.broadcast_to((g / area)[:, :, None, None], a.shape))

    return _result(a.data.mean(axis=(2, 3)), (a,), "spatial_mean", _bw)


# -------------------------------------------------------------------- reshapes
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")

    def _bw(g):
        a._accumulate(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), "reshape", _bw)


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1 if a.ndim == 1 else int(np.prod(a.shape[1:]))))


def pad_channels(a: Tensor, before: int, after: int) -> Tensor:
    """Zero-pad the channel axis of an (N, C, H, W) tensor."""
    if a.ndim != 4:
        raise ShapeError(f"pad_channels expects (N, C, H, W), got {a.shape}")
    C = a.shape[1]

    def _bw(g):
        a._accumulate(g[:, before:before + C])

    out = np.pad(a.data, ((0, 0), (before, after), (0, 0), (0, 0)))
    return _result(out, (a,), "pad_channels", _bw)


# ---------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def _bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _result(a.data @ b.data, (a, b), "matmul", _bw)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Broadcast-add a per-feature (2-D input) or per-channel (4-D input) bias."""
    if b.ndim != 1 or x.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shape mismatch {x.shape} vs {b.shape}")
    view = b.data if x.ndim == 2 else b.data[:, None, None]
    axes = (0,) if x.ndim == 2 else (0, 2, 3)

    def _bw(g):
        if x.requires_grad:
            x._accumulate(g)
        if b.requires_grad:
            b._accumulate(g.sum(axis=axes))

    return _result(x.data + view, (x, b), "add_bias", _bw)


def channel_affine(x: Tensor, scale: np.ndarray, shift: np.ndarray) -> Tensor:
    """``x * scale + shift`` per channel with constant (non-trainable) coefficients."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"channel_affine: shape mismatch {x.shape} vs {scale.shape}")
    s = scale[:, None, None]

    def _bw(g):
        x._accumulate(g * s)

    return _result(x.data * s + shift[:, None, None], (x,), "channel_affine", _bw)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation of (N, C, H, W) input with (F, C, kh, kw) filters."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than input {x.shape} (pad={pad})")
    if b is not None and b.shape != (F,):
        raise ShapeError(f"conv2d: bias shape mismatch {b.shape} vs ({F},)")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1

    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, pad)
    wmat = w.data.reshape(F, -1)
    out2d = cols @ wmat.T
    if b is not None:
        out2d += b.data
    out = np.ascontiguousarray(out2d.reshape(N, Ho, Wo, F).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def _bw(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(-1, F)
        if w.requires_grad:
            w._accumulate((g2d.T @ cols).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g2d.sum(axis=0))
        if x.requires_grad:
            dcols = np.ascontiguousarray(g2d @ wmat)
            x._accumulate(kernels.col2im(dcols, x.shape, kh, kw, stride, pad))

    return _result(out, parents, "conv2d", _bw)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k average pooling."""
    if x.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avg_pool2d: input {x.shape} not divisible by kernel {k}")

    def _bw(g):
        x._accumulate(kernels.avg_pool_backward(np.ascontiguousarray(g), k))

    out = kernels.avg_pool_forward(np.ascontiguousarray(x.data), k)
    return _result(out, (x,), "avg_pool2d", _bw)


# ----------------------------------------------------------------------- loss
def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise ShapeError(f"softmax_cross_entropy: shape mismatch {logits.shape} vs {targets.shape}")
    B, C = logits.shape
    if targets.min() < 0 or targets.max() >= C:
        raise ValueError(f"targets must lie in [0, {C}), got range [{targets.min()}, {targets.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, targets].mean()

    def _bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        logits._accumulate(d * (g / B))

    return _result(np.array(loss), (logits,), "softmax_cross_entropy", _bw)
