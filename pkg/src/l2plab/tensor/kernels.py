"""Kernel backend selection.

The compiled extension is used when it imports cleanly; set
``L2PLAB_PURE_PYTHON=1`` to force the NumPy fallback.
"""

import os

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"numpy": _fallback}
if _ckernels is not None:
    BACKENDS["cython"] = _ckernels

BACKEND = "numpy"


def use_backend(name: str) -> None:
    """Switch every kernel to ``name`` ("cython" or "numpy") for the whole process."""
    global BACKEND, im2col, col2im, avg_pool_forward, avg_pool_backward
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    impl = BACKENDS[name]
    im2col = impl.im2col
    col2im = impl.col2im
    avg_pool_forward = impl.avg_pool_forward
    avg_pool_backward = impl.avg_pool_backward
    BACKEND = name


_forced = os.environ.get("L2PLAB_PURE_PYTHON", "").lower() in ("1", "true", "yes")
use_backend("numpy" if _forced or _ckernels is None else "cython")
