"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy
fallback is used. ``CAFEWIDTH_KERNELS=python`` forces the fallback.
"""

import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _pykernels


def available() -> list[str]:
    return sorted(_BACKENDS)


def use(name: str) -> None:
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}") from None


def active() -> str:
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def im2col(x, K):
    return _active.im2col(x, K)


def col2im(cols, N, C, H, W, K):
    return _active.col2im(cols, N, C, H, W, K)


def dw_forward(x, wt):
    return _active.dw_forward(x, wt)


def dw_backward(x, wt, dy):
    return _active.dw_backward(x, wt, dy)


_choice = os.environ.get("CAFEWIDTH_KERNELS", "").strip().lower()
if _choice:
    use(_choice)
elif _ckernels is not None:
    use("cython")
