"""Hot-path kernels: compiled extension when available, numpy fallback.

The compiled module fuses the value-plus-derivatives passes the tape needs
most often.  Selection happens once at import; set ``VRBA_PURE_PYTHON=1`` to
force the numpy path (the benchmark uses this to compare both).
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy import special as _special

_FORCE_PURE = bool(os.environ.get("VRBA_PURE_PYTHON"))

if not _FORCE_PURE:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = None
else:
    _impl = None

HAVE_COMPILED = _impl is not None

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _call(kernel, v, n_out):
    """Run a fused kernel over the raveled input; outputs keep v's shape."""
    shape = np.shape(v)
    flat = np.ascontiguousarray(v, dtype=np.float64).reshape(-1)
    outs = [np.empty_like(flat) for _ in range(n_out)]
    kernel(flat, *outs)
    return tuple(o.reshape(shape) for o in outs)


def tanh_pair(v):
    """(tanh v, 1 - tanh^2 v)."""
    if _impl is not None:
        return _call(_impl.tanh_pair, v, 2)
    fv = np.tanh(v)
    return fv, 1.0 - fv * fv


def tanh_quad(v):
    """tanh and its first three derivatives in one pass."""
    if _impl is not None:
        return _call(_impl.tanh_quad, v, 4)
    fv = np.tanh(v)
    fp = 1.0 - fv * fv
    fpp = -2.0 * fv * fp
    fppp = 2.0 * fp * (3.0 * fv * fv - 1.0)
    return fv, fp, fpp, fppp


def gelu_pair(v):
    """(x Phi(x), Phi(x) + x phi(x)) for the exact Gaussian-error gelu."""
    if _impl is not None:
        return _call(_impl.gelu_pair, v, 2)
    cdf = 0.5 * (1.0 + _special.erf(_INV_SQRT2 * v))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * v * v)
    return v * cdf, cdf + v * pdf
