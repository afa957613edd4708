"""Kernel backend selection.

The compiled extension is preferred when importable; the numpy reference
implementation is a drop-in fallback.  Set INRREG_FORCE_NUMPY=1 to force
the fallback (used by the backend-agreement tests and the benchmark).
"""

import os

from . import _ref

if os.environ.get("INRREG_FORCE_NUMPY"):
    _impl = _ref
else:
    try:
        from . import _fast as _impl
    except ImportError:
        _impl = _ref

BACKEND = _impl.BACKEND


def trilinear(data, nx, ny, nz, pts):
    return _impl.trilinear(data, nx, ny, nz, pts)


def adam_update(p, g, m, v, t, lr, beta1, beta2, eps):
    return _impl.adam_update(p, g, m, v, t, lr, beta1, beta2, eps)
