"""Backend selection for the RK4 solve/adjoint kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Setting ``FLOWRECOVER_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _rk4_py

try:
    from . import _rk4 as _rk4_ext
except ImportError:  # extension not built
    _rk4_ext = None

_BACKENDS = {"python": _rk4_py}
if _rk4_ext is not None:
    _BACKENDS["cython"] = _rk4_ext

if _rk4_ext is not None and os.environ.get("FLOWRECOVER_PURE_PYTHON", "") not in ("1", "true", "yes"):
    BACKEND = "cython"
else:
    BACKEND = "python"


def available():
    return sorted(_BACKENDS)


def get(name=None):
    """Kernel module for ``name`` (default: the import-time selection)."""
    name = name or BACKEND
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available()}") from None
