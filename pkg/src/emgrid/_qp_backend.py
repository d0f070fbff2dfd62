"""Selects the ADMM kernel backend at import time.

The compiled kernel is preferred; the pure-Python twin is used when the
extension is unavailable or when EMGRID_PURE_PYTHON is set to a truthy
value. Callers can also override per solver instance (see emgrid.qp).
"""

import os

from . import _admm_py

_FORCE_PY = os.environ.get("EMGRID_PURE_PYTHON", "").strip() not in ("", "0")

if _FORCE_PY:
    DEFAULT_KERNEL = _admm_py
else:
    try:
        from . import _admm_cy as _compiled
        DEFAULT_KERNEL = _compiled
    except ImportError:  # extension not built on this install
        DEFAULT_KERNEL = _admm_py

DEFAULT_BACKEND = DEFAULT_KERNEL.KERNEL_NAME


def get_kernel(name=None):
    """Return a kernel module by name ('cython'/'python') or the default."""
    if name is None:
        return DEFAULT_KERNEL
    if name == "python":
        return _admm_py
    if name == "cython":
        from . import _admm_cy
        return _admm_cy
    raise ValueError(f"unknown kernel backend {name!r}")
