"""Select the kernel implementation at import time.

The compiled extension is used when it is importable, unless the environment
variable ``DEACOMP_PURE_PYTHON`` is set to a non-empty value other than ``0``.
"""
import importlib
import os

from . import _pyrk


def _load_compiled():
    try:
        return importlib.import_module("deacomp._kernels")
    except ImportError:
        return None


COMPILED = _load_compiled()

if COMPILED is not None and os.environ.get("DEACOMP_PURE_PYTHON", "") in ("", "0"):
    kernels = COMPILED
    BACKEND = "compiled"
else:
    kernels = _pyrk
    BACKEND = "python"


def get_kernels(name: str | None = None):
    """Return the kernel module for ``name`` ("compiled" or "python"), or the
    active one when ``name`` is None."""
    if name is None:
        return kernels
    if name == "python":
        return _pyrk
    if name == "compiled":
        if COMPILED is None:
            raise ImportError("compiled kernels are not available")
        return COMPILED
    raise ValueError(f"unknown backend {name!r}")
