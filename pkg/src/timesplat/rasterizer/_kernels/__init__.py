"""Compositing kernel backend selection.

The numba kernels are the default; set TIMESPLAT_BACKEND=numpy to force the
pure-numpy twins (or TIMESPLAT_BACKEND=numba to fail loudly if numba is
missing). Both backends implement the same traversal and gating rules.
"""

import os

_backend_name = None
_backend_module = None


def _resolve(choice: str) -> str:
    if choice in ("numba", "numpy"):
        return choice
    if choice != "auto":
        raise ValueError(f"TIMESPLAT_BACKEND must be auto, numba, or numpy (got {choice!r})")
    try:
        import numba  # noqa: F401

        return "numba"
    except ImportError:
        return "numpy"


def set_backend(name: str):
    global _backend_name, _backend_module
    if name == "numba":
        from . import numba_backend as mod
    elif name == "numpy":
        from . import numpy_backend as mod
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    _backend_name = name
    _backend_module = mod


def get_backend() -> str:
    if _backend_name is None:
        set_backend(_resolve(os.environ.get("TIMESPLAT_BACKEND", "auto")))
    return _backend_name


def kernels():
    get_backend()
    return _backend_module
