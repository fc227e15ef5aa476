"""Kernel backend selection.

The compiled extension ``grape._kernels`` is used when it imports; the
numpy module ``grape._pykernels`` is used otherwise, or when the
environment variable ``GRAPE_PURE_PYTHON`` is set to a non-empty value.

Callers reach the active backend through the module attribute
``kernels`` (never ``from ._backend import kernels``) so that
:func:`use_backend` can swap it at runtime.
"""
from __future__ import annotations

import contextlib
import importlib
import os
from types import ModuleType

import numpy as np

_MODULES = {"cython": "grape._kernels", "python": "grape._pykernels"}


def load(name: str) -> ModuleType:
    """Import a backend by name (``"cython"`` or ``"python"``)."""
    if name not in _MODULES:
        raise ValueError(f"unknown backend {name!r}; expected one of {sorted(_MODULES)}")
    return importlib.import_module(_MODULES[name])


def available() -> list[str]:
    names = []
    for name in _MODULES:
        try:
            load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select() -> tuple[str, ModuleType]:
    if not os.environ.get("GRAPE_PURE_PYTHON"):
        try:
            return "cython", load("cython")
        except ImportError:
            pass
    return "python", load("python")


name, kernels = _select()


@contextlib.contextmanager
def use_backend(backend: str):
    """Temporarily switch the active kernel backend."""
    global name, kernels
    saved = name, kernels
    name, kernels = backend, load(backend)
    try:
        yield kernels
    finally:
        name, kernels = saved


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def as_index(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.int64)
