"""Kernel backend selection.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_kernels_py`` is used. Set ``FKV_PURE_PYTHON=1`` to force
the fallback.
"""

from __future__ import annotations

import contextlib
import logging
import os
from types import ModuleType
from typing import Iterator

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)

try:
    from . import _ckernels as _native
except ImportError:  # extension not built
    _native = None

BACKENDS: dict[str, ModuleType] = {"python": _kernels_py}
if _native is not None:
    BACKENDS["native"] = _native


def _default() -> str:
    if os.environ.get("FKV_PURE_PYTHON", "").strip() not in ("", "0"):
        return "python"
    return "native" if "native" in BACKENDS else "python"


_active_name = _default()


def backend_name() -> str:
    return _active_name


def set_backend(name: str) -> str:
    """Switch the active backend; returns the previous name."""
    global _active_name
    if name not in BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {sorted(BACKENDS)}")
    previous, _active_name = _active_name, name
    return previous


@contextlib.contextmanager
def using(name: str) -> Iterator[None]:
    previous = set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


def _f64(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def _bias(bias: np.ndarray | None, lk: int) -> np.ndarray:
    if bias is None:
        return np.zeros(lk, dtype=np.float64)
    return _f64(bias)


def attend(q, k, v, bias=None) -> np.ndarray:
    return BACKENDS[_active_name].attend(_f64(q), _f64(k), _f64(v), _bias(bias, len(k)))


def attention_weights(q, k, bias=None) -> np.ndarray:
    return BACKENDS[_active_name].attention_weights(_f64(q), _f64(k), _bias(bias, len(k)))


def region_mass(q, k, labels, n_regions: int, bias=None) -> np.ndarray:
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    return BACKENDS[_active_name].region_mass(_f64(q), _f64(k), _bias(bias, len(k)), labels, int(n_regions))


def segment_cosine(prev, new, bounds) -> np.ndarray:
    bounds = np.ascontiguousarray(bounds, dtype=np.int64)
    return BACKENDS[_active_name].segment_cosine(_f64(prev), _f64(new), bounds)


def bottomk(sims, k: int) -> np.ndarray:
    return BACKENDS[_active_name].bottomk(_f64(sims), int(k))
