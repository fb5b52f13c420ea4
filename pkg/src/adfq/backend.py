"""Kernel backend selection.

At import time the compiled Cython kernels are preferred; the numpy
fallback is used when the extension is unavailable.  Both backends are
bit-identical, so selection never changes results, only speed.
``use_backend`` exists for tests and the benchmark harness.
"""

from __future__ import annotations

from . import _kernels_py

try:
    from . import _kernels_cy
except ImportError:
    _kernels_cy = None

_BACKENDS = {"numpy": _kernels_py}
if _kernels_cy is not None:
    _BACKENDS["cython"] = _kernels_cy

_active = _BACKENDS.get("cython", _kernels_py)


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def active_backend() -> str:
    return "cython" if _active is _kernels_cy else "numpy"


def use_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {available_backends()}")
    _active = _BACKENDS[name]


def uniform_fakequant(x, scale, zero, hi, axis):
    return _active.uniform_fakequant(x, scale, zero, hi, axis)


def outlier_split(x, alpha, one_sided):
    return _active.outlier_split(x, alpha, one_sided)


def spmm(rows, cols, vals, n_rows, b):
    return _active.spmm(rows, cols, vals, n_rows, b)
