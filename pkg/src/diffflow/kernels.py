"""Backend selection for the hot kernels.

The compiled extension ``diffflow._core`` is used when it imports; otherwise
the numpy implementations are used. Set ``DIFFFLOW_PURE_PYTHON=1`` to force
the fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("DIFFFLOW_PURE_PYTHON") != "1":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython" or "python"), or the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _core

        return _core
    raise ValueError(f"unknown backend {name!r}")


def counter_normals(seed: int, start: int, count: int, step: int, k: int) -> np.ndarray:
    """(count, k) standard normals keyed by (seed, particle index, step)."""
    return _impl.counter_normals(
        int(seed) & 0xFFFFFFFFFFFFFFFF, int(start), int(count), int(step) & 0xFFFFFFFFFFFFFFFF, int(k)
    )


def kde_score(points: np.ndarray, queries: np.ndarray, h: float) -> np.ndarray:
    return _impl.kde_score(
        np.ascontiguousarray(points, dtype=np.float64),
        np.ascontiguousarray(queries, dtype=np.float64),
        float(h),
    )


def pairwise_row_sums(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _impl.pairwise_row_sums(
        np.ascontiguousarray(a, dtype=np.float64), np.ascontiguousarray(b, dtype=np.float64)
    )
