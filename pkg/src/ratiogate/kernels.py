"""Backend selection for the hot loops.

The compiled extension is used when it is importable; setting the environment
variable ``RATIOGATE_PURE_PYTHON=1`` forces the numpy implementation. Both
backends share one calling convention, normalized by the wrappers below.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _kernels_py

__all__ = [
    "BACKEND",
    "available_backends",
    "get_backend",
    "g_agg_array",
    "g_agg_slope_array",
    "apc_clip",
    "fiberpo_forward",
    "fiberpo_jacobian",
]


def _load_compiled() -> ModuleType | None:
    if os.environ.get("RATIOGATE_PURE_PYTHON", "").strip() not in ("", "0"):
        return None
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return None
    return _kernels


_COMPILED = _load_compiled()
BACKEND = "cython" if _COMPILED is not None else "python"


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _kernels  # type: ignore[attr-defined]  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``name`` (``"python"``, ``"cython"`` or the active one)."""
    if name is None:
        return _COMPILED if _COMPILED is not None else _kernels_py
    if name == "python":
        return _kernels_py
    if name == "cython":
        from . import _kernels  # type: ignore[attr-defined]

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1)


def _i64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.int64).reshape(-1)


def g_agg_array(x, c, k, backend: str | None = None) -> np.ndarray:
    x = _f64(x)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), x.shape)
    k = np.broadcast_to(np.asarray(k, dtype=np.float64), x.shape)
    return get_backend(backend).g_agg_array(x, c, k)


def g_agg_slope_array(x, c, k, backend: str | None = None) -> np.ndarray:
    x = _f64(x)
    c = np.broadcast_to(np.asarray(c, dtype=np.float64), x.shape)
    k = np.broadcast_to(np.asarray(k, dtype=np.float64), x.shape)
    return get_backend(backend).g_agg_slope_array(x, c, k)


def apc_clip(dev, weights, state_index, state_counts, delta: float, backend: str | None = None):
    return get_backend(backend).apc_clip(
        _f64(dev), _f64(weights), _i64(state_index), _i64(state_counts), float(delta)
    )


def _fiber_args(log_r, traj_index, traj_len, slope):
    traj_len = _i64(traj_len)
    slope = _f64(np.broadcast_to(np.asarray(slope, dtype=np.float64), traj_len.shape))
    return _f64(log_r), _i64(traj_index), traj_len, slope


def fiberpo_forward(log_r, traj_index, traj_len, slope, c_plus, c_minus, eps, backend: str | None = None):
    args = _fiber_args(log_r, traj_index, traj_len, slope)
    return get_backend(backend).fiberpo_forward(*args, float(c_plus), float(c_minus), float(eps))


def fiberpo_jacobian(log_r, traj_index, traj_len, slope, c_plus, c_minus, eps, backend: str | None = None):
    args = _fiber_args(log_r, traj_index, traj_len, slope)
    return get_backend(backend).fiberpo_jacobian(*args, float(c_plus), float(c_minus), float(eps))
