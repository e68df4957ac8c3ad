"""Sample-based total-variation and KL divergence estimators written in ratio
form, plus exact-distribution helpers for Pinsker-type checks.

Every estimator here is undiscounted: states are weighted by their sample
counts. Single-sample KL estimates are reported as they are and may be
negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import Batch, RatioTuple, as_ratio_array
from .errors import InputError

__all__ = [
    "DivergenceReport",
    "per_state_tv",
    "per_state_kl",
    "per_state_tv_all",
    "per_state_kl_all",
    "avg_tv",
    "avg_kl",
    "max_tv",
    "traj_tv",
    "traj_kl",
    "traj_tv_all",
    "traj_kl_all",
    "divergence_report",
    "exact_tv",
    "exact_kl",
    "pinsker_gap",
]


def _ratios(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    r = as_ratio_array(ratios)
    if r.size != batch.T:
        raise InputError(f"expected {batch.T} ratios, got {r.size}")
    return r


def _state_mean(batch: Batch, values: np.ndarray) -> np.ndarray:
    sums = np.bincount(batch.state_index, weights=values, minlength=batch.state_ids.size)
    return sums / batch.state_counts


def _traj_mean(batch: Batch, values: np.ndarray) -> np.ndarray:
    sums = np.bincount(batch.traj_index, weights=values, minlength=batch.traj_ids.size)
    return sums / batch.traj_lengths


def per_state_tv_all(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    """Per-state TV estimate for every observed state, ordered as ``batch.state_ids``."""
    r = _ratios(batch, ratios)
    return _state_mean(batch, np.abs(r - 1.0))


def per_state_kl_all(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    r = _ratios(batch, ratios)
    return _state_mean(batch, -np.log(r))


def per_state_tv(batch: Batch, ratios: RatioTuple | Iterable[float], state: int) -> float:
    """Mean of ``|r - 1|`` over the tokens sampled at ``state``."""
    pos = batch.state_position(state)
    return float(per_state_tv_all(batch, ratios)[pos])


def per_state_kl(batch: Batch, ratios: RatioTuple | Iterable[float], state: int) -> float:
    """Mean of ``-log r`` over the tokens sampled at ``state``."""
    pos = batch.state_position(state)
    return float(per_state_kl_all(batch, ratios)[pos])


def avg_tv(batch: Batch, ratios: RatioTuple | Iterable[float]) -> float:
    r = _ratios(batch, ratios)
    return float(np.sum(np.abs(r - 1.0)) / batch.T)


def avg_kl(batch: Batch, ratios: RatioTuple | Iterable[float]) -> float:
    r = _ratios(batch, ratios)
    return float(-np.sum(np.log(r)) / batch.T)


def max_tv(batch: Batch, ratios: RatioTuple | Iterable[float]) -> float:
    """Largest per-state TV estimate over states present in the batch."""
    return float(np.max(per_state_tv_all(batch, ratios)))


def traj_tv_all(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    r = _ratios(batch, ratios)
    return _traj_mean(batch, np.abs(r - 1.0))


def traj_kl_all(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    r = _ratios(batch, ratios)
    return _traj_mean(batch, -np.log(r))


def traj_tv(batch: Batch, ratios: RatioTuple | Iterable[float], trajectory: int) -> float:
    pos = batch.traj_position(trajectory)
    return float(traj_tv_all(batch, ratios)[pos])


def traj_kl(batch: Batch, ratios: RatioTuple | Iterable[float], trajectory: int) -> float:
    pos = batch.traj_position(trajectory)
    return float(traj_kl_all(batch, ratios)[pos])


@dataclass(frozen=True)
class DivergenceReport:
    per_state_tv: dict[int, float]
    per_state_kl: dict[int, float]
    avg_tv: float
    avg_kl: float
    max_tv: float
    traj_tv: dict[int, float]
    traj_kl: dict[int, float]

    def to_dict(self) -> dict:
        return {
            "per_state_tv": {str(k): v for k, v in self.per_state_tv.items()},
            "per_state_kl": {str(k): v for k, v in self.per_state_kl.items()},
            "avg_tv": self.avg_tv,
            "avg_kl": self.avg_kl,
            "max_tv": self.max_tv,
            "traj_tv": {str(k): v for k, v in self.traj_tv.items()},
            "traj_kl": {str(k): v for k, v in self.traj_kl.items()},
        }


def divergence_report(batch: Batch, ratios: RatioTuple | Iterable[float]) -> DivergenceReport:
    r = _ratios(batch, ratios)
    ps_tv = per_state_tv_all(batch, r)
    ps_kl = per_state_kl_all(batch, r)
    tj_tv = traj_tv_all(batch, r)
    tj_kl = traj_kl_all(batch, r)
    return DivergenceReport(
        per_state_tv={int(s): float(v) for s, v in zip(batch.state_ids, ps_tv)},
        per_state_kl={int(s): float(v) for s, v in zip(batch.state_ids, ps_kl)},
        avg_tv=avg_tv(batch, r),
        avg_kl=avg_kl(batch, r),
        max_tv=float(np.max(ps_tv)),
        traj_tv={int(t): float(v) for t, v in zip(batch.traj_ids, tj_tv)},
        traj_kl={int(t): float(v) for t, v in zip(batch.traj_ids, tj_kl)},
    )


# ---------------------------------------------------------------------------
# Exact distributions
# ---------------------------------------------------------------------------


def _distribution(p: Iterable[float]) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)):
        raise InputError("a distribution needs finite non-negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise InputError("distribution entries must sum to one")
    return p


def exact_tv(p_old: Iterable[float], p_new: Iterable[float]) -> float:
    """Half the L1 distance between two distributions on the same support."""
    p, q = _distribution(p_old), _distribution(p_new)
    if p.shape != q.shape:
        raise InputError("distributions must share a support")
    return float(0.5 * np.sum(np.abs(p - q)))


def exact_kl(p_old: Iterable[float], p_new: Iterable[float]) -> float:
    """KL divergence of ``p_old`` from ``p_new`` (expectation under ``p_old``)."""
    p, q = _distribution(p_old), _distribution(p_new)
    if p.shape != q.shape:
        raise InputError("distributions must share a support")
    mask = p > 0
    if np.any(q[mask] == 0):
        return float("inf")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def pinsker_gap(tv: float, kl: float) -> float:
    """``kl / 2 - tv**2``; non-negative for exact distributions."""
    return float(kl) / 2.0 - float(tv) ** 2
