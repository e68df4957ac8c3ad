"""Objective traces under a one-parameter drift of the ratios,
and regime maps over the three-token ratio simplex.

Ratios here are synthetic (``r_i = 1 + t * d_i``); they are not derived from a
policy pair, so the per-state probability constraint does not apply.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .core import Batch, GatingConfig
from .errors import ConfigError
from .fiberpo import (
    _forward,
    classify_regimes,
    fiberpo_objective,
    signed_aggregates,
)
from .rgf import eval_rgf, grpo_spec, gspo_spec

__all__ = [
    "DRIFT_CONFIG",
    "SIMPLEX_CONFIG",
    "SWEEP_COLUMNS",
    "SIMPLEX_COLUMNS",
    "DriftSetup",
    "drift_setup",
    "sweep_rows",
    "transition_markers",
    "simplex_points",
    "simplex_rows",
]

DRIFT_CONFIG = GatingConfig(c_plus=0.12, c_minus=0.05, epsilon=0.04, rollback_slope=32)
SIMPLEX_CONFIG = GatingConfig(c_plus=0.15, c_minus=0.09, epsilon=0.025, rollback_slope=3)

SWEEP_COLUMNS = (
    "t",
    "log_s_plus",
    "log_s_minus",
    "base_weight_log",
    "objective",
    "local_regime",
    "global_regime",
    "grpo_objective",
    "gspo_objective",
)
SIMPLEX_COLUMNS = ("r1", "r2", "r3", "local", "global")


@dataclass(frozen=True, eq=False)
class DriftSetup:
    """A single trajectory with one state per token, drift directions whose
    signs follow the advantages, and the largest admissible drift size."""

    batch: Batch
    direction: np.ndarray
    t_max: float

    def ratios(self, t: float) -> np.ndarray:
        return 1.0 + float(t) * self.direction

    @property
    def baseline(self) -> float:
        return float(np.mean(self.batch.advantages))


def drift_setup(
    rng: np.random.Generator,
    length: int = 10,
    magnitude: tuple[float, float] = (0.5, 1.5),
    headroom: float = 0.95,
) -> DriftSetup:
    """Random advantages (both signs present) and directions ``sign(A) * U[lo, hi]``.

    ``t_max`` keeps every ratio at least ``1 - headroom`` times its distance to zero.
    """
    if length < 2:
        raise ConfigError("a drift sweep needs at least two tokens")
    lo, hi = float(magnitude[0]), float(magnitude[1])
    if not 0 < lo <= hi:
        raise ConfigError("magnitude range must satisfy 0 < lo <= hi")
    adv = rng.normal(size=length)
    if np.all(adv > 0) or np.all(adv < 0):
        adv[0] = -adv[0]
    adv[adv == 0.0] = 1.0
    direction = np.sign(adv) * rng.uniform(lo, hi, size=length)
    batch = Batch.from_tokens([[i, 0, 0, i, float(adv[i])] for i in range(length)])
    t_max = headroom / float(np.max(-direction[direction < 0]))
    return DriftSetup(batch=batch, direction=direction, t_max=t_max)


def _objective(method: str, batch: Batch, r: np.ndarray, config: GatingConfig) -> float:
    if method == "fiberpo":
        return fiberpo_objective(batch, r, config)
    if method == "grpo":
        return eval_rgf(grpo_spec(batch, config.epsilon), batch, r)
    if method == "gspo":
        return eval_rgf(gspo_spec(batch, config.eps_gspo), batch, r)
    raise ConfigError(f"drift sweeps support fiberpo, grpo and gspo, not {method!r}")


def sweep_rows(setup: DriftSetup, ts: Sequence[float], config: GatingConfig, method: str = "fiberpo") -> list[dict]:
    """One row per drift size with the aggregates, log base weight, objective
    of ``method``, FiberPO regimes, and the GRPO and GSPO objectives."""
    ts = np.asarray(ts, dtype=np.float64)
    if ts.size > 1 and np.any(np.diff(ts) <= 0):
        raise ConfigError("t-grid must be strictly increasing")
    if ts.size and (ts[0] < 0 or np.any(1.0 + ts[-1] * setup.direction <= 0.0)):
        raise ConfigError("t-grid must start at or above 0 and keep every ratio positive")
    b = setup.batch
    rows = []
    for t in ts:
        r = setup.ratios(t)
        f = _forward(b, r, config)
        reg = classify_regimes(b, r, config)[int(b.traj_ids[0])]
        rows.append(
            {
                "t": float(t),
                "log_s_plus": float(f["log_s_plus"][0]),
                "log_s_minus": float(f["log_s_minus"][0]),
                "base_weight_log": float(f["log_w"][0]),
                "objective": _objective(method, b, r, config),
                "local_regime": reg.local.value,
                "global_regime": reg.global_.value,
                "grpo_objective": _objective("grpo", b, r, config),
                "gspo_objective": _objective("gspo", b, r, config),
            }
        )
    return rows


def transition_markers(setup: DriftSetup, config: GatingConfig) -> dict[str, float | None]:
    """Smallest drift size at which the first token leaves the clip band, and
    at which each signed aggregate reaches its budget (``None`` if never
    reached below ``t_max``)."""
    b = setup.batch
    eps = config.epsilon

    def max_u(t: float) -> float:
        return float(np.max(np.abs(_forward(b, setup.ratios(t), config)["residual"]))) - eps

    def plus(t: float) -> float:
        return float(signed_aggregates(b, setup.ratios(t)).log_s_plus[0]) - config.c_plus

    def minus(t: float) -> float:
        return float(signed_aggregates(b, setup.ratios(t)).log_s_minus[0]) - config.c_minus

    grid = np.linspace(0.0, setup.t_max, 2001)
    out: dict[str, float | None] = {}
    for name, fn in (("clip_band", max_u), ("c_minus", minus), ("c_plus", plus)):
        vals = np.array([fn(t) for t in grid])
        hit = np.flatnonzero(vals >= 0.0)
        if hit.size == 0:
            out[name] = None
        elif hit[0] == 0:
            out[name] = 0.0
        else:
            out[name] = float(brentq(fn, grid[hit[0] - 1], grid[hit[0]], xtol=1e-14))
    return out


def simplex_points(divisions: int) -> np.ndarray:
    """Interior lattice points of ``{r > 0 : mean(r) = 1}`` for three tokens,
    ``r = 3 * (i, j, k) / divisions``."""
    if divisions < 3:
        raise ConfigError("need at least three divisions")
    pts = [
        (i, j, divisions - i - j)
        for i in range(1, divisions - 1)
        for j in range(1, divisions - i)
    ]
    return 3.0 * np.array(pts, dtype=np.float64) / divisions


def simplex_rows(config: GatingConfig, divisions: int = 240) -> list[dict]:
    """Local and global regime of every simplex lattice point."""
    pts = simplex_points(divisions)
    n = pts.shape[0]
    tokens = [[0, 0, p, t, 0.0] for p in range(n) for t in range(3)]
    batch = Batch.from_tokens(tokens)
    labels = classify_regimes(batch, pts.reshape(-1), config)
    rows = []
    for p in range(n):
        lab = labels[p]
        rows.append(
            {
                "r1": float(pts[p, 0]),
                "r2": float(pts[p, 1]),
                "r3": float(pts[p, 2]),
                "local": lab.local.value,
                "global": lab.global_.value,
            }
        )
    return rows

