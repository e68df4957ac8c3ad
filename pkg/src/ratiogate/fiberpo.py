"""Two-level gated objective: a trajectory-level base weight built from the
signed aggregate log-ratio drifts, times a token-level residual that is
log-clipped around the trajectory aggregates.

All heavy lifting is delegated to :mod:`ratiogate.kernels`, so the compiled and
numpy backends produce the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from . import kernels
from .core import Batch, GatingConfig, RatioTuple, as_ratio_array
from .errors import ConfigError, InputError
from .rgf import RgfSpec, trajectory_weights

__all__ = [
    "SignedAggregates",
    "TokenGateState",
    "LocalRegime",
    "GlobalRegime",
    "RegimeLabel",
    "g_agg",
    "g_agg_slope",
    "ChannelState",
    "channel_state",
    "zeroing_threshold",
    "logclip",
    "signed_aggregates",
    "rollback_slopes",
    "base_weight",
    "token_gate_states",
    "gated_residual",
    "fiberpo_gate",
    "fiberpo_objective",
    "fiberpo_jacobian",
    "fiberpo_spec",
    "classify_regimes",
    "global_regime",
]


# ---------------------------------------------------------------------------
# Scalar building blocks
# ---------------------------------------------------------------------------


def _check_budget(c, k) -> None:
    c_arr = np.asarray(c, dtype=np.float64)
    k_arr = np.asarray(k, dtype=np.float64)
    if np.any(~np.isfinite(c_arr)) or np.any(c_arr <= 0.0):
        raise ConfigError(f"aggregate budget must be positive, got {c!r}")
    if np.any(~np.isfinite(k_arr)) or np.any(k_arr < 1.0):
        raise ConfigError(f"rollback slope must be at least 1, got {k!r}")


def g_agg(x, c, k, backend: str | None = None):
    """Piecewise-linear aggregate gate.

    Identity for ``|x| <= c``, the reversed-slope segment
    ``sign(x) (k + 1) c - k x`` for ``c < |x| < c (1 + 1/k)``, and zero beyond.
    Returns a float for scalar ``x`` and an array otherwise.
    """
    _check_budget(c, k)
    out = kernels.g_agg_array(np.atleast_1d(x), c, k, backend=backend)
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))


def g_agg_slope(x, c, k, backend: str | None = None):
    """Derivative of :func:`g_agg`: 1, ``-k`` or 0 (pass-through side at the
    closed boundary)."""
    _check_budget(c, k)
    out = kernels.g_agg_slope_array(np.atleast_1d(x), c, k, backend=backend)
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))


class ChannelState(str, Enum):
    PASS = "pass"
    ROLLBACK = "rollback"
    ZEROED = "zeroed"


def channel_state(x: float, c: float, k: float) -> ChannelState:
    """Which branch of :func:`g_agg` the value ``x`` falls in."""
    _check_budget(c, k)
    ax = abs(float(x))
    if ax <= c:
        return ChannelState.PASS
    if ax < c * (1.0 + 1.0 / k):
        return ChannelState.ROLLBACK
    return ChannelState.ZEROED


def logclip(x, eps: float):
    """``exp(clip(log x, -eps, eps))`` for positive ``x``."""
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps!r}")
    arr = np.asarray(x, dtype=np.float64)
    if np.any(~(arr > 0.0)) or np.any(~np.isfinite(arr)):
        raise InputError("logclip needs positive finite input")
    out = np.exp(np.clip(np.log(arr), -eps, eps))
    return float(out) if np.ndim(x) == 0 else out


# ---------------------------------------------------------------------------
# Per-trajectory and per-token state
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SignedAggregates:
    """Mean positive and negative log-ratio parts of every trajectory
    (ordered as ``traj_ids``)."""

    traj_ids: np.ndarray
    log_s_plus: np.ndarray
    log_s_minus: np.ndarray

    def __getitem__(self, trajectory: int) -> tuple[float, float]:
        hits = np.flatnonzero(self.traj_ids == trajectory)
        if hits.size == 0:
            raise KeyError(trajectory)
        i = int(hits[0])
        return float(self.log_s_plus[i]), float(self.log_s_minus[i])


def _log_ratios(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    if isinstance(ratios, RatioTuple):
        lr = np.asarray(ratios.log_values, dtype=np.float64)
    else:
        lr = np.log(as_ratio_array(ratios))
    if lr.size != batch.T:
        raise InputError(f"expected {batch.T} ratios, got {lr.size}")
    return lr


def rollback_slopes(batch: Batch, config: GatingConfig) -> np.ndarray:
    """Slope argument of the aggregate gate per trajectory: the configured
    override, or the trajectory length."""
    if config.rollback_slope is not None:
        return np.full(batch.n_trajectories, float(config.rollback_slope))
    return batch.traj_lengths.astype(np.float64)


def _forward(batch: Batch, ratios, config: GatingConfig, backend: str | None = None) -> dict[str, np.ndarray]:
    return kernels.fiberpo_forward(
        _log_ratios(batch, ratios),
        batch.traj_index,
        batch.traj_lengths,
        rollback_slopes(batch, config),
        config.c_plus,
        config.c_minus,
        config.epsilon,
        backend=backend,
    )


def signed_aggregates(batch: Batch, ratios: RatioTuple | Iterable[float]) -> SignedAggregates:
    lr = _log_ratios(batch, ratios)
    n = batch.n_trajectories
    lens = batch.traj_lengths.astype(np.float64)
    plus = np.bincount(batch.traj_index, weights=np.maximum(lr, 0.0), minlength=n) / lens
    minus = np.bincount(batch.traj_index, weights=np.maximum(-lr, 0.0), minlength=n) / lens
    return SignedAggregates(traj_ids=batch.traj_ids, log_s_plus=plus, log_s_minus=minus)


def base_weight(
    aggregates: SignedAggregates,
    config: GatingConfig,
    slopes: Iterable[float] | float,
) -> np.ndarray:
    """Per-trajectory base weight: exp of the gated positive drift minus the
    gated negative drift. ``slopes`` is the rollback slope per trajectory
    (normally its length)."""
    k = np.broadcast_to(np.asarray(slopes, dtype=np.float64), aggregates.log_s_plus.shape)
    log_w = g_agg(aggregates.log_s_plus, config.c_plus, k) - g_agg(aggregates.log_s_minus, config.c_minus, k)
    return np.exp(log_w)


@dataclass(frozen=True, eq=False)
class TokenGateState:
    """Per-token sign label, fiber residual and opposite-sign aggregate,
    with flags telling whether each lies inside the clip band."""

    label: np.ndarray
    residual: np.ndarray
    opposite: np.ndarray
    residual_inside: np.ndarray
    opposite_inside: np.ndarray


def token_gate_states(batch: Batch, ratios: RatioTuple | Iterable[float], config: GatingConfig) -> TokenGateState:
    f = _forward(batch, ratios, config)
    eps = config.epsilon
    return TokenGateState(
        label=f["label"],
        residual=f["residual"],
        opposite=f["opposite"],
        residual_inside=np.abs(f["residual"]) <= eps,
        opposite_inside=np.abs(f["opposite"]) <= eps,
    )


def gated_residual(state: TokenGateState, eps: float) -> np.ndarray:
    """``exp(clip(label * residual, eps) - clip(label * opposite, eps))`` per token."""
    if not eps > 0:
        raise ConfigError(f"eps must be positive, got {eps!r}")
    lab = state.label
    return np.exp(np.clip(lab * state.residual, -eps, eps) - np.clip(lab * state.opposite, -eps, eps))


# ---------------------------------------------------------------------------
# Gate, objective, derivative
# ---------------------------------------------------------------------------


def fiberpo_gate(
    batch: Batch, ratios: RatioTuple | Iterable[float], config: GatingConfig, backend: str | None = None
) -> np.ndarray:
    """Gated ratio of every token: trajectory base weight times gated residual."""
    return np.exp(_forward(batch, ratios, config, backend)["log_gate"])


def fiberpo_spec(batch: Batch, config: GatingConfig) -> RgfSpec:
    return RgfSpec(
        weights=trajectory_weights(batch),
        gate=lambda b, r: fiberpo_gate(b, r, config),
        label="fiberpo",
    )


def fiberpo_objective(
    batch: Batch, ratios: RatioTuple | Iterable[float], config: GatingConfig, backend: str | None = None
) -> float:
    """Length-normalized sum of gated ratios times advantages."""
    gated = fiberpo_gate(batch, ratios, config, backend)
    return float(np.sum(trajectory_weights(batch) * gated * batch.advantages))


def fiberpo_jacobian(
    batch: Batch, ratios: RatioTuple | Iterable[float], config: GatingConfig, backend: str | None = None
) -> np.ndarray:
    """Analytic derivative of the gated ratios with respect to the raw ratios
    (dense ``T x T``; exactly zero between different trajectories)."""
    return kernels.fiberpo_jacobian(
        _log_ratios(batch, ratios),
        batch.traj_index,
        batch.traj_lengths,
        rollback_slopes(batch, config),
        config.c_plus,
        config.c_minus,
        config.epsilon,
        backend=backend,
    )


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------


class LocalRegime(str, Enum):
    L1 = "L1"
    L2 = "L2"
    L3 = "L3"


class GlobalRegime(str, Enum):
    G1 = "G1"
    G2R = "G2r"
    G2 = "G2"
    G3R = "G3r"
    G3 = "G3"


@dataclass(frozen=True)
class RegimeLabel:
    local: LocalRegime
    global_: GlobalRegime

    def as_tuple(self) -> tuple[str, str]:
        return self.local.value, self.global_.value


def global_regime(plus: ChannelState, minus: ChannelState) -> GlobalRegime:
    """Combine the branch of each sign channel into the trajectory's global regime."""
    states = (plus, minus)
    zeroed = sum(s is ChannelState.ZEROED for s in states)
    rolling = sum(s is ChannelState.ROLLBACK for s in states)
    if zeroed == 2:
        return GlobalRegime.G3
    if zeroed + rolling == 2:
        return GlobalRegime.G3R
    if zeroed == 1:
        return GlobalRegime.G2
    if rolling == 1:
        return GlobalRegime.G2R
    return GlobalRegime.G1


def classify_regimes(
    batch: Batch, ratios: RatioTuple | Iterable[float], config: GatingConfig
) -> dict[int, RegimeLabel]:
    """Local (clip saturation count) and global (aggregate gate branch) regime
    of every trajectory, keyed by trajectory id."""
    f = _forward(batch, ratios, config)
    slopes = rollback_slopes(batch, config)
    eps = config.epsilon
    saturated = np.abs(f["residual"]) >= eps
    n_sat = np.bincount(batch.traj_index, weights=saturated.astype(np.float64), minlength=batch.n_trajectories)
    out: dict[int, RegimeLabel] = {}
    for pos, tid in enumerate(batch.traj_ids):
        length = int(batch.traj_lengths[pos])
        if n_sat[pos] == 0:
            local = LocalRegime.L1
        elif n_sat[pos] == length:
            local = LocalRegime.L3
        else:
            local = LocalRegime.L2
        plus = channel_state(f["log_s_plus"][pos], config.c_plus, slopes[pos])
        minus = channel_state(f["log_s_minus"][pos], config.c_minus, slopes[pos])
        out[int(tid)] = RegimeLabel(local, global_regime(plus, minus))
    return out


def zeroing_threshold(c: float, k: float) -> float:
    """Aggregate magnitude at which :func:`g_agg` reaches zero."""
    _check_budget(c, k)
    return c * (1.0 + 1.0 / k)

