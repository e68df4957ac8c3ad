"""Ratio-gated surrogate objectives of the form ``sum_i mu_i * G(r)_i * A_i``
and the token-wise and sequence-wise clipping gates that instantiate them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .core import Batch, RatioTuple, as_ratio_array
from .errors import ConfigError, InputError

__all__ = [
    "GateFn",
    "RgfSpec",
    "eval_rgf",
    "identity_gate",
    "gate_ppo",
    "gate_grpo",
    "gspo_aggregate",
    "gspo_aggregates",
    "gate_gspo",
    "token_weights",
    "trajectory_weights",
    "ppo_spec",
    "grpo_spec",
    "gspo_spec",
    "delta_trpo",
]

GateFn = Callable[[Batch, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class RgfSpec:
    """Fixed token weights, a ratio gate acting on the whole tuple, and a label."""

    weights: np.ndarray
    gate: GateFn
    label: str


def _check_ratios(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    r = as_ratio_array(ratios)
    if r.size != batch.T:
        raise InputError(f"expected {batch.T} ratios, got {r.size}")
    return r


def eval_rgf(spec: RgfSpec, batch: Batch, ratios: RatioTuple | Iterable[float]) -> float:
    """Evaluate ``sum_i weights_i * gate(r)_i * advantage_i``."""
    r = _check_ratios(batch, ratios)
    w = np.asarray(spec.weights, dtype=np.float64)
    if w.shape != (batch.T,):
        raise InputError(f"weights must have one entry per token ({batch.T})")
    gated = np.asarray(spec.gate(batch, r), dtype=np.float64)
    if gated.shape != (batch.T,):
        raise InputError(f"gate {spec.label!r} returned shape {gated.shape}, expected ({batch.T},)")
    bad = np.flatnonzero(~np.isfinite(gated) | (gated <= 0.0))
    if bad.size:
        j = int(bad[0])
        raise InputError(
            f"gate {spec.label!r} produced invalid value {gated[j]!r} at token {j} "
            f"(trajectory {int(batch.trajectories[j])}, timestep {int(batch.timesteps[j])})"
        )
    return float(np.sum(w * gated * batch.advantages))


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------


def token_weights(batch: Batch) -> np.ndarray:
    """Uniform token weights ``1/T`` (equivalently ``n_{s,a}/T`` per pair)."""
    return np.full(batch.T, 1.0 / batch.T)


def trajectory_weights(batch: Batch) -> np.ndarray:
    """Length-normalized weights ``1 / (|Tj| * T_tau)``."""
    return 1.0 / (batch.n_trajectories * batch.token_traj_length.astype(np.float64))


# ---------------------------------------------------------------------------
# Gates
# ---------------------------------------------------------------------------


def identity_gate(batch: Batch, r: np.ndarray) -> np.ndarray:
    return np.asarray(r, dtype=np.float64)


def _check_eps(eps: float) -> float:
    eps = float(eps)
    if not (0.0 < eps < 1.0):
        raise ConfigError(f"clip width must lie in (0, 1), got {eps}")
    return eps


def gate_ppo(
    ratios: RatioTuple | Iterable[float],
    eps: float,
    advantages: Iterable[float] | None = None,
    sign_gated: bool = False,
) -> np.ndarray:
    """Token-wise clip of each ratio to ``[1 - eps, 1 + eps]``.

    The sign-gated variant keeps the raw ratio whenever that is the more
    pessimistic choice for the token's advantage sign. Tokens with zero
    advantage fall back to the plain clip; their contribution is zero anyway.
    """
    r = as_ratio_array(ratios)
    eps = _check_eps(eps)
    clipped = np.clip(r, 1.0 - eps, 1.0 + eps)
    if not sign_gated:
        return clipped
    if advantages is None:
        raise InputError("the sign-gated variant needs advantages")
    sgn = np.sign(np.asarray(advantages, dtype=np.float64))
    if sgn.shape != r.shape:
        raise InputError("advantages must have one entry per ratio")
    pessimistic = sgn * np.minimum(clipped * sgn, r * sgn)
    return np.where(sgn == 0.0, clipped, pessimistic)


def gate_grpo(
    ratios: RatioTuple | Iterable[float],
    eps: float,
    advantages: Iterable[float] | None = None,
    sign_gated: bool = False,
) -> np.ndarray:
    """Same token-wise map as :func:`gate_ppo`; only the weights differ."""
    return gate_ppo(ratios, eps, advantages, sign_gated)


def gspo_aggregates(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    """Geometric-mean ratio of every trajectory, ordered as ``batch.traj_ids``."""
    r = _check_ratios(batch, ratios)
    sums = np.bincount(batch.traj_index, weights=np.log(r), minlength=batch.n_trajectories)
    return np.exp(sums / batch.traj_lengths)


def gspo_aggregate(batch: Batch, ratios: RatioTuple | Iterable[float], trajectory: int) -> float:
    pos = batch.traj_position(trajectory)
    return float(gspo_aggregates(batch, ratios)[pos])


def gate_gspo(
    batch: Batch,
    ratios: RatioTuple | Iterable[float],
    eps: float,
    sign_gated: bool = False,
) -> np.ndarray:
    """Clip each trajectory's geometric-mean ratio and broadcast it to its tokens.

    The sign-gated variant uses the sign of the trajectory's mean advantage.
    """
    eps = _check_eps(eps)
    s = gspo_aggregates(batch, ratios)
    clipped = np.clip(s, 1.0 - eps, 1.0 + eps)
    if sign_gated:
        mean_adv = np.bincount(batch.traj_index, weights=batch.advantages, minlength=batch.n_trajectories)
        sgn = np.sign(mean_adv / batch.traj_lengths)
        pessimistic = sgn * np.minimum(clipped * sgn, s * sgn)
        clipped = np.where(sgn == 0.0, clipped, pessimistic)
    return clipped[batch.traj_index]


# ---------------------------------------------------------------------------
# Objective constructors
# ---------------------------------------------------------------------------


def ppo_spec(batch: Batch, eps: float = 0.2, sign_gated: bool = False) -> RgfSpec:
    return RgfSpec(
        weights=token_weights(batch),
        gate=lambda b, r: gate_ppo(r, eps, b.advantages, sign_gated),
        label="ppo",
    )


def grpo_spec(batch: Batch, eps: float = 0.2, sign_gated: bool = False) -> RgfSpec:
    return RgfSpec(
        weights=trajectory_weights(batch),
        gate=lambda b, r: gate_grpo(r, eps, b.advantages, sign_gated),
        label="grpo",
    )


def gspo_spec(batch: Batch, eps: float = 4e-4, sign_gated: bool = False) -> RgfSpec:
    return RgfSpec(
        weights=trajectory_weights(batch),
        gate=lambda b, r: gate_gspo(b, r, eps, sign_gated),
        label="gspo",
    )


def delta_trpo(gamma: float) -> float:
    """Classical TV trust-region radius ``(1 - gamma) / (8 gamma)``; zero at gamma = 1."""
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0):
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    return (1.0 - gamma) / (8.0 * gamma)
