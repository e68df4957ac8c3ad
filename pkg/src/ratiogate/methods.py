"""Objective lookup by method label."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .core import Batch, GatingConfig, RatioTuple
from .errors import ConfigError
from .fgh import DomainBatch, fiberpo_domain_gate
from .fiberpo import fiberpo_gate
from .rgf import RgfSpec, eval_rgf, gate_gspo, gate_ppo, token_weights, trajectory_weights
from .trust_region import apc_gate, state_weights

__all__ = ["METHODS", "method_spec", "method_objective"]

METHODS = ("ppo", "grpo", "gspo", "apc", "fiberpo", "fiberpo-domain")


def method_spec(
    method: str,
    batch: Batch,
    config: GatingConfig,
    domains: DomainBatch | None = None,
    sign_gated: bool = False,
) -> RgfSpec:
    """Weights and gate of the named method.

    ``apc`` uses ``config.delta`` as its radius and ``config.gamma`` for its
    state weights. ``fiberpo-domain`` uses ``domains`` when given and one
    group per trajectory in a single domain otherwise.
    """
    if method == "ppo":
        return RgfSpec(token_weights(batch), lambda b, r: gate_ppo(r, config.eps_ppo, b.advantages, sign_gated), method)
    if method == "grpo":
        return RgfSpec(
            trajectory_weights(batch), lambda b, r: gate_ppo(r, config.eps_ppo, b.advantages, sign_gated), method
        )
    if method == "gspo":
        return RgfSpec(trajectory_weights(batch), lambda b, r: gate_gspo(b, r, config.eps_gspo, sign_gated), method)
    if method == "apc":
        w = state_weights(batch, config.gamma)[batch.state_index]
        return RgfSpec(w, lambda b, r: apc_gate(b, r, float(config.delta)), method)
    if method == "fiberpo":
        return RgfSpec(trajectory_weights(batch), lambda b, r: fiberpo_gate(b, r, config), method)
    if method == "fiberpo-domain":
        db = domains if domains is not None else DomainBatch.trivial(batch)
        if db.batch is not batch:
            raise ConfigError("domain assignment belongs to a different batch")
        return RgfSpec(trajectory_weights(batch), lambda b, r: fiberpo_domain_gate(db, r, config), method)
    raise ConfigError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def method_objective(
    method: str,
    batch: Batch,
    ratios: RatioTuple | Iterable[float],
    config: GatingConfig,
    domains: DomainBatch | None = None,
    sign_gated: bool = False,
) -> float:
    """Value of the named surrogate, evaluated through its weights and gate."""
    spec = method_spec(method, batch, config, domains, sign_gated)
    return eval_rgf(spec, batch, np.asarray(ratios.values if isinstance(ratios, RatioTuple) else ratios))
