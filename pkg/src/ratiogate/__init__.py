"""Tabular laboratory for ratio-gated policy optimization objectives."""

from .errors import ConfigError, InputError, NonFiniteError, RatiogateError, StructuralError
from .kernels import BACKEND, available_backends
from .core import (
    Batch,
    GatingConfig,
    PolicyTable,
    RatioTuple,
    compute_ratios,
    random_policy,
    sample_batch,
    softmax_policy,
)
from .divergence import avg_kl, avg_tv, divergence_report, exact_kl, exact_tv, max_tv
from .rgf import RgfSpec, delta_trpo, eval_rgf, grpo_spec, gspo_spec, ppo_spec
from .trust_region import (
    apc_objective,
    classify_zones,
    delta_apc,
    equivalence_check,
    retract,
    tv_trpo_maximizer,
    unit_tv_maximizer,
)
from .fiberpo import classify_regimes, fiberpo_gate, fiberpo_jacobian, fiberpo_objective
from .fbg import FbgInstance, FiniteBundle, MarkovKernel, fbg_gate, fiberpo_fbg_instance, first_order_check
from .fgh import DomainBatch, FibrationChain, build_domain_chain, fgh_gate, fiberpo_domain_gate, fiberpo_domain_objective
from .methods import METHODS, method_objective, method_spec

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Batch",
    "ConfigError",
    "DomainBatch",
    "FbgInstance",
    "FibrationChain",
    "FiniteBundle",
    "GatingConfig",
    "InputError",
    "METHODS",
    "MarkovKernel",
    "NonFiniteError",
    "PolicyTable",
    "RatioTuple",
    "RatiogateError",
    "RgfSpec",
    "StructuralError",
    "__version__",
    "apc_objective",
    "available_backends",
    "avg_kl",
    "avg_tv",
    "build_domain_chain",
    "classify_regimes",
    "classify_zones",
    "compute_ratios",
    "delta_apc",
    "delta_trpo",
    "divergence_report",
    "equivalence_check",
    "eval_rgf",
    "exact_kl",
    "exact_tv",
    "fbg_gate",
    "fgh_gate",
    "fiberpo_domain_gate",
    "fiberpo_domain_objective",
    "fiberpo_fbg_instance",
    "fiberpo_gate",
    "fiberpo_jacobian",
    "fiberpo_objective",
    "first_order_check",
    "grpo_spec",
    "gspo_spec",
    "max_tv",
    "method_objective",
    "method_spec",
    "ppo_spec",
    "random_policy",
    "retract",
    "sample_batch",
    "softmax_policy",
    "tv_trpo_maximizer",
    "unit_tv_maximizer",
]
