"""Gating over a finite bundle: densities on a total space and a base space,
the fiberwise-sum pushforward, reflecting Markov kernels, the residual
decomposition, and the two-term gate that acts on the base component and the
residual separately.

Points of both spaces are integer positions; a bundle is described by the
array sending each total-space point to its base point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import Batch, GatingConfig, PolicyTable, compute_ratios, finite_diff_gradient
from .errors import InputError, StructuralError
from .fiberpo import g_agg, rollback_slopes
from .rgf import trajectory_weights

__all__ = [
    "FiniteBundle",
    "Density",
    "MarkovKernel",
    "FbgInstance",
    "pushforward",
    "kernel_apply",
    "check_reflecting",
    "residual",
    "fbg_gate",
    "AtomicGate",
    "FirstOrderReport",
    "first_order_check",
    "fiberpo_fbg_instance",
]

REFLECT_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class FiniteBundle:
    """Projection from ``n_total`` points onto ``n_base`` points."""

    projection: np.ndarray
    n_base: int
    fiber_sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        proj = np.asarray(self.projection, dtype=np.int64).reshape(-1)
        n_base = int(self.n_base)
        if proj.size == 0 or n_base <= 0:
            raise InputError("a bundle needs at least one point in each space")
        if proj.min() < 0 or proj.max() >= n_base:
            raise StructuralError("projection points outside the base space")
        sizes = np.bincount(proj, minlength=n_base)
        if np.any(sizes == 0):
            raise StructuralError(f"empty fiber over base point {int(np.flatnonzero(sizes == 0)[0])}")
        proj.setflags(write=False)
        sizes.setflags(write=False)
        object.__setattr__(self, "projection", proj)
        object.__setattr__(self, "n_base", n_base)
        object.__setattr__(self, "fiber_sizes", sizes)

    @property
    def n_total(self) -> int:
        return int(self.projection.size)

    def fiber(self, b: int) -> np.ndarray:
        return np.flatnonzero(self.projection == b)

    def to_dict(self) -> dict:
        return {"n_base": self.n_base, "projection": [int(x) for x in self.projection]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "FiniteBundle":
        return cls(projection=np.asarray(data["projection"]), n_base=int(data["n_base"]))


@dataclass(frozen=True, eq=False)
class Density:
    """Signed weights on the total (``"E"``) or base (``"B"``) space."""

    space: str
    weights: np.ndarray

    def __post_init__(self) -> None:
        if self.space not in ("E", "B"):
            raise InputError("space must be 'E' or 'B'")
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise InputError("density weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)


def _weights(x: Density | Iterable[float], size: int, what: str) -> np.ndarray:
    w = x.weights if isinstance(x, Density) else np.asarray(x, dtype=np.float64).reshape(-1)
    if w.size != size:
        raise InputError(f"{what} density must have {size} entries, got {w.size}")
    return w


@dataclass(frozen=True, eq=False)
class MarkovKernel:
    """Base-to-total kernel; ``weights[e]`` is the mass sent from the base
    point of ``e`` to ``e`` (entries off the own base point are zero)."""

    bundle: FiniteBundle
    weights: np.ndarray

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if w.size != self.bundle.n_total:
            raise InputError("kernel needs one weight per total-space point")
        if not np.all(np.isfinite(w)) or np.any(w < 0.0):
            raise InputError("kernel weights must be finite and non-negative")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, bundle: FiniteBundle) -> "MarkovKernel":
        return cls(bundle, 1.0 / bundle.fiber_sizes[bundle.projection])

    @classmethod
    def from_triplets(cls, bundle: FiniteBundle, triplets: Iterable[Sequence[float]]) -> "MarkovKernel":
        """Build from ``(e, b, value)`` entries; entries with ``b`` other than
        the base point of ``e`` must be zero."""
        w = np.zeros(bundle.n_total)
        for e, b, val in triplets:
            e, b = int(e), int(b)
            if not 0 <= e < bundle.n_total or not 0 <= b < bundle.n_base:
                raise StructuralError(f"kernel entry ({e}, {b}) outside the bundle")
            if b != bundle.projection[e]:
                if val != 0:
                    raise StructuralError(f"kernel entry ({e}, {b}) leaves the fiber")
                continue
            w[e] += float(val)
        return cls(bundle, w)

    def to_triplets(self) -> list[list]:
        return [[int(e), int(b), float(v)] for e, (b, v) in enumerate(zip(self.bundle.projection, self.weights))]


def pushforward(bundle: FiniteBundle, sigma: Density | Iterable[float]) -> np.ndarray:
    """Sum a total-space density over each fiber."""
    s = _weights(sigma, bundle.n_total, "total-space")
    return np.bincount(bundle.projection, weights=s, minlength=bundle.n_base)


def kernel_apply(kernel: MarkovKernel, p: Density | Iterable[float]) -> np.ndarray:
    """Spread a base density over the fibers with the kernel weights."""
    b = kernel.bundle
    return kernel.weights * _weights(p, b.n_base, "base")[b.projection]


def check_reflecting(bundle: FiniteBundle, kernel: MarkovKernel, tol: float = REFLECT_TOL) -> bool:
    """True iff the kernel weights of every fiber sum to one."""
    if kernel.bundle is not bundle and not np.array_equal(kernel.bundle.projection, bundle.projection):
        raise StructuralError("kernel belongs to a different bundle")
    sums = np.bincount(bundle.projection, weights=kernel.weights, minlength=bundle.n_base)
    return bool(np.all(np.abs(sums - 1.0) <= tol))


def residual(kernel: MarkovKernel, sigma: Density | Iterable[float]) -> np.ndarray:
    """``sigma`` minus the kernel image of its pushforward."""
    s = _weights(sigma, kernel.bundle.n_total, "total-space")
    return s - kernel_apply(kernel, pushforward(kernel.bundle, s))


BaseGate = Callable[[np.ndarray], np.ndarray]
FiberGate = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class AtomicGate:
    """A pointwise gate on one space, named for diagnostics."""

    name: str
    size: int
    fn: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class FbgInstance:
    """Kernel, pointwise base and fiber gates, and the maps between ratio
    tuples and total-space densities.

    ``fiber_gate`` receives the residual and the base density; the base
    density argument is available for gates that need it.
    """

    kernel: MarkovKernel
    base_gate: BaseGate
    fiber_gate: FiberGate
    decompose: Callable[[np.ndarray], np.ndarray]
    recover: Callable[[np.ndarray], np.ndarray]
    label: str = "fbg"

    @property
    def bundle(self) -> FiniteBundle:
        return self.kernel.bundle

    def gate_ratios(self, ratios: Iterable[float]) -> np.ndarray:
        return self.recover(fbg_gate(self, self.decompose(np.asarray(ratios, dtype=np.float64))))

    def atomic_gates(self) -> list[AtomicGate]:
        b = self.bundle
        zero_base = np.zeros(b.n_base)
        return [
            AtomicGate("base", b.n_base, self.base_gate),
            AtomicGate("fiber", b.n_total, lambda x: self.fiber_gate(x, zero_base)),
        ]


def fbg_gate(instance: FbgInstance, sigma: Density | Iterable[float]) -> np.ndarray:
    """Base gate applied to the pushforward and reflected back, plus the fiber
    gate applied to the residual."""
    b = instance.bundle
    s = _weights(sigma, b.n_total, "total-space")
    p = pushforward(b, s)
    res = s - kernel_apply(instance.kernel, p)
    return kernel_apply(instance.kernel, instance.base_gate(p)) + instance.fiber_gate(res, p)


# ---------------------------------------------------------------------------
# First-order agreement
# ---------------------------------------------------------------------------


class _GatedMap(Protocol):
    def gate_ratios(self, ratios: Iterable[float]) -> np.ndarray: ...

    def atomic_gates(self) -> list[AtomicGate]: ...


@dataclass(frozen=True)
class FirstOrderReport:
    value_gap: float
    max_rel_error: float
    precondition_ok: bool
    violations: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return self.precondition_ok and self.value_gap <= 1e-12 and self.max_rel_error <= 1e-5

    def to_dict(self) -> dict:
        return {
            "value_gap": self.value_gap,
            "max_rel_error": self.max_rel_error,
            "precondition_ok": self.precondition_ok,
            "violations": list(self.violations),
            "passed": self.passed,
        }


def _atomic_violations(gates: Sequence[AtomicGate], h: float = 1e-8) -> list[str]:
    out = []
    for g in gates:
        zero = np.asarray(g.fn(np.zeros(g.size)), dtype=np.float64)
        plus = np.asarray(g.fn(np.full(g.size, h)), dtype=np.float64)
        minus = np.asarray(g.fn(np.full(g.size, -h)), dtype=np.float64)
        slope = (plus - minus) / (2.0 * h)
        if np.any(np.abs(zero) > 1e-15):
            out.append(f"{g.name} gate is nonzero at the origin")
        if np.any(np.abs(slope - 1.0) > 1e-6):
            out.append(f"{g.name} gate has slope {float(slope.flat[np.argmax(np.abs(slope - 1.0))])!r} at the origin")
    return out


def first_order_check(
    instance: _GatedMap,
    batch: Batch,
    old_policy: PolicyTable,
    step: float = 1e-5,
    weights: np.ndarray | None = None,
) -> FirstOrderReport:
    """Compare the gated objective with the ungated ratio objective at the
    reference policy: their values and their finite-difference gradients with
    respect to the logits.

    Atomic gates that are not the identity to first order at zero are reported
    as precondition violations and no gradients are compared.
    """
    violations = _atomic_violations(instance.atomic_gates())
    if violations:
        return FirstOrderReport(float("nan"), float("nan"), False, tuple(violations))
    mu = trajectory_weights(batch) if weights is None else np.asarray(weights, dtype=np.float64)
    adv = batch.advantages
    z0 = old_policy.flat_logits()

    def ratios_at(z: np.ndarray) -> np.ndarray:
        return compute_ratios(old_policy.with_flat_logits(z), old_policy, batch).values

    def gated(z: np.ndarray) -> float:
        return float(np.sum(mu * instance.gate_ratios(ratios_at(z)) * adv))

    def linear(z: np.ndarray) -> float:
        return float(np.sum(mu * ratios_at(z) * adv))

    gap = abs(gated(z0) - linear(z0))
    g_gated = finite_diff_gradient(gated, z0, step)
    g_lin = finite_diff_gradient(linear, z0, step)
    denom = max(float(np.linalg.norm(g_lin)), 1e-300)
    rel = float(np.linalg.norm(g_gated - g_lin)) / denom
    return FirstOrderReport(float(gap), rel, True, ())


# ---------------------------------------------------------------------------
# Two-level instance
# ---------------------------------------------------------------------------


def fiberpo_fbg_instance(batch: Batch, config: GatingConfig) -> FbgInstance:
    """Bundle of (token, sign channel) over (trajectory, sign channel).

    The decomposition puts ``max(l log r, 0) / T_tau`` on channel ``l`` of each
    token, the kernel is uniform over each trajectory, the base gate is the
    aggregate gate with the channel's budget, and the fiber gate clips to
    ``eps / T_tau``. Recovery exponentiates ``T_tau`` times the channel
    difference.
    """
    T = batch.T
    lens_tok = batch.token_traj_length.astype(np.float64)
    # total-space point 2i + c, c = 0 for the positive channel and 1 for the negative one
    proj = np.empty(2 * T, dtype=np.int64)
    proj[0::2] = 2 * batch.traj_index
    proj[1::2] = 2 * batch.traj_index + 1
    bundle = FiniteBundle(proj, 2 * batch.n_trajectories)
    kern_w = np.repeat(1.0 / lens_tok, 2)
    kernel = MarkovKernel(bundle, kern_w)

    slopes = np.repeat(rollback_slopes(batch, config), 2)
    budgets = np.tile([config.c_plus, config.c_minus], batch.n_trajectories)
    band = np.repeat(config.epsilon / lens_tok, 2)

    def base_gate(p: np.ndarray) -> np.ndarray:
        return g_agg(p, budgets, slopes)

    def fiber_gate(x: np.ndarray, p_base: np.ndarray) -> np.ndarray:
        return np.clip(x, -band, band)

    def decompose(r: np.ndarray) -> np.ndarray:
        lr = np.log(np.asarray(r, dtype=np.float64))
        if lr.size != T:
            raise InputError(f"expected {T} ratios, got {lr.size}")
        sigma = np.empty(2 * T)
        sigma[0::2] = np.maximum(lr, 0.0) / lens_tok
        sigma[1::2] = np.maximum(-lr, 0.0) / lens_tok
        return sigma

    def recover(sigma: np.ndarray) -> np.ndarray:
        s = np.asarray(sigma, dtype=np.float64)
        return np.exp(lens_tok * (s[0::2] - s[1::2]))

    return FbgInstance(kernel, base_gate, fiber_gate, decompose, recover, label="fiberpo")
