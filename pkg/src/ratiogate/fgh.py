"""Gating over a chain of finite fibrations, and its four-level instance with
domain, prompt-group, trajectory and token strata.

Stratum ``0`` is the coarsest and stratum ``n`` the finest. Level ``k >= 1``
carries a bundle ``B_k -> B_{k-1}`` and a kernel spreading densities from
``B_{k-1}`` back onto ``B_k``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from . import kernels
from .core import Batch, GatingConfig, RatioTuple, as_ratio_array
from .errors import InputError, StructuralError
from .fbg import AtomicGate, FbgInstance, FiniteBundle, MarkovKernel, check_reflecting, kernel_apply, pushforward
from .fiberpo import GlobalRegime, channel_state, g_agg, global_regime
from .rgf import trajectory_weights

__all__ = [
    "FibrationChain",
    "compose_pushforward",
    "lift",
    "fgh_gate",
    "chain_from_fbg",
    "DomainBatch",
    "DomainAggregates",
    "group_domain_aggregates",
    "domain_log_base_weight",
    "domain_base_weight",
    "fiberpo_domain_gate",
    "fiberpo_domain_objective",
    "build_domain_chain",
    "drift_report",
]

StratumGate = Callable[[np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Generic chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FibrationChain:
    """Bundles, kernels and per-stratum gates.

    ``bundles[k - 1]`` projects stratum ``k`` onto stratum ``k - 1`` and
    ``kernels[k - 1]`` maps stratum ``k - 1`` densities onto stratum ``k``.
    ``gates[k]`` acts pointwise on stratum ``k``. The optional
    ``decompose``/``recover`` pair converts ratio tuples to finest-stratum
    densities and back.
    """

    bundles: tuple[FiniteBundle, ...]
    kernels: tuple[MarkovKernel, ...]
    gates: tuple[StratumGate, ...]
    decompose: Callable[[np.ndarray], np.ndarray] | None = None
    recover: Callable[[np.ndarray], np.ndarray] | None = None
    label: str = "fgh"

    def __post_init__(self) -> None:
        n = len(self.bundles)
        if n == 0:
            raise StructuralError("a chain needs at least one fibration")
        if len(self.kernels) != n or len(self.gates) != n + 1:
            raise StructuralError("need one kernel per fibration and one gate per stratum")
        for k in range(1, n):
            if self.bundles[k].n_base != self.bundles[k - 1].n_total:
                raise StructuralError(f"stratum {k} sizes disagree between consecutive fibrations")
        for bun, ker in zip(self.bundles, self.kernels):
            if ker.bundle is not bun and not np.array_equal(ker.bundle.projection, bun.projection):
                raise StructuralError("kernel does not match its fibration")

    @property
    def depth(self) -> int:
        return len(self.bundles)

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.bundles[0].n_base,) + tuple(b.n_total for b in self.bundles)

    def reflecting(self, tol: float = 1e-12) -> list[bool]:
        return [check_reflecting(b, k, tol) for b, k in zip(self.bundles, self.kernels)]

    def gate_ratios(self, ratios: Iterable[float]) -> np.ndarray:
        if self.decompose is None or self.recover is None:
            raise StructuralError("this chain has no ratio decomposition")
        return self.recover(fgh_gate(self, self.decompose(np.asarray(ratios, dtype=np.float64))))

    def atomic_gates(self) -> list[AtomicGate]:
        return [AtomicGate(f"stratum {k}", size, g) for k, (size, g) in enumerate(zip(self.sizes, self.gates))]


def compose_pushforward(chain: FibrationChain, sigma: Iterable[float], k: int) -> np.ndarray:
    """Push a finest-stratum density down to stratum ``k``."""
    if not 0 <= k <= chain.depth:
        raise InputError(f"stratum {k} outside 0..{chain.depth}")
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if s.size != chain.sizes[-1]:
        raise InputError(f"density must have {chain.sizes[-1]} entries")
    for m in range(chain.depth, k, -1):
        s = pushforward(chain.bundles[m - 1], s)
    return s


def lift(chain: FibrationChain, p: Iterable[float], k: int) -> np.ndarray:
    """Carry a stratum-``k`` density up to the finest stratum through the kernels."""
    if not 0 <= k <= chain.depth:
        raise InputError(f"stratum {k} outside 0..{chain.depth}")
    x = np.asarray(p, dtype=np.float64).reshape(-1)
    if x.size != chain.sizes[k]:
        raise InputError(f"stratum {k} density must have {chain.sizes[k]} entries")
    for m in range(k, chain.depth):
        x = kernel_apply(chain.kernels[m], x)
    return x


def fgh_gate(chain: FibrationChain, sigma: Iterable[float]) -> np.ndarray:
    """Gate the coarsest aggregate and every stratum's residual against the
    reflected coarser aggregate, then lift all terms to the finest stratum."""
    s = np.asarray(sigma, dtype=np.float64).reshape(-1)
    levels = [compose_pushforward(chain, s, k) for k in range(chain.depth + 1)]
    out = lift(chain, chain.gates[0](levels[0]), 0)
    for k in range(1, chain.depth + 1):
        res = levels[k] - kernel_apply(chain.kernels[k - 1], levels[k - 1])
        out = out + lift(chain, chain.gates[k](res), k)
    return out


def chain_from_fbg(instance: FbgInstance) -> FibrationChain:
    """Single-fibration chain equivalent to a bundle gating instance.

    The fiber gate is called with a zero base density, so gates that read the
    base density are not supported here.
    """
    zero_base = np.zeros(instance.bundle.n_base)
    return FibrationChain(
        bundles=(instance.bundle,),
        kernels=(instance.kernel,),
        gates=(instance.base_gate, lambda x: instance.fiber_gate(x, zero_base)),
        decompose=instance.decompose,
        recover=instance.recover,
        label=instance.label,
    )


# ---------------------------------------------------------------------------
# Domain hierarchy
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DomainBatch:
    """A batch whose trajectories are grouped by prompt, and prompts by domain.

    All arrays are positional: trajectories follow ``batch.traj_ids``, groups
    follow ``group_ids`` and domains follow ``domain_ids``.
    """

    batch: Batch
    traj_group: np.ndarray
    group_domain: np.ndarray
    group_ids: np.ndarray
    domain_ids: np.ndarray
    group_traj_counts: np.ndarray = field(init=False)
    domain_traj_counts: np.ndarray = field(init=False)
    group_token_counts: np.ndarray = field(init=False)
    domain_token_counts: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        b = self.batch
        tg = np.asarray(self.traj_group, dtype=np.int64)
        gd = np.asarray(self.group_domain, dtype=np.int64)
        n_g, n_d = len(self.group_ids), len(self.domain_ids)
        if tg.shape != (b.n_trajectories,) or gd.shape != (n_g,):
            raise StructuralError("group and domain maps have the wrong length")
        if tg.min() < 0 or tg.max() >= n_g or gd.min() < 0 or gd.max() >= n_d:
            raise StructuralError("group or domain index out of range")
        g_traj = np.bincount(tg, minlength=n_g)
        if np.any(g_traj == 0):
            raise StructuralError("empty prompt group")
        d_traj = np.bincount(gd, weights=g_traj, minlength=n_d).astype(np.int64)
        if np.any(np.bincount(gd, minlength=n_d) == 0):
            raise StructuralError("empty domain")
        g_tok = np.bincount(tg, weights=b.traj_lengths, minlength=n_g).astype(np.int64)
        d_tok = np.bincount(gd, weights=g_tok, minlength=n_d).astype(np.int64)
        for name, arr in (
            ("traj_group", tg),
            ("group_domain", gd),
            ("group_ids", np.asarray(self.group_ids, dtype=np.int64)),
            ("domain_ids", np.asarray(self.domain_ids, dtype=np.int64)),
            ("group_traj_counts", g_traj),
            ("domain_traj_counts", d_traj),
            ("group_token_counts", g_tok),
            ("domain_token_counts", d_tok),
        ):
            arr = np.array(arr)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_assignment(cls, batch: Batch, assignment: Mapping) -> "DomainBatch":
        """Build from ``{trajectory id: {"group": g, "domain": d}}``; a group
        listed under two domains is rejected."""
        group_of: dict[int, int] = {}
        domain_of: dict[int, int] = {}
        for tid in batch.traj_ids:
            key = int(tid)
            entry = assignment.get(key, assignment.get(str(key)))
            if entry is None:
                raise StructuralError(f"trajectory {key} has no group assignment")
            g, d = int(entry["group"]), int(entry["domain"])
            if domain_of.setdefault(g, d) != d:
                raise StructuralError(f"group {g} assigned to domains {domain_of[g]} and {d}")
            group_of[key] = g
        group_ids = np.array(sorted(domain_of), dtype=np.int64)
        domain_ids = np.array(sorted(set(domain_of.values())), dtype=np.int64)
        g_pos = {int(g): i for i, g in enumerate(group_ids)}
        d_pos = {int(d): i for i, d in enumerate(domain_ids)}
        traj_group = np.array([g_pos[group_of[int(t)]] for t in batch.traj_ids], dtype=np.int64)
        group_domain = np.array([d_pos[domain_of[int(g)]] for g in group_ids], dtype=np.int64)
        return cls(batch, traj_group, group_domain, group_ids, domain_ids)

    @classmethod
    def from_json(cls, batch: Batch, path: str | Path) -> "DomainBatch":
        return cls.from_assignment(batch, json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def trivial(cls, batch: Batch) -> "DomainBatch":
        """One domain, one group per trajectory."""
        n = batch.n_trajectories
        return cls(batch, np.arange(n), np.zeros(n, dtype=np.int64), batch.traj_ids.copy(), np.array([0]))

    def assignment(self) -> dict[str, dict[str, int]]:
        out = {}
        for pos, tid in enumerate(self.batch.traj_ids):
            g = int(self.traj_group[pos])
            out[str(int(tid))] = {"group": int(self.group_ids[g]), "domain": int(self.domain_ids[self.group_domain[g]])}
        return out

    @property
    def traj_domain(self) -> np.ndarray:
        return self.group_domain[self.traj_group]


@dataclass(frozen=True, eq=False)
class DomainAggregates:
    """Signed aggregates at the trajectory, group and domain levels; each
    entry is a ``(plus, minus)`` pair of arrays."""

    trajectory: tuple[np.ndarray, np.ndarray]
    group: tuple[np.ndarray, np.ndarray]
    domain: tuple[np.ndarray, np.ndarray]


def _log_ratios(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    if isinstance(ratios, RatioTuple):
        lr = np.asarray(ratios.log_values, dtype=np.float64)
    else:
        lr = np.log(as_ratio_array(ratios))
    if lr.size != batch.T:
        raise InputError(f"expected {batch.T} ratios, got {lr.size}")
    return lr


def group_domain_aggregates(db: DomainBatch, ratios: RatioTuple | Iterable[float]) -> DomainAggregates:
    """Trajectory aggregates; their unweighted mean within each group; and
    the trajectory-count-weighted mean of group aggregates within each domain."""
    b = db.batch
    lr = _log_ratios(b, ratios)
    lens = b.traj_lengths.astype(np.float64)
    n_g, n_d = len(db.group_ids), len(db.domain_ids)
    out = []
    for part in (np.maximum(lr, 0.0), np.maximum(-lr, 0.0)):
        traj = np.bincount(b.traj_index, weights=part, minlength=b.n_trajectories) / lens
        group = np.bincount(db.traj_group, weights=traj, minlength=n_g) / db.group_traj_counts
        domain = (
            np.bincount(db.group_domain, weights=db.group_traj_counts * group, minlength=n_d)
            / db.domain_traj_counts
        )
        out.append((traj, group, domain))
    (tp, gp, dp), (tm, gm, dm) = out
    return DomainAggregates(trajectory=(tp, tm), group=(gp, gm), domain=(dp, dm))


def _level_slopes(db: DomainBatch, config: GatingConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rollback slopes per trajectory for the domain, group and trajectory terms."""
    b = db.batch
    if config.rollback_slope is not None:
        k = np.full(b.n_trajectories, float(config.rollback_slope))
        return k, k, k
    return (
        db.domain_token_counts[db.traj_domain].astype(np.float64),
        db.group_token_counts[db.traj_group].astype(np.float64),
        b.traj_lengths.astype(np.float64),
    )


def _level_inputs(db: DomainBatch, agg: DomainAggregates, channel: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-trajectory drift fed to each level's gate: the domain aggregate,
    the group residual and the trajectory residual."""
    d = agg.domain[channel][db.traj_domain]
    g = agg.group[channel][db.traj_group]
    t = agg.trajectory[channel]
    return d, g - d, t - g


def domain_log_base_weight(db: DomainBatch, agg: DomainAggregates, config: GatingConfig) -> np.ndarray:
    """Per-trajectory log base weight: three gated terms for the positive
    channel minus the same for the negative channel."""
    slopes = _level_slopes(db, config)
    total = np.zeros(db.batch.n_trajectories)
    for channel, sign in ((0, 1.0), (1, -1.0)):
        for level, (x, k) in enumerate(zip(_level_inputs(db, agg, channel), slopes)):
            c = config.budgets(level)[channel]
            total += sign * g_agg(x, c, k)
    return total


def domain_base_weight(db: DomainBatch, agg: DomainAggregates, config: GatingConfig) -> np.ndarray:
    """Base weight broadcast to every token."""
    return np.exp(domain_log_base_weight(db, agg, config))[db.batch.traj_index]


def fiberpo_domain_gate(
    db: DomainBatch, ratios: RatioTuple | Iterable[float], config: GatingConfig, backend: str | None = None
) -> np.ndarray:
    """Hierarchical base weight times the same gated residual as the two-level gate."""
    b = db.batch
    lr = _log_ratios(b, ratios)
    fwd = kernels.fiberpo_forward(
        lr, b.traj_index, b.traj_lengths, b.traj_lengths, config.c_plus, config.c_minus, config.epsilon,
        backend=backend,
    )
    log_w = domain_log_base_weight(db, group_domain_aggregates(db, ratios), config)
    return np.exp(log_w[b.traj_index] + fwd["log_fiber"])


def fiberpo_domain_objective(
    db: DomainBatch, ratios: RatioTuple | Iterable[float], config: GatingConfig, backend: str | None = None
) -> float:
    b = db.batch
    return float(np.sum(trajectory_weights(b) * fiberpo_domain_gate(db, ratios, config, backend) * b.advantages))


def build_domain_chain(db: DomainBatch, config: GatingConfig) -> FibrationChain:
    """Three-fibration chain over (domain, group, trajectory, token) strata,
    each doubled by the sign channel (position ``2 * unit + channel``)."""
    b = db.batch
    n_d, n_g, n_t, T = len(db.domain_ids), len(db.group_ids), b.n_trajectories, b.T

    def doubled(parent: np.ndarray) -> np.ndarray:
        out = np.empty(2 * parent.size, dtype=np.int64)
        out[0::2] = 2 * parent
        out[1::2] = 2 * parent + 1
        return out

    b1 = FiniteBundle(doubled(db.group_domain), 2 * n_d)
    b2 = FiniteBundle(doubled(db.traj_group), 2 * n_g)
    b3 = FiniteBundle(doubled(b.traj_index), 2 * n_t)
    k1 = MarkovKernel(b1, np.repeat(db.group_traj_counts / db.domain_traj_counts[db.group_domain], 2))
    k2 = MarkovKernel(b2, np.repeat(1.0 / db.group_traj_counts[db.traj_group], 2))
    lens_tok = b.token_traj_length.astype(np.float64)
    k3 = MarkovKernel(b3, np.repeat(1.0 / lens_tok, 2))

    if config.rollback_slope is not None:
        kd = np.full(2 * n_d, float(config.rollback_slope))
        kg = np.full(2 * n_g, float(config.rollback_slope))
        kt = np.full(2 * n_t, float(config.rollback_slope))
    else:
        kd = np.repeat(db.domain_token_counts.astype(np.float64), 2)
        kg = np.repeat(db.group_token_counts.astype(np.float64), 2)
        kt = np.repeat(b.traj_lengths.astype(np.float64), 2)
    cd = np.tile(config.budgets(0), n_d)
    cg = np.tile(config.budgets(1), n_g)
    ct = np.tile(config.budgets(2), n_t)
    nd = np.repeat(db.domain_traj_counts.astype(np.float64), 2)
    ng = np.repeat(db.group_traj_counts.astype(np.float64), 2)
    band = np.repeat(config.epsilon / lens_tok, 2)

    gates = (
        lambda x: nd * g_agg(x / nd, cd, kd),
        lambda x: ng * g_agg(x / ng, cg, kg),
        lambda x: g_agg(x, ct, kt),
        lambda x: np.clip(x, -band, band),
    )

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

    return FibrationChain(
        bundles=(b1, b2, b3),
        kernels=(k1, k2, k3),
        gates=gates,
        decompose=decompose,
        recover=recover,
        label="fiberpo-domain",
    )


def drift_report(db: DomainBatch, ratios: RatioTuple | Iterable[float], config: GatingConfig) -> list[dict]:
    """One row per unit and level: the drift entering that level's gates
    (aggregate at the domain level, residuals below) and the resulting
    global regime."""
    agg = group_domain_aggregates(db, ratios)
    slopes = _level_slopes(db, config)
    rows = []
    levels = (
        ("domain", db.domain_ids, lambda pos: np.flatnonzero(db.traj_domain == pos)[0]),
        ("group", db.group_ids, lambda pos: np.flatnonzero(db.traj_group == pos)[0]),
        ("trajectory", db.batch.traj_ids, lambda pos: pos),
    )
    inputs = [_level_inputs(db, agg, 0), _level_inputs(db, agg, 1)]
    for level, (name, ids, rep) in enumerate(levels):
        for pos, uid in enumerate(ids):
            t = int(rep(pos))
            plus, minus = float(inputs[0][level][t]), float(inputs[1][level][t])
            c_plus, c_minus = config.budgets(level)
            k = float(slopes[level][t])
            regime: GlobalRegime = global_regime(channel_state(plus, c_plus, k), channel_state(minus, c_minus, k))
            rows.append(
                {"level": name, "unit": int(uid), "log_s_plus": plus, "log_s_minus": minus, "regime": regime.value}
            )
    return rows

