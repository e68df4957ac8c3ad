"""Cross-coupled clipping objective with a per-state TV budget, its zone
classification, the sample-based TV-penalized maximizer it is equivalent to,
the retraction operator behind that equivalence, and a numerical harness that
checks the equivalence on small instances.

Deviation-valued quantities live on distinct (state, action) pairs, ordered as
``batch.pair_keys``; :class:`DeviationTuple` converts between pair and token
views.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import minimize

from . import kernels
from .core import Batch, RatioTuple, as_ratio_array
from .errors import ConfigError, InputError
from .rgf import RgfSpec, delta_trpo

__all__ = [
    "DeviationTuple",
    "UnitTvSolution",
    "ZoneLabel",
    "apc_clip_bounds",
    "apc_clip_bound",
    "apc_gate",
    "apc_spec",
    "apc_objective",
    "classify_zones",
    "classify_zone",
    "lp_vertex_oracle",
    "unit_tv_maximizer",
    "delta_apc",
    "tv_trpo_maximizer",
    "state_weights",
    "correction_term",
    "reduced_tv_trpo_objective",
    "surrogated_apc_objective",
    "retract",
    "random_feasible_deviation",
    "EquivalenceBudget",
    "EquivalenceReport",
    "equivalence_check",
]


# ---------------------------------------------------------------------------
# Deviations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeviationTuple:
    """Ratio deviations ``r - 1`` stored per distinct (state, action) pair."""

    batch: Batch = field(repr=False)
    pair_values: np.ndarray

    @classmethod
    def from_pairs(cls, batch: Batch, values: Iterable[float]) -> "DeviationTuple":
        v = np.array(values, dtype=np.float64).reshape(-1)
        if v.size != batch.pair_keys.shape[0]:
            raise InputError(f"expected {batch.pair_keys.shape[0]} pair deviations, got {v.size}")
        if not np.all(np.isfinite(v)):
            raise InputError("deviations must be finite")
        v.setflags(write=False)
        return cls(batch=batch, pair_values=v)

    @classmethod
    def from_tokens(cls, batch: Batch, values: Iterable[float]) -> "DeviationTuple":
        v = np.asarray(values, dtype=np.float64).reshape(-1)
        if v.size != batch.T:
            raise InputError(f"expected {batch.T} token deviations, got {v.size}")
        pair = np.zeros(batch.pair_keys.shape[0])
        pair[batch.pair_index] = v
        if np.any(pair[batch.pair_index] != v):
            raise InputError("tokens sharing a state-action pair must share the deviation")
        return cls.from_pairs(batch, pair)

    @classmethod
    def from_ratios(cls, batch: Batch, ratios: RatioTuple | Iterable[float]) -> "DeviationTuple":
        return cls.from_tokens(batch, as_ratio_array(ratios) - 1.0)

    @property
    def values(self) -> np.ndarray:
        """Per-token deviations."""
        return self.pair_values[self.batch.pair_index]

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {
            (int(s), int(a)): float(v) for (s, a), v in zip(self.batch.pair_keys, self.pair_values)
        }

    def constraint_residual(self) -> np.ndarray:
        """Per-state ``sum_a n_{s,a} dev_{s,a}``; zero for feasible deviations."""
        b = self.batch
        return np.bincount(
            b.pair_state_index, weights=b.pair_counts * self.pair_values, minlength=b.state_ids.size
        )

    def per_state_tv(self) -> np.ndarray:
        b = self.batch
        s = np.bincount(
            b.pair_state_index, weights=b.pair_counts * np.abs(self.pair_values), minlength=b.state_ids.size
        )
        return s / b.state_counts


# ---------------------------------------------------------------------------
# Cross-coupled clipping
# ---------------------------------------------------------------------------


class ZoneLabel(str, Enum):
    PASS_THROUGH = "P"
    ROLLBACK = "R"
    ZEROED = "Z"


def _deviations(batch: Batch, ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    r = as_ratio_array(ratios)
    if r.size != batch.T:
        raise InputError(f"expected {batch.T} ratios, got {r.size}")
    return r - 1.0


def _check_delta(delta: float) -> float:
    delta = float(delta)
    if not (delta >= 0.0 and math.isfinite(delta)):
        raise ConfigError(f"delta must be finite and non-negative, got {delta}")
    return delta


def _token_clip(batch: Batch, dev: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    return kernels.apc_clip(dev, np.ones(batch.T), batch.state_index, batch.state_counts, delta)


def apc_clip_bounds(batch: Batch, ratios: RatioTuple | Iterable[float], delta: float) -> np.ndarray:
    """Raw clip bound of every token: ``T_s * delta`` minus the absolute
    deviations of all other tokens at the same state (may be negative)."""
    bound, _ = _token_clip(batch, _deviations(batch, ratios), _check_delta(delta))
    return bound


def apc_clip_bound(batch: Batch, ratios: RatioTuple | Iterable[float], token: int, delta: float) -> float:
    if not 0 <= int(token) < batch.T:
        raise InputError(f"token index {token} out of range")
    return float(apc_clip_bounds(batch, ratios, delta)[int(token)])


def apc_gate(batch: Batch, ratios: RatioTuple | Iterable[float], delta: float) -> np.ndarray:
    """Gated ratios ``1 + clip(r - 1, B)`` with the bound taken as ``max(B, 0)``."""
    _, clipped = _token_clip(batch, _deviations(batch, ratios), _check_delta(delta))
    return 1.0 + clipped


def state_weights(batch: Batch, gamma: float = 1.0) -> np.ndarray:
    """Per-state factor multiplying ``sum_a n_{s,a}(...)`` in the discounted
    estimators: ``Gamma(s) / ((1 - gamma) Gamma T_s)`` for gamma < 1 and
    ``1 / T`` in the undiscounted case."""
    gamma = float(gamma)
    if not (0.0 < gamma <= 1.0):
        raise ConfigError(f"gamma must lie in (0, 1], got {gamma}")
    if gamma == 1.0:
        return np.full(batch.state_ids.size, 1.0 / batch.T)
    mass = batch.discount_mass(gamma)
    return mass / ((1.0 - gamma) * mass.sum() * batch.state_counts)


def apc_spec(batch: Batch, delta: float, gamma: float = 1.0) -> RgfSpec:
    return RgfSpec(
        weights=state_weights(batch, gamma)[batch.state_index],
        gate=lambda b, r: apc_gate(b, r, delta),
        label="apc",
    )


def apc_objective(batch: Batch, ratios: RatioTuple | Iterable[float], delta: float, gamma: float = 1.0) -> float:
    """Sum over tokens of ``w_s * (clip(r - 1, B) * A + A)``; with gamma = 1
    the weight is ``1/T``."""
    dev = _deviations(batch, ratios)
    _, clipped = _token_clip(batch, dev, _check_delta(delta))
    w = state_weights(batch, gamma)[batch.state_index]
    adv = batch.advantages
    return float(np.sum(w * (clipped * adv + adv)))


def classify_zones(batch: Batch, ratios: RatioTuple | Iterable[float], delta: float) -> list[ZoneLabel]:
    """Clip regime of every token from the per-state TV estimate.

    Pass-through when the state's TV estimate is within ``delta``; rollback when
    it exceeds ``delta`` but ``|r - 1| / T_s`` exceeds the excess; zeroed
    otherwise.
    """
    delta = _check_delta(delta)
    dev = _deviations(batch, ratios)
    absdev = np.abs(dev)
    tv = np.bincount(batch.state_index, weights=absdev, minlength=batch.state_ids.size) / batch.state_counts
    tv_tok = tv[batch.state_index]
    ts = batch.token_state_count
    labels = []
    for d, a, t in zip(tv_tok, absdev, ts):
        if d <= delta:
            labels.append(ZoneLabel.PASS_THROUGH)
        elif a / t > d - delta:
            labels.append(ZoneLabel.ROLLBACK)
        else:
            labels.append(ZoneLabel.ZEROED)
    return labels


def classify_zone(batch: Batch, ratios: RatioTuple | Iterable[float], token: int, delta: float) -> ZoneLabel:
    if not 0 <= int(token) < batch.T:
        raise InputError(f"token index {token} out of range")
    return classify_zones(batch, ratios, delta)[int(token)]


# ---------------------------------------------------------------------------
# Unit-TV linear programs
# ---------------------------------------------------------------------------


def lp_vertex_oracle(counts: Sequence[float], advantages: Sequence[float]) -> tuple[float, list[np.ndarray]]:
    """Brute-force solution of the per-state unit-TV program.

    Maximizes ``sum_a n_a dev_a adv_a`` over ``sum_a n_a |dev_a| <= T_s`` and
    ``sum_a n_a dev_a = 0`` by enumerating the vertices of the polytope inside
    every sign orthant. Returns the optimal value and all optimal vertices, in
    deviation coordinates. Intended for a handful of actions only.
    """
    n = np.asarray(counts, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    m = n.size
    if m == 0:
        raise InputError("need at least one action")
    total = float(n.sum())
    if m == 1:
        return 0.0, [np.zeros(1)]
    vertices: list[np.ndarray] = []
    for signs in itertools.product((1.0, -1.0), repeat=m):
        sg = np.asarray(signs)
        # Inequalities G x <= h over x = n * dev: -sg_a x_a <= 0 and sum sg_a x_a <= T_s.
        G = np.vstack([-np.diag(sg), sg[None, :]])
        h = np.concatenate([np.zeros(m), [total]])
        for active in itertools.combinations(range(m + 1), m - 1):
            A = np.vstack([G[list(active)], np.ones((1, m))])
            b = np.concatenate([h[list(active)], [0.0]])
            if abs(np.linalg.det(A)) < 1e-12:
                continue
            x = np.linalg.solve(A, b)
            if np.all(G @ x <= h + 1e-9):
                vertices.append(x)
    values = np.array([float(x @ adv) for x in vertices])
    best = float(values.max())
    tol = 1e-9 * max(1.0, abs(best))
    optimal = [vertices[i] / n for i in np.flatnonzero(values >= best - tol)]
    unique: list[np.ndarray] = []
    for v in optimal:
        if not any(np.allclose(v, w, atol=1e-12) for w in unique):
            unique.append(v)
    return best, unique


@dataclass(frozen=True, eq=False)
class UnitTvSolution:
    """Per-state unit-TV maximizers, their values, and the aggregate value."""

    batch: Batch = field(repr=False)
    pair_deviation: np.ndarray
    per_state_value: dict[int, float]
    aggregate_value: float

    @property
    def per_state_deviation(self) -> dict[int, dict[int, float]]:
        out: dict[int, dict[int, float]] = {}
        for (s, a), v in zip(self.batch.pair_keys, self.pair_deviation):
            out.setdefault(int(s), {})[int(a)] = float(v)
        return out


def _pair_advantages(batch: Batch, advantages: Iterable[float] | None) -> np.ndarray:
    if advantages is None:
        return batch.pair_advantages()
    adv = np.asarray(advantages, dtype=np.float64).reshape(-1)
    if adv.size == batch.T:
        return batch.with_advantages(adv).pair_advantages()
    if adv.size == batch.pair_keys.shape[0]:
        return adv
    raise InputError("advantages must be given per token or per distinct pair")


def _unit_tv_state(n: np.ndarray, adv: np.ndarray) -> tuple[np.ndarray, float]:
    """Closed-form unit-TV maximizer at one state.

    Half the budget goes to the highest-advantage actions and half to the
    lowest. Among tied actions the split minimizing the squared deviation
    norm puts ``dev_a`` proportional to ``n_a``.
    """
    t_s = float(n.sum())
    hi, lo = float(adv.max()), float(adv.min())
    scale = 1e-12 * max(1.0, abs(hi), abs(lo))
    if n.size < 2 or hi - lo <= scale:
        return np.zeros(n.size), 0.0
    top = adv >= hi - scale
    bottom = adv <= lo + scale
    dev = np.zeros(n.size)
    dev[top] = 0.5 * t_s * n[top] / np.sum(n[top] ** 2)
    dev[bottom] = -0.5 * t_s * n[bottom] / np.sum(n[bottom] ** 2)
    value = float(np.sum(n * dev * adv))
    return dev, value


def unit_tv_maximizer(
    batch: Batch,
    advantages: Iterable[float] | None = None,
    gamma: float = 1.0,
    validate: bool = True,
) -> UnitTvSolution:
    """Solve every per-state unit-TV program.

    With ``validate`` the closed form is checked against
    :func:`lp_vertex_oracle` at every state with at most four actions.
    """
    adv = _pair_advantages(batch, advantages)
    n_all = batch.pair_counts.astype(np.float64)
    dev = np.zeros(adv.size)
    values: dict[int, float] = {}
    for pos, s in enumerate(batch.state_ids):
        idx = np.flatnonzero(batch.pair_state_index == pos)
        d, val = _unit_tv_state(n_all[idx], adv[idx])
        if validate and idx.size <= 4:
            best, _ = lp_vertex_oracle(n_all[idx], adv[idx])
            if abs(best - val) > 1e-9 * max(1.0, abs(best)):
                raise ArithmeticError(
                    f"closed-form unit-TV value {val} disagrees with vertex enumeration {best} at state {s}"
                )
        dev[idx] = d
        values[int(s)] = val
    mass = batch.discount_mass(gamma)
    per_state = np.array([values[int(s)] for s in batch.state_ids])
    aggregate = float(np.sum(mass / batch.state_counts * per_state) / mass.sum())
    dev.setflags(write=False)
    return UnitTvSolution(batch=batch, pair_deviation=dev, per_state_value=values, aggregate_value=aggregate)


def _adv_norm(batch: Batch, advantages: Iterable[float] | None) -> float:
    return float(np.max(np.abs(_pair_advantages(batch, advantages))))


def delta_apc(
    batch: Batch,
    gamma: float,
    advantages: Iterable[float] | None = None,
    form: str = "step",
) -> float:
    """Trust-region radius of the clipping objective.

    ``form="step"`` gives ``(1-gamma) tv_max / (8 gamma |A|_inf)``, which equals
    the TV-penalized step size; ``form="scaled"`` gives
    ``(1-gamma)**2 tv_max / (8 gamma |A|_inf T)``, where ``tv_max`` is the
    aggregate value of the unit-TV maximizer.
    """
    delta_trpo(gamma)  # validates gamma
    norm = _adv_norm(batch, advantages)
    if norm == 0.0 or gamma == 1.0:
        return 0.0
    m = unit_tv_maximizer(batch, advantages, gamma).aggregate_value
    if form == "step":
        return (1.0 - gamma) * m / (8.0 * gamma * norm)
    if form == "scaled":
        return (1.0 - gamma) ** 2 * m / (8.0 * gamma * norm * batch.T)
    raise ConfigError(f"form must be 'step' or 'scaled', got {form!r}")


def tv_trpo_maximizer(
    batch: Batch, gamma: float, advantages: Iterable[float] | None = None
) -> DeviationTuple:
    """Maximizer of the TV-penalized surrogate: the unit-TV solution scaled by
    the optimal step ``(1-gamma) tv_max / (8 gamma |A|_inf)``. Zero at gamma = 1."""
    step = delta_apc(batch, gamma, advantages, form="step")
    if step == 0.0:
        return DeviationTuple.from_pairs(batch, np.zeros(batch.pair_keys.shape[0]))
    sol = unit_tv_maximizer(batch, advantages, gamma)
    return DeviationTuple.from_pairs(batch, step * sol.pair_deviation)


# ---------------------------------------------------------------------------
# Surrogated objectives over deviations
# ---------------------------------------------------------------------------


def _pair_dev(batch: Batch, dev: DeviationTuple | Iterable[float]) -> np.ndarray:
    if isinstance(dev, DeviationTuple):
        return dev.pair_values
    v = np.asarray(dev, dtype=np.float64).reshape(-1)
    if v.size == batch.pair_keys.shape[0]:
        return v
    if v.size == batch.T:
        return DeviationTuple.from_tokens(batch, v).pair_values
    raise InputError("deviations must be given per token or per distinct pair")


def _pair_clip(batch: Batch, dev: np.ndarray, delta: float) -> np.ndarray:
    _, clipped = kernels.apc_clip(
        dev, batch.pair_counts.astype(np.float64), batch.pair_state_index, batch.state_counts, delta
    )
    return clipped


def correction_term(batch: Batch, dev: DeviationTuple | Iterable[float], delta: float) -> np.ndarray:
    """Per-state multiplicity-weighted mean of the clipped deviations."""
    v = _pair_clip(batch, _pair_dev(batch, dev), _check_delta(delta))
    n = batch.pair_counts.astype(np.float64)
    return np.bincount(batch.pair_state_index, weights=n * v, minlength=batch.state_ids.size) / batch.state_counts


def reduced_tv_trpo_objective(
    batch: Batch, dev: DeviationTuple | Iterable[float], gamma: float, advantages: Iterable[float] | None = None
) -> float:
    """Linear gain minus ``4 gamma |A|_inf / (1-gamma)^2`` times the squared
    largest per-state TV of the deviation (requires gamma < 1)."""
    if not (0.0 < gamma < 1.0):
        raise ConfigError("the penalized objective needs 0 < gamma < 1")
    d = _pair_dev(batch, dev)
    adv = _pair_advantages(batch, advantages)
    n = batch.pair_counts.astype(np.float64)
    w = state_weights(batch, gamma)[batch.pair_state_index]
    gain = float(np.sum(w * n * d * adv))
    tv = np.bincount(batch.pair_state_index, weights=n * np.abs(d), minlength=batch.state_ids.size) / batch.state_counts
    norm = float(np.max(np.abs(adv)))
    return gain - 4.0 * gamma * norm / (1.0 - gamma) ** 2 * float(tv.max()) ** 2


def surrogated_apc_objective(
    batch: Batch,
    dev: DeviationTuple | Iterable[float],
    delta: float,
    gamma: float = 1.0,
    advantages: Iterable[float] | None = None,
) -> float:
    """Clipping objective written over pair deviations, including the
    correction term that keeps it meaningful off the probability constraint."""
    d = _pair_dev(batch, dev)
    adv = _pair_advantages(batch, advantages)
    n = batch.pair_counts.astype(np.float64)
    v = _pair_clip(batch, d, _check_delta(delta))
    corr = np.bincount(batch.pair_state_index, weights=n * v, minlength=batch.state_ids.size) / batch.state_counts
    w = state_weights(batch, gamma)[batch.pair_state_index]
    return float(np.sum(w * (n * v * adv + n * (1.0 - corr[batch.pair_state_index]) * adv)))


def retract(batch: Batch, u: DeviationTuple | Iterable[float], delta: float, atol: float = 1e-9) -> DeviationTuple:
    """Clip each deviation to ``T_s (delta - TV_s(u)) + |u|`` and re-center
    per state. The result satisfies the probability constraint and has
    per-state TV at most ``delta``."""
    d = _pair_dev(batch, u)
    delta = _check_delta(delta)
    n = batch.pair_counts.astype(np.float64)
    resid = np.bincount(batch.pair_state_index, weights=n * d, minlength=batch.state_ids.size)
    scale = np.bincount(batch.pair_state_index, weights=n * np.abs(d), minlength=batch.state_ids.size)
    if np.any(np.abs(resid) > atol * np.maximum(1.0, scale)):
        raise InputError("deviation violates the per-state probability constraint")
    v = _pair_clip(batch, d, delta)
    corr = np.bincount(batch.pair_state_index, weights=n * v, minlength=batch.state_ids.size) / batch.state_counts
    return DeviationTuple.from_pairs(batch, v - corr[batch.pair_state_index])


def random_feasible_deviation(rng: np.random.Generator, batch: Batch, scale: float = 0.3) -> DeviationTuple:
    """Random pair deviations satisfying the probability constraint."""
    n = batch.pair_counts.astype(np.float64)
    raw = rng.normal(0.0, scale, size=n.size)
    mean = np.bincount(batch.pair_state_index, weights=n * raw, minlength=batch.state_ids.size) / batch.state_counts
    return DeviationTuple.from_pairs(batch, raw - mean[batch.pair_state_index])


# ---------------------------------------------------------------------------
# Equivalence harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EquivalenceBudget:
    """Search effort for the numerical maximizer."""

    grid_points: int = 161
    zoom_rounds: int = 60
    zoom_points: int = 15
    starts: int = 6
    seed: int = 0


@dataclass(frozen=True)
class EquivalenceReport:
    gamma: float
    delta_apc: float
    optimal_step: float
    max_abs_diff: float
    objective_gap: float
    numeric_deviation: dict[str, float] = field(default_factory=dict)
    closed_form_deviation: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "delta_apc": self.delta_apc,
            "optimal_step": self.optimal_step,
            "max_abs_diff": self.max_abs_diff,
            "objective_gap": self.objective_gap,
        }


def _state_value_batch(devs: np.ndarray, n: np.ndarray, adv: np.ndarray, t_s: float, delta: float) -> np.ndarray:
    """Per-state clipping objective (without the state weight) for each row of ``devs``."""
    absd = np.abs(devs)
    total = absd @ n
    bound = t_s * delta - total[:, None] + absd
    bp = np.maximum(bound, 0.0)
    v = np.clip(devs, -bp, bp)
    corr = (v @ n) / t_s
    return (v * n) @ adv + (1.0 - corr) * float(n @ adv)


def _maximize_state(
    n: np.ndarray, adv: np.ndarray, delta: float, budget: EquivalenceBudget, rng: np.random.Generator
) -> np.ndarray:
    m = n.size
    t_s = float(n.sum())
    if m == 1 or delta == 0.0:
        return np.zeros(m)
    basis = null_space(n[None, :])  # orthonormal, m x (m-1)
    dim = basis.shape[1]
    radius = 2.0 * delta * t_s / float(n.min())

    def f(y: np.ndarray) -> np.ndarray:
        return _state_value_batch(np.atleast_2d(y) @ basis.T, n, adv, t_s, delta)

    axes = [np.linspace(-radius, radius, budget.grid_points)] * dim
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dim)
    vals = f(grid)
    order = np.argsort(-vals, kind="stable")
    starts = [grid[i] for i in order[: budget.starts]]
    starts += [rng.uniform(-radius, radius, size=dim) for _ in range(budget.starts)]

    candidates = []
    for y0 in starts:
        y = np.array(y0, dtype=np.float64)
        half = 2.0 * radius / (budget.grid_points - 1)
        local_axes_base = np.linspace(-1.0, 1.0, budget.zoom_points)
        for _ in range(budget.zoom_rounds):
            offs = np.stack(np.meshgrid(*([local_axes_base] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
            pts = y + half * offs
            pv = f(pts)
            y = pts[int(np.argmax(pv))]
            half *= 0.5
            if half < 1e-15:
                break
        res = minimize(
            lambda z: -float(f(z)[0]),
            y,
            method="Nelder-Mead",
            options={"xatol": 1e-14, "fatol": 1e-16, "maxiter": 4000},
        )
        if -res.fun >= float(f(y)[0]):
            y = res.x
        candidates.append(y)
    cand = np.array(candidates)
    cv = f(cand)
    best = float(cv.max())
    tol = 1e-13 * max(1.0, abs(best))
    near = np.flatnonzero(cv >= best - tol)
    # Among equally good points prefer the smallest deviation norm.
    pick = near[int(np.argmin(np.linalg.norm(cand[near], axis=1)))]
    dev = basis @ cand[pick]
    # A state whose objective is flat has the zero deviation among its maximizers.
    if float(f(np.zeros(dim))[0]) >= best - tol and np.linalg.norm(dev) > 0:
        dev = np.zeros(m)
    return dev


def equivalence_check(
    batch: Batch,
    gamma: float,
    advantages: Iterable[float] | None = None,
    budget: EquivalenceBudget | None = None,
) -> EquivalenceReport:
    """Numerically maximize the surrogated clipping objective at radius
    :func:`delta_apc` and compare with :func:`tv_trpo_maximizer`."""
    budget = budget or EquivalenceBudget()
    rng = np.random.default_rng(budget.seed)
    adv = _pair_advantages(batch, advantages)
    step = delta_apc(batch, gamma, adv)
    star = tv_trpo_maximizer(batch, gamma, adv).pair_values
    n_all = batch.pair_counts.astype(np.float64)
    numeric = np.zeros(star.size)
    for pos in range(batch.state_ids.size):
        idx = np.flatnonzero(batch.pair_state_index == pos)
        numeric[idx] = _maximize_state(n_all[idx], adv[idx], step, budget, rng)
    j_num = surrogated_apc_objective(batch, numeric, step, gamma, adv)
    j_star = surrogated_apc_objective(batch, star, step, gamma, adv)
    keys = [f"{int(s)}:{int(a)}" for s, a in batch.pair_keys]
    return EquivalenceReport(
        gamma=float(gamma),
        delta_apc=float(step),
        optimal_step=float(step),
        max_abs_diff=float(np.max(np.abs(numeric - star))) if star.size else 0.0,
        objective_gap=float(j_num - j_star),
        numeric_deviation=dict(zip(keys, map(float, numeric))),
        closed_form_deviation=dict(zip(keys, map(float, star))),
    )
