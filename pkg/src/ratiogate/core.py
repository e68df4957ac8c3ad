"""Finite tabular data model: state-action spaces, softmax policies, sampled
batches of augmented tokens, importance ratios, hyperparameters, and a central
finite-difference gradient engine.

All containers are immutable after construction. Arrays exposed as attributes
are marked read-only so that sharing them between objects is safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, InputError, NonFiniteError, StructuralError

__all__ = [
    "StateActionSpace",
    "PolicyTable",
    "Token",
    "Batch",
    "RatioTuple",
    "GatingConfig",
    "softmax_policy",
    "compute_ratios",
    "ratio_jacobian_wrt_logits",
    "finite_diff_gradient",
    "as_ratio_array",
    "random_policy",
    "perturbed_policy",
    "sample_batch",
    "center_advantages",
]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# State-action space and policies
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StateActionSpace:
    """Dense finite state-action space.

    States are ``0 .. n_states-1`` and the actions of state ``s`` are
    ``0 .. actions_per_state[s]-1``.
    """

    actions_per_state: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.actions_per_state)
        if not counts:
            raise InputError("a state-action space needs at least one state")
        if any(c < 1 for c in counts):
            raise InputError("every state must have at least one action")
        object.__setattr__(self, "actions_per_state", counts)

    @property
    def states(self) -> list[int]:
        return list(range(len(self.actions_per_state)))

    @property
    def n_states(self) -> int:
        return len(self.actions_per_state)

    @property
    def n_logits(self) -> int:
        return int(sum(self.actions_per_state))

    @property
    def offsets(self) -> np.ndarray:
        """Start of each state's block inside the flat logit vector."""
        return np.concatenate([[0], np.cumsum(self.actions_per_state)[:-1]]).astype(np.int64)

    def actions(self, state: int) -> list[int]:
        return list(range(self.actions_per_state[state]))

    def flat_index(self, state: int, action: int) -> int:
        if not 0 <= state < self.n_states:
            raise StructuralError(f"unknown state {state}")
        if not 0 <= action < self.actions_per_state[state]:
            raise StructuralError(f"unknown action {action} at state {state}")
        return int(self.offsets[state] + action)


@dataclass(frozen=True, eq=False)
class PolicyTable:
    """Softmax policy over a finite state-action space, stored by its logits."""

    space: StateActionSpace
    logits: tuple[np.ndarray, ...]
    probs: tuple[np.ndarray, ...] = field(repr=False)

    def prob(self, state: int, action: int) -> float:
        self.space.flat_index(state, action)
        return float(self.probs[state][action])

    def flat_logits(self) -> np.ndarray:
        return np.concatenate(self.logits)

    def flat_probs(self) -> np.ndarray:
        return np.concatenate(self.probs)

    def with_flat_logits(self, flat: np.ndarray) -> "PolicyTable":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.space.n_logits,):
            raise InputError(f"expected {self.space.n_logits} logits, got shape {flat.shape}")
        parts = np.split(flat, np.cumsum(self.space.actions_per_state)[:-1])
        return softmax_policy(parts)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def softmax_policy(logits: Sequence[Sequence[float]] | Mapping[int, Sequence[float]]) -> PolicyTable:
    """Build a policy from per-state logit vectors.

    ``logits`` is either a sequence indexed by state or a mapping whose keys are
    exactly ``0 .. n_states-1``. Probabilities use max-subtraction before
    exponentiation.
    """
    if isinstance(logits, Mapping):
        keys = sorted(logits)
        if keys != list(range(len(keys))):
            raise InputError("state ids must be dense integers starting at 0")
        rows = [logits[k] for k in keys]
    else:
        rows = list(logits)
    arrays = []
    for s, row in enumerate(rows):
        z = np.asarray(row, dtype=np.float64).reshape(-1)
        if z.size == 0:
            raise InputError(f"state {s} has no actions")
        if not np.all(np.isfinite(z)):
            raise InputError(f"non-finite logit at state {s}")
        arrays.append(_frozen(z))
    space = StateActionSpace(tuple(len(z) for z in arrays))
    probs = tuple(_frozen(_softmax(z)) for z in arrays)
    return PolicyTable(space=space, logits=tuple(arrays), probs=probs)


# ---------------------------------------------------------------------------
# Tokens and batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    """One sampled augmented state-action pair."""

    state: int
    action: int
    trajectory: int
    timestep: int
    advantage: float


class Batch:
    """Ordered collection of sampled tokens with the counts derived from them.

    Dense helper indices are provided for vectorized code: ``state_index`` maps
    each token to a position in ``state_ids``, ``pair_index`` to a position in
    ``pair_keys`` and ``traj_index`` to a position in ``traj_ids``.
    """

    def __init__(
        self,
        states: Iterable[int],
        actions: Iterable[int],
        trajectories: Iterable[int],
        timesteps: Iterable[int],
        advantages: Iterable[float],
    ) -> None:
        s = np.asarray(list(states), dtype=np.int64)
        a = np.asarray(list(actions), dtype=np.int64)
        tr = np.asarray(list(trajectories), dtype=np.int64)
        ts = np.asarray(list(timesteps), dtype=np.int64)
        adv = np.asarray(list(advantages), dtype=np.float64)
        n = s.size
        if n == 0:
            raise InputError("a batch needs at least one token")
        if not (a.size == tr.size == ts.size == adv.size == n):
            raise InputError("token field arrays must have equal length")
        if np.any(s < 0) or np.any(a < 0):
            raise InputError("state and action ids must be non-negative")
        if np.any(ts < 0):
            raise InputError("timesteps must be non-negative")
        if not np.all(np.isfinite(adv)):
            raise InputError("advantages must be finite")

        traj_ids, traj_index, traj_lengths = np.unique(tr, return_inverse=True, return_counts=True)
        keys = np.stack([tr, ts], axis=1)
        if np.unique(keys, axis=0).shape[0] != n:
            raise InputError("(trajectory, timestep) pairs must be unique within a batch")
        if np.any(ts >= traj_lengths[traj_index]):
            raise InputError("each timestep must be smaller than its trajectory length")

        state_ids, state_index, state_counts = np.unique(s, return_inverse=True, return_counts=True)
        pair_keys, pair_index, pair_counts = np.unique(
            np.stack([s, a], axis=1), axis=0, return_inverse=True, return_counts=True
        )
        pair_index = pair_index.reshape(-1)
        pair_state_index = np.searchsorted(state_ids, pair_keys[:, 0])

        self.states = _frozen(s)
        self.actions = _frozen(a)
        self.trajectories = _frozen(tr)
        self.timesteps = _frozen(ts)
        self.advantages = _frozen(adv)
        self.state_ids = _frozen(state_ids)
        self.state_index = _frozen(state_index.reshape(-1))
        self.state_counts = _frozen(state_counts)
        self.pair_keys = _frozen(pair_keys)
        self.pair_index = _frozen(pair_index)
        self.pair_counts = _frozen(pair_counts)
        self.pair_state_index = _frozen(pair_state_index)
        self.traj_ids = _frozen(traj_ids)
        self.traj_index = _frozen(traj_index.reshape(-1))
        self.traj_lengths = _frozen(traj_lengths)

    # -- constructors -----------------------------------------------------
    @classmethod
    def from_tokens(cls, tokens: Iterable[Token | Sequence[float]]) -> "Batch":
        rows = []
        for t in tokens:
            if isinstance(t, Token):
                rows.append((t.state, t.action, t.trajectory, t.timestep, t.advantage))
            else:
                if len(t) != 5:
                    raise InputError("token rows are [state, action, trajectory, timestep, advantage]")
                rows.append(tuple(t))
        if not rows:
            raise InputError("a batch needs at least one token")
        for r in rows:
            for v in r[:4]:
                if float(v) != int(v):
                    raise InputError("ids and timesteps must be integers")
        cols = list(zip(*rows))
        return cls(
            [int(v) for v in cols[0]],
            [int(v) for v in cols[1]],
            [int(v) for v in cols[2]],
            [int(v) for v in cols[3]],
            [float(v) for v in cols[4]],
        )

    def with_advantages(self, advantages: Iterable[float]) -> "Batch":
        return Batch(self.states, self.actions, self.trajectories, self.timesteps, advantages)

    # -- counts -----------------------------------------------------------
    @property
    def T(self) -> int:
        """Total token count."""
        return int(self.states.size)

    def __len__(self) -> int:
        return self.T

    @property
    def n_trajectories(self) -> int:
        return int(self.traj_ids.size)

    @property
    def tokens(self) -> list[Token]:
        return [
            Token(int(s), int(a), int(tr), int(ts), float(adv))
            for s, a, tr, ts, adv in zip(
                self.states, self.actions, self.trajectories, self.timesteps, self.advantages
            )
        ]

    @property
    def trajectory_lengths(self) -> dict[int, int]:
        return {int(k): int(v) for k, v in zip(self.traj_ids, self.traj_lengths)}

    @property
    def token_traj_length(self) -> np.ndarray:
        """Length of the trajectory containing each token."""
        return self.traj_lengths[self.traj_index]

    @property
    def token_state_count(self) -> np.ndarray:
        """``T_s`` of the state of each token."""
        return self.state_counts[self.state_index]

    def state_position(self, state: int) -> int:
        pos = int(np.searchsorted(self.state_ids, state))
        if pos >= self.state_ids.size or self.state_ids[pos] != state:
            raise StructuralError(f"state {state} does not occur in the batch")
        return pos

    def traj_position(self, trajectory: int) -> int:
        pos = int(np.searchsorted(self.traj_ids, trajectory))
        if pos >= self.traj_ids.size or self.traj_ids[pos] != trajectory:
            raise StructuralError(f"trajectory {trajectory} does not occur in the batch")
        return pos

    def state_count(self, state: int) -> int:
        return int(self.state_counts[self.state_position(state)])

    def multiplicity(self, state: int, action: int) -> int:
        mask = (self.pair_keys[:, 0] == state) & (self.pair_keys[:, 1] == action)
        return int(self.pair_counts[mask].sum())

    def pair_advantages(self) -> np.ndarray:
        """Mean token advantage of each distinct (s, a) pair."""
        sums = np.bincount(self.pair_index, weights=self.advantages, minlength=self.pair_keys.shape[0])
        return sums / self.pair_counts

    def discount_mass(self, gamma: float) -> np.ndarray:
        """Discounted visitation mass of each observed state: sum of gamma**t."""
        w = np.power(float(gamma), self.timesteps.astype(np.float64))
        return np.bincount(self.state_index, weights=w, minlength=self.state_ids.size)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "tokens": [
                [int(s), int(a), int(tr), int(ts), float(adv)]
                for s, a, tr, ts, adv in zip(
                    self.states, self.actions, self.trajectories, self.timesteps, self.advantages
                )
            ]
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "Batch":
        if "tokens" not in data:
            raise InputError("batch JSON must contain a 'tokens' array")
        return cls.from_tokens(data["tokens"])

    def __repr__(self) -> str:
        return (
            f"Batch(T={self.T}, trajectories={self.n_trajectories}, "
            f"states={self.state_ids.size}, pairs={self.pair_keys.shape[0]})"
        )


def policy_to_dict(policy: PolicyTable) -> dict:
    return {"logits": [[float(v) for v in z] for z in policy.logits]}


def policy_from_dict(data: Mapping) -> PolicyTable:
    if "logits" not in data:
        raise InputError("policy JSON must contain a 'logits' array")
    return softmax_policy(data["logits"])


# ---------------------------------------------------------------------------
# Ratios
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RatioTuple:
    """Per-token importance ratios together with their logarithms."""

    values: np.ndarray
    log_values: np.ndarray = field(repr=False)

    @classmethod
    def from_values(
        cls, values: Iterable[float], batch: Batch | None = None, check_consistency: bool = True
    ) -> "RatioTuple":
        r = np.asarray(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
        r = r.reshape(-1)
        if not np.all(np.isfinite(r)) or np.any(r <= 0.0):
            raise InputError("ratios must be finite and strictly positive")
        if batch is not None:
            if r.size != batch.T:
                raise InputError(f"expected {batch.T} ratios, got {r.size}")
            if check_consistency:
                first = np.full(batch.pair_keys.shape[0], np.nan)
                first[batch.pair_index[::-1]] = r[::-1]
                if np.any(first[batch.pair_index] != r):
                    raise InputError("tokens sharing a state-action pair must share the ratio")
        return cls(values=_frozen(r), log_values=_frozen(np.log(r)))

    @classmethod
    def ones(cls, batch: Batch) -> "RatioTuple":
        return cls.from_values(np.ones(batch.T), batch)

    def __len__(self) -> int:
        return int(self.values.size)


def as_ratio_array(ratios: RatioTuple | Iterable[float]) -> np.ndarray:
    """Return ratios as a float array, validating positivity."""
    if isinstance(ratios, RatioTuple):
        return ratios.values
    r = np.asarray(ratios, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(r)) or np.any(r <= 0.0):
        raise InputError("ratios must be finite and strictly positive")
    return r


def _token_probs(policy: PolicyTable, batch: Batch) -> np.ndarray:
    out = np.empty(batch.T)
    n_states = policy.space.n_states
    for j, (s, a) in enumerate(zip(batch.states, batch.actions)):
        if s >= n_states or a >= policy.space.actions_per_state[s]:
            raise StructuralError(f"policy has no entry for state {s}, action {a}")
        out[j] = policy.probs[s][a]
    return out


def compute_ratios(new: PolicyTable, old: PolicyTable, batch: Batch) -> RatioTuple:
    """Importance ratios ``pi_new(a|s) / pi_old(a|s)`` for every token."""
    r = _token_probs(new, batch) / _token_probs(old, batch)
    return RatioTuple.from_values(r, batch, check_consistency=False)


def ratio_jacobian_wrt_logits(
    ratios: RatioTuple | Iterable[float],
    new: PolicyTable,
    batch: Batch,
    columns: str = "tokens",
) -> np.ndarray:
    """Derivatives of token ratios with respect to the new policy's logits.

    With ``columns="tokens"`` the result is the token-by-token matrix whose
    entry ``(j, k)`` is ``r_j (1[pair_j = pair_k] - pi_new(a_k|s_k))`` for
    tokens at the same state and zero otherwise. With ``columns="logits"`` the
    columns are the flat logit coordinates of ``new`` instead, which is the
    form that can be compared with finite differences directly.
    """
    r = as_ratio_array(ratios)
    if r.size != batch.T:
        raise InputError(f"expected {batch.T} ratios, got {r.size}")
    probs = _token_probs(new, batch)
    if columns == "tokens":
        same_state = batch.states[:, None] == batch.states[None, :]
        same_pair = batch.pair_index[:, None] == batch.pair_index[None, :]
        return np.where(same_state, r[:, None] * (same_pair - probs[None, :]), 0.0)
    if columns == "logits":
        space = new.space
        out = np.zeros((batch.T, space.n_logits))
        offsets = space.offsets
        for j, (s, a) in enumerate(zip(batch.states, batch.actions)):
            lo = offsets[s]
            hi = lo + space.actions_per_state[s]
            out[j, lo:hi] = -r[j] * new.probs[s]
            out[j, lo + a] += r[j]
        return out
    raise InputError(f"columns must be 'tokens' or 'logits', got {columns!r}")


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def finite_diff_gradient(
    objective: Callable[[np.ndarray], float], logits: Iterable[float], step: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of ``objective`` at ``logits``."""
    if not step > 0.0:
        raise InputError("step must be positive")
    z = np.array(logits, dtype=np.float64).reshape(-1)
    grad = np.empty_like(z)
    for i in range(z.size):
        orig = z[i]
        z[i] = orig + step
        f_plus = float(objective(z))
        z[i] = orig - step
        f_minus = float(objective(z))
        z[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NonFiniteError(f"objective is not finite near coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


# ---------------------------------------------------------------------------
# Hyperparameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GatingConfig:
    """Hyperparameters shared by the gated objectives.

    ``delta`` defaults to ``c_plus + c_minus``; when given explicitly it must
    equal that sum. ``rollback_slope`` overrides the slope argument of the
    aggregate gate, which otherwise equals the relevant token count.
    ``level_budgets`` optionally holds ``((c_plus, c_minus), ...)`` for the
    domain, group and trajectory levels of the hierarchical objective.
    """

    c_plus: float = 0.12
    c_minus: float = 0.05
    epsilon: float = 0.04
    delta: float | None = None
    gamma: float = 1.0
    eps_ppo: float = 0.2
    eps_gspo: float = 4e-4
    rollback_slope: int | None = None
    level_budgets: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self) -> None:
        for name in ("c_plus", "c_minus", "epsilon", "eps_ppo", "eps_gspo"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {v!r}")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma!r}")
        total = float(self.c_plus) + float(self.c_minus)
        if self.delta is None:
            object.__setattr__(self, "delta", total)
        elif abs(float(self.delta) - total) > 1e-12:
            raise ConfigError(f"c_plus + c_minus = {total} must equal delta = {self.delta}")
        if self.rollback_slope is not None and (int(self.rollback_slope) != self.rollback_slope or self.rollback_slope < 1):
            raise ConfigError("rollback_slope must be a positive integer")
        if self.level_budgets is not None:
            lb = tuple((float(p), float(m)) for p, m in self.level_budgets)
            if len(lb) != 3 or any(not (p > 0 and m > 0) for p, m in lb):
                raise ConfigError("level_budgets needs three positive (c_plus, c_minus) pairs")
            object.__setattr__(self, "level_budgets", lb)

    def budgets(self, level: int | None = None) -> tuple[float, float]:
        """(c_plus, c_minus) for a hierarchy level (0 domain, 1 group, 2 trajectory)."""
        if level is None or self.level_budgets is None:
            return float(self.c_plus), float(self.c_minus)
        return self.level_budgets[level]

    def to_dict(self) -> dict:
        return {
            "c_plus": self.c_plus,
            "c_minus": self.c_minus,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "gamma": self.gamma,
            "eps_ppo": self.eps_ppo,
            "eps_gspo": self.eps_gspo,
            "rollback_slope": self.rollback_slope,
            "level_budgets": [list(p) for p in self.level_budgets] if self.level_budgets else None,
        }


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


def random_policy(rng: np.random.Generator, actions_per_state: Sequence[int], scale: float = 1.0) -> PolicyTable:
    """Policy with i.i.d. normal logits of standard deviation ``scale``."""
    return softmax_policy([rng.normal(0.0, scale, size=int(k)) for k in actions_per_state])


def perturbed_policy(rng: np.random.Generator, policy: PolicyTable, scale: float) -> PolicyTable:
    """Copy of ``policy`` whose logits receive i.i.d. normal noise."""
    z = policy.flat_logits()
    return policy.with_flat_logits(z + rng.normal(0.0, scale, size=z.size))


def sample_batch(
    rng: np.random.Generator,
    policy: PolicyTable,
    lengths: Sequence[int],
    center: bool = True,
    advantage_scale: float = 1.0,
) -> Batch:
    """Sample one trajectory per entry of ``lengths`` from ``policy``.

    States are visited uniformly at random and actions drawn from the policy.
    Advantages are drawn per distinct state-action pair, so tokens sharing a
    pair share the advantage, and are centered per state when ``center``.
    """
    n_states = policy.space.n_states
    states, actions, trajs, steps = [], [], [], []
    for tau, length in enumerate(lengths):
        if int(length) < 1:
            raise InputError("trajectory lengths must be positive")
        for t in range(int(length)):
            s = int(rng.integers(n_states))
            a = int(rng.choice(policy.space.actions_per_state[s], p=policy.probs[s]))
            states.append(s)
            actions.append(a)
            trajs.append(tau)
            steps.append(t)
    n_pairs_max = policy.space.n_logits
    table = rng.normal(0.0, advantage_scale, size=n_pairs_max)
    offsets = policy.space.offsets
    adv = [float(table[offsets[s] + a]) for s, a in zip(states, actions)]
    batch = Batch(states, actions, trajs, steps, adv)
    return center_advantages(batch) if center else batch


def center_advantages(batch: Batch) -> Batch:
    """Replace advantages by per-pair means shifted so that each state's
    multiplicity-weighted advantage sum is zero."""
    pair_adv = batch.pair_advantages()
    n = batch.pair_counts.astype(np.float64)
    state_sum = np.bincount(batch.pair_state_index, weights=n * pair_adv, minlength=batch.state_ids.size)
    pair_adv = pair_adv - (state_sum / batch.state_counts)[batch.pair_state_index]
    return batch.with_advantages(pair_adv[batch.pair_index])
