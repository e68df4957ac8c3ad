"""Shared helpers and hypothesis strategies."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from ratiogate.core import Batch, random_policy, sample_batch

settings.register_profile(
    "default",
    max_examples=60,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

seeds = st.integers(min_value=0, max_value=2**32 - 1)


def single_state_batch(counts, advantages, state: int = 0) -> Batch:
    """One state; action ``a`` sampled ``counts[a]`` times, each with advantage ``advantages[a]``.

    Every token is its own trajectory of length one.
    """
    rows = []
    tid = 0
    for a, (n, adv) in enumerate(zip(counts, advantages)):
        for _ in range(int(n)):
            rows.append([state, a, tid, 0, float(adv)])
            tid += 1
    return Batch.from_tokens(rows)


def trajectory_batch(lengths, advantages=None) -> Batch:
    """Trajectories of the given lengths, one distinct state per token."""
    rows = []
    k = 0
    for tid, n in enumerate(lengths):
        for t in range(n):
            adv = 1.0 if advantages is None else float(advantages[k])
            rows.append([k, 0, tid, t, adv])
            k += 1
    return Batch.from_tokens(rows)


def random_instance(seed: int, states=(2, 5), actions=(2, 4), n_traj=(1, 4), length=(1, 6)):
    """(rng, old policy, batch) drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    n_s = int(rng.integers(states[0], states[1] + 1))
    pol = random_policy(rng, [int(rng.integers(actions[0], actions[1] + 1)) for _ in range(n_s)])
    lengths = [int(rng.integers(length[0], length[1] + 1)) for _ in range(int(rng.integers(n_traj[0], n_traj[1] + 1)))]
    return rng, pol, sample_batch(rng, pol, lengths)


def log_ratio_batch(seed: int, scale: float, n_traj=(1, 4), length=(1, 10)):
    """(batch, ratios) with i.i.d. normal log-ratios of the given scale."""
    rng = np.random.default_rng(seed)
    lengths = [int(rng.integers(length[0], length[1] + 1)) for _ in range(int(rng.integers(n_traj[0], n_traj[1] + 1)))]
    batch = trajectory_batch(lengths, rng.normal(size=sum(lengths)))
    return batch, np.exp(rng.normal(0.0, scale, size=batch.T))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance PASS/FAIL lines collected during the run."""
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.SUMMARY:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(mod.SUMMARY):
        terminalreporter.write_line(mod.SUMMARY[number])
