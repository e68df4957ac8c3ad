import json
import math
from collections import defaultdict

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ratiogate.core import Batch, compute_ratios, perturbed_policy
from ratiogate.divergence import (
    avg_kl,
    avg_tv,
    divergence_report,
    exact_kl,
    exact_tv,
    max_tv,
    per_state_kl,
    per_state_tv,
    pinsker_gap,
    traj_kl,
    traj_tv,
    traj_tv_all,
)
from ratiogate.errors import InputError, StructuralError

from conftest import random_instance, seeds, single_state_batch, trajectory_batch


def _oracle_state_tv(batch: Batch, r: np.ndarray) -> dict[int, float]:
    """Per-state TV grouped through pair multiplicities, written with plain loops."""
    pair_r: dict[tuple[int, int], float] = {}
    n: dict[tuple[int, int], int] = defaultdict(int)
    for tok, ri in zip(batch.tokens, r):
        pair_r[(tok.state, tok.action)] = ri
        n[(tok.state, tok.action)] += 1
    t_s: dict[int, int] = defaultdict(int)
    acc: dict[int, float] = defaultdict(float)
    for (s, a), cnt in n.items():
        t_s[s] += cnt
        acc[s] += cnt * abs(pair_r[(s, a)] - 1.0)
    return {s: acc[s] / t_s[s] for s in acc}


def _perturbed(seed: int):
    rng, pol, b = random_instance(seed, n_traj=(1, 5), length=(1, 8))
    return b, compute_ratios(perturbed_policy(rng, pol, 0.5), pol, b).values


class TestPerState:
    def test_on_policy(self):
        b = single_state_batch([1, 1, 1], [0, 0, 0])
        assert per_state_tv(b, np.ones(3), 0) == 0.0
        assert per_state_kl(b, np.ones(3), 0) == 0.0

    def test_three_actions(self):
        b = single_state_batch([1, 1, 1], [0, 0, 0])
        assert per_state_tv(b, [1.2, 0.9, 0.95], 0) == pytest.approx(0.35 / 3, abs=1e-15)
        expected = -(math.log(1.2) + math.log(0.9) + math.log(0.95)) / 3
        assert per_state_kl(b, [1.2, 0.9, 0.95], 0) == pytest.approx(expected, abs=1e-15)
        assert expected == pytest.approx(-0.0085559156, abs=1e-10)

    def test_multiplicity_weighting(self):
        b = single_state_batch([2, 1], [0, 0])
        assert per_state_tv(b, [1.2, 1.2, 0.9], 0) == pytest.approx(0.5 / 3, abs=1e-15)

    def test_symmetric_kl_cancels(self):
        b = single_state_batch([1, 1], [0, 0])
        assert abs(per_state_kl(b, [math.exp(0.3), math.exp(-0.3)], 0)) <= 1e-16

    def test_unknown_state(self):
        b = single_state_batch([1], [0])
        with pytest.raises(StructuralError):
            per_state_tv(b, [1.0], 4)

    def test_wrong_length(self):
        b = single_state_batch([1, 1], [0, 0])
        with pytest.raises(InputError):
            avg_tv(b, [1.0])

    @given(seeds)
    def test_matches_loop_oracle(self, seed):
        b, r = _perturbed(seed)
        oracle = _oracle_state_tv(b, r)
        for s, v in oracle.items():
            assert per_state_tv(b, r, s) == pytest.approx(v, rel=1e-13, abs=1e-15)


class TestAggregates:
    def test_two_states(self):
        # state 0: one token with |r-1| = 0.1; state 1: three tokens with mean 0.3
        b = Batch.from_tokens([[0, 0, 0, 0, 0.0], [1, 0, 1, 0, 0.0], [1, 0, 2, 0, 0.0], [1, 0, 3, 0, 0.0]])
        r = [1.1, 1.3, 1.3, 1.3]
        assert avg_tv(b, r) == pytest.approx(0.25, abs=1e-15)
        assert max_tv(b, r) == pytest.approx(0.3, abs=1e-15)

    def test_single_state_average(self):
        b = single_state_batch([2, 1], [0, 0])
        r = [1.2, 1.2, 0.7]
        assert avg_tv(b, r) == pytest.approx(per_state_tv(b, r, 0), abs=1e-16)

    @given(seeds)
    def test_grouped_and_flat_forms_agree(self, seed):
        b, r = _perturbed(seed)
        oracle = _oracle_state_tv(b, r)
        grouped = sum(b.state_count(s) / b.T * v for s, v in oracle.items())
        assert abs(avg_tv(b, r) - grouped) <= 1e-14

    @given(seeds)
    def test_trajectory_recovery(self, seed):
        b, r = _perturbed(seed)
        recovered = float(np.sum(b.traj_lengths * traj_tv_all(b, r))) / b.T
        assert abs(recovered - avg_tv(b, r)) <= 1e-12

    @given(seeds)
    def test_max_is_max_of_states(self, seed):
        b, r = _perturbed(seed)
        assert max_tv(b, r) == max(per_state_tv(b, r, int(s)) for s in b.state_ids)

    def test_avg_kl_on_policy(self):
        b = single_state_batch([3], [0])
        assert avg_kl(b, np.ones(3)) == 0.0


class TestTrajectory:
    def test_kl_sign(self):
        b = trajectory_batch([3])
        r = np.exp([0.1, -0.05, 0.15])
        assert traj_kl(b, r, 0) == pytest.approx(-0.2 / 3, abs=1e-15)

    def test_tv(self):
        b = trajectory_batch([2])
        assert traj_tv(b, [1.1, 0.95], 0) == pytest.approx(0.075, abs=1e-15)

    def test_on_policy(self):
        b = trajectory_batch([4, 2])
        assert traj_tv(b, np.ones(6), 1) == 0.0
        assert traj_kl(b, np.ones(6), 1) == 0.0

    def test_unknown_trajectory(self):
        with pytest.raises(StructuralError):
            traj_tv(trajectory_batch([2]), [1.0, 1.0], 3)


class TestReport:
    @given(seeds)
    def test_invariants(self, seed):
        b, r = _perturbed(seed)
        rep = divergence_report(b, r)
        assert all(v >= 0 for v in rep.per_state_tv.values())
        assert all(v >= 0 for v in rep.traj_tv.values())
        assert rep.max_tv == max(rep.per_state_tv.values())

    def test_json_key_order_stable(self):
        b, r = _perturbed(4)
        a = json.dumps(divergence_report(b, r).to_dict(), sort_keys=True)
        c = json.dumps(divergence_report(b, r).to_dict(), sort_keys=True)
        assert a == c
        assert list(divergence_report(b, r).to_dict()) == [
            "per_state_tv",
            "per_state_kl",
            "avg_tv",
            "avg_kl",
            "max_tv",
            "traj_tv",
            "traj_kl",
        ]


class TestExact:
    def test_two_point_example(self):
        tv = exact_tv([0.5, 0.5], [0.6, 0.4])
        kl = exact_kl([0.5, 0.5], [0.6, 0.4])
        assert tv == pytest.approx(0.1, abs=1e-15)
        assert kl == pytest.approx(0.5 * math.log(0.5 / 0.6) + 0.5 * math.log(0.5 / 0.4), abs=1e-15)
        assert pinsker_gap(tv, kl) > 0

    def test_identical(self):
        assert pinsker_gap(exact_tv([0.3, 0.7], [0.3, 0.7]), exact_kl([0.3, 0.7], [0.3, 0.7])) == 0.0
        assert pinsker_gap(0.0, 0.0) == 0.0

    def test_zero_in_new_support(self):
        assert exact_kl([0.5, 0.5], [1.0, 0.0]) == math.inf

    @pytest.mark.parametrize("p", [[0.5, 0.6], [-0.1, 1.1], [], [float("nan"), 1.0]])
    def test_invalid(self, p):
        with pytest.raises(InputError):
            exact_tv(p, [0.5, 0.5])

    def test_support_mismatch(self):
        with pytest.raises(InputError):
            exact_kl([1.0], [0.5, 0.5])

    @given(seeds)
    def test_pinsker_three_actions(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(20):
            p, q = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
            assert exact_tv(p, q) ** 2 <= exact_kl(p, q) / 2 + 1e-15

    @given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
    def test_pinsker_two_point(self, a, b):
        p, q = [a, 1 - a], [b, 1 - b]
        assert pinsker_gap(exact_tv(p, q), exact_kl(p, q)) >= -1e-15
