import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ratiogate.checks import check_gspo_bound
from ratiogate.errors import ConfigError, InputError
from ratiogate.rgf import (
    RgfSpec,
    delta_trpo,
    eval_rgf,
    gate_gspo,
    gate_grpo,
    gate_ppo,
    grpo_spec,
    gspo_aggregate,
    gspo_aggregates,
    gspo_spec,
    identity_gate,
    ppo_spec,
    token_weights,
    trajectory_weights,
)

from conftest import log_ratio_batch, seeds, trajectory_batch

ratios_st = st.floats(0.05, 5.0)


class TestEvalRgf:
    def test_identity_on_policy(self):
        b = trajectory_batch([2, 3], [0.5, -1.0, 2.0, 0.1, 0.3])
        spec = RgfSpec(trajectory_weights(b), identity_gate, "id")
        expected = float(np.sum(trajectory_weights(b) * b.advantages))
        assert eval_rgf(spec, b, np.ones(5)) == pytest.approx(expected, abs=1e-15)

    @given(seeds)
    def test_identity_is_linear_surrogate(self, seed):
        b, r = log_ratio_batch(seed, 0.3)
        spec = RgfSpec(token_weights(b), identity_gate, "id")
        assert eval_rgf(spec, b, r) == pytest.approx(float(np.mean(r * b.advantages)), rel=1e-12, abs=1e-15)

    def test_ppo_single_token(self):
        b = trajectory_batch([1], [1.0])
        assert eval_rgf(ppo_spec(b, 0.2), b, [1.5]) == pytest.approx(1.2, abs=1e-15)

    def test_bad_gate_output_names_token(self):
        b = trajectory_batch([2, 1])
        spec = RgfSpec(token_weights(b), lambda bb, r: np.array([1.0, 1.0, -1.0]), "broken")
        with pytest.raises(InputError, match="token 2"):
            eval_rgf(spec, b, np.ones(3))
        spec = RgfSpec(token_weights(b), lambda bb, r: np.array([1.0, np.nan, 1.0]), "broken")
        with pytest.raises(InputError, match="token 1"):
            eval_rgf(spec, b, np.ones(3))

    def test_shape_checks(self):
        b = trajectory_batch([2])
        with pytest.raises(InputError):
            eval_rgf(RgfSpec(np.ones(3), identity_gate, "x"), b, np.ones(2))
        with pytest.raises(InputError):
            eval_rgf(RgfSpec(np.ones(2), lambda bb, r: np.ones(3), "x"), b, np.ones(2))
        with pytest.raises(InputError):
            eval_rgf(RgfSpec(np.ones(2), identity_gate, "x"), b, np.ones(3))


class TestPpoGate:
    def test_examples(self):
        assert gate_ppo([1.0], 0.2)[0] == 1.0
        assert gate_ppo([0.7], 0.2)[0] == pytest.approx(0.8)
        assert gate_ppo([1.5], 0.2, advantages=[-1.0], sign_gated=True)[0] == 1.5

    def test_sign_gated_positive_advantage(self):
        assert gate_ppo([1.5], 0.2, advantages=[1.0], sign_gated=True)[0] == pytest.approx(1.2)
        assert gate_ppo([0.5], 0.2, advantages=[1.0], sign_gated=True)[0] == 0.5

    def test_sign_gated_needs_advantages(self):
        with pytest.raises(InputError):
            gate_ppo([1.0], 0.2, sign_gated=True)
        with pytest.raises(InputError):
            gate_ppo([1.0, 1.0], 0.2, advantages=[1.0], sign_gated=True)

    @pytest.mark.parametrize("eps", [0.0, 1.0, -0.1])
    def test_bad_eps(self, eps):
        with pytest.raises(ConfigError):
            gate_ppo([1.0], eps)

    @given(ratios_st, ratios_st, st.floats(0.01, 0.9))
    def test_monotone(self, a, b, eps):
        lo, hi = sorted((a, b))
        g = gate_ppo([lo, hi], eps)
        assert g[0] <= g[1]

    @given(ratios_st, st.floats(0.01, 0.9))
    def test_flat_outside_band(self, r, eps):
        g = gate_ppo([r], eps)[0]
        if r >= 1 + eps:
            assert g == 1 + eps
        elif r <= 1 - eps:
            assert g == 1 - eps
        else:
            assert g == r

    def test_grpo_is_same_map(self):
        r = np.array([0.5, 0.9, 1.0, 1.3])
        np.testing.assert_array_equal(gate_grpo(r, 0.2), gate_ppo(r, 0.2))


class TestWeights:
    def test_trajectory_weights_example(self):
        b = trajectory_batch([2, 3])
        np.testing.assert_allclose(trajectory_weights(b), [1 / 4, 1 / 4, 1 / 6, 1 / 6, 1 / 6], atol=1e-16)

    @given(seeds)
    def test_sum_to_one(self, seed):
        b, _ = log_ratio_batch(seed, 0.1)
        assert trajectory_weights(b).sum() == pytest.approx(1.0, abs=1e-12)
        assert token_weights(b).sum() == pytest.approx(1.0, abs=1e-12)


class TestGspo:
    def test_aggregates(self):
        b = trajectory_batch([2])
        assert gspo_aggregate(b, [1.0, 1.0], 0) == 1.0
        assert gspo_aggregate(b, [math.exp(0.1), math.exp(-0.1)], 0) == pytest.approx(1.0, abs=1e-15)
        assert gspo_aggregate(b, [1.2, 1.2], 0) == pytest.approx(1.2, abs=1e-15)

    def test_gate(self):
        b = trajectory_batch([2, 1])
        g = gate_gspo(b, [1.1, 1.1, 1.0], 4e-4)
        np.testing.assert_allclose(g, [1.0004, 1.0004, 1.0], atol=1e-15)

    def test_trajectories_independent(self):
        b = trajectory_batch([2, 2])
        a = gate_gspo(b, [1.1, 1.1, 1.0, 1.0], 0.05)
        c = gate_gspo(b, [1.1, 1.1, 0.5, 0.7], 0.05)
        np.testing.assert_array_equal(a[:2], c[:2])

    def test_sign_gated_uses_mean_advantage(self):
        b = trajectory_batch([2], [-3.0, 1.0])
        g = gate_gspo(b, [1.5, 1.5], 0.1, sign_gated=True)
        np.testing.assert_allclose(g, [1.5, 1.5])

    def test_single_token_trajectory_is_token_clip(self):
        b = trajectory_batch([1, 1, 1])
        r = np.array([0.5, 1.0002, 1.5])
        np.testing.assert_allclose(gate_gspo(b, r, 0.2), gate_ppo(r, 0.2), atol=1e-15)

    @given(seeds)
    def test_aggregate_is_geometric_mean(self, seed):
        b, r = log_ratio_batch(seed, 0.2)
        for pos, tid in enumerate(b.traj_ids):
            tok = r[b.traj_index == pos]
            assert gspo_aggregates(b, r)[pos] == pytest.approx(float(np.prod(tok)) ** (1 / tok.size), rel=1e-12)


class TestGateIdentityOnPolicy:
    @pytest.mark.parametrize("make", [ppo_spec, grpo_spec, gspo_spec])
    @given(seed=seeds)
    def test_identity(self, make, seed):
        b, _ = log_ratio_batch(seed, 0.1)
        spec = make(b)
        np.testing.assert_array_equal(spec.gate(b, np.ones(b.T)), np.ones(b.T))


class TestDeltaTrpo:
    def test_values(self):
        assert delta_trpo(0.5) == 0.125
        assert delta_trpo(0.9) == pytest.approx(1 / 72, rel=1e-15)
        assert delta_trpo(1.0) == 0.0

    @pytest.mark.parametrize("g", [0.0, -0.5, 1.01])
    def test_domain(self, g):
        with pytest.raises(ConfigError):
            delta_trpo(g)

    @given(st.floats(0.01, 0.999), st.floats(0.01, 0.999))
    def test_decreasing(self, a, b):
        lo, hi = sorted((a, b))
        assert delta_trpo(lo) >= delta_trpo(hi)


class TestGspoBound:
    def test_small_run(self):
        res = check_gspo_bound(n_seeds=50)
        assert res.passed, res.to_dict()
        assert res.metrics["max_mean_tv"] <= res.metrics["pinsker_limit"]

    def test_saturated_clip_example(self):
        # a trajectory pushed far outside the band is clipped to the budget exactly
        b = trajectory_batch([3])
        eps = 4e-4
        s = gate_gspo(b, [0.5, 0.6, 0.7], eps)[0]
        assert -math.log(s) == pytest.approx(-math.log1p(-eps), abs=1e-15)
