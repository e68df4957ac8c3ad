import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from ratiogate.checks import check_equivalence, check_retraction, check_zones
from ratiogate.core import Batch
from ratiogate.errors import ConfigError, InputError
from ratiogate.rgf import delta_trpo, eval_rgf
from ratiogate.trust_region import (
    DeviationTuple,
    ZoneLabel,
    apc_clip_bound,
    apc_clip_bounds,
    apc_gate,
    apc_objective,
    apc_spec,
    classify_zone,
    classify_zones,
    correction_term,
    delta_apc,
    equivalence_check,
    lp_vertex_oracle,
    random_feasible_deviation,
    reduced_tv_trpo_objective,
    retract,
    state_weights,
    surrogated_apc_objective,
    tv_trpo_maximizer,
    unit_tv_maximizer,
)

from conftest import random_instance, seeds, single_state_batch


def _linprog_value(n, adv) -> float:
    """Unit-TV program in split variables x = x_plus - x_minus, solved by HiGHS."""
    n = np.asarray(n, dtype=float)
    adv = np.asarray(adv, dtype=float)
    m = n.size
    c = -np.concatenate([n * adv, -n * adv])
    a_ub = np.concatenate([n, n])[None, :]
    a_eq = np.concatenate([n, -n])[None, :]
    res = linprog(c, A_ub=a_ub, b_ub=[n.sum()], A_eq=a_eq, b_eq=[0.0], bounds=[(0, None)] * (2 * m), method="highs")
    assert res.status == 0
    return -res.fun


def _centered_instance(seed: int):
    rng, pol, b = random_instance(seed, states=(1, 4), actions=(2, 4), n_traj=(1, 4), length=(1, 6))
    adv = rng.normal(size=b.T)
    mean = np.bincount(b.state_index, weights=adv) / b.state_counts
    return rng, b.with_advantages(adv - mean[b.state_index])


class TestClipBound:
    def test_on_policy(self):
        b = single_state_batch([1, 2], [1.0, -0.5])
        np.testing.assert_allclose(apc_clip_bounds(b, np.ones(3), 0.1), 0.3)

    def test_pm_half(self):
        b = single_state_batch([1, 1], [1.0, -1.0])
        assert apc_clip_bound(b, [1.5, 0.5], 0, 0.2) == pytest.approx(-0.1, abs=1e-15)
        np.testing.assert_array_equal(apc_gate(b, [1.5, 0.5], 0.2), [1.0, 1.0])

    @given(seeds)
    def test_zero_radius_zeroes_everything(self, seed):
        rng, pol, b = random_instance(seed)
        r = np.exp(rng.normal(0, 0.3, size=b.T))
        assert np.all(apc_clip_bounds(b, r, 0.0) <= 0)
        np.testing.assert_array_equal(apc_gate(b, r, 0.0), np.ones(b.T))

    def test_bad_token(self):
        b = single_state_batch([1], [0.0])
        with pytest.raises(InputError):
            apc_clip_bound(b, [1.0], 3, 0.1)

    def test_negative_delta(self):
        b = single_state_batch([1], [0.0])
        with pytest.raises(ConfigError):
            apc_gate(b, [1.0], -0.1)


class TestApcObjective:
    def test_on_policy(self):
        b = single_state_batch([1, 2], [1.0, -0.25])
        assert apc_objective(b, np.ones(3), 0.1) == pytest.approx(np.mean(b.advantages), abs=1e-15)

    def test_pm_half_example(self):
        b = single_state_batch([1, 1], [1.0, -1.0])
        assert apc_objective(b, [1.5, 0.5], 0.2) == 0.0

    @given(seeds)
    def test_large_radius_is_linear_surrogate(self, seed):
        rng, pol, b = random_instance(seed)
        r = np.exp(rng.normal(0, 0.3, size=b.T))
        pair_r = np.zeros(b.pair_keys.shape[0])
        pair_r[b.pair_index] = r
        r = pair_r[b.pair_index]
        expected = float(np.mean((r - 1) * b.advantages + b.advantages))
        assert apc_objective(b, r, 1e6) == pytest.approx(expected, rel=1e-12, abs=1e-14)

    @given(seeds)
    def test_rgf_form_matches(self, seed):
        rng, pol, b = random_instance(seed)
        r = np.exp(rng.normal(0, 0.2, size=b.T))
        assert eval_rgf(apc_spec(b, 0.05), b, r) == pytest.approx(apc_objective(b, r, 0.05), rel=1e-12, abs=1e-14)


class TestZones:
    def test_examples(self):
        b = single_state_batch([1, 1], [1.0, -1.0])
        assert classify_zone(b, [1.0, 1.0], 0, 0.2) is ZoneLabel.PASS_THROUGH
        assert classify_zones(b, [1.5, 0.5], 0.2) == [ZoneLabel.ZEROED, ZoneLabel.ZEROED]
        assert classify_zones(b, [1.3, 0.7], 0.2) == [ZoneLabel.ROLLBACK, ZoneLabel.ROLLBACK]

    @given(seeds)
    def test_zeroed_iff_nonpositive_bound(self, seed):
        rng, pol, b = random_instance(seed)
        r = np.exp(rng.normal(0, 0.4, size=b.T))
        delta = float(rng.uniform(0.01, 0.3))
        labels = classify_zones(b, r, delta)
        bounds = apc_clip_bounds(b, r, delta)
        for lab, bound in zip(labels, bounds):
            assert (lab is ZoneLabel.ZEROED) == (bound <= 0)

    def test_suite(self):
        res = check_zones(200)
        assert res.passed, res.failures


class TestUnitTv:
    def test_two_action_example(self):
        sol = unit_tv_maximizer(single_state_batch([1, 1], [2.0, -1.0]))
        assert sol.per_state_deviation[0] == {0: 1.0, 1: -1.0}
        assert sol.per_state_value[0] == 3.0

    def test_three_action_example(self):
        sol = unit_tv_maximizer(single_state_batch([1, 1, 1], [1.0, 0.0, -1.0]))
        assert sol.per_state_deviation[0] == {0: 1.5, 1: 0.0, 2: -1.5}
        assert sol.per_state_value[0] == 3.0

    def test_equal_advantages(self):
        sol = unit_tv_maximizer(single_state_batch([2, 1], [0.5, 0.5]))
        assert sol.per_state_value[0] == 0.0
        assert not np.any(sol.pair_deviation)

    def test_single_action_state(self):
        sol = unit_tv_maximizer(single_state_batch([3], [1.0]))
        assert sol.per_state_value[0] == 0.0

    def test_tie_uses_smallest_norm_split(self):
        # two tied top actions with multiplicities 1 and 2
        sol = unit_tv_maximizer(single_state_batch([1, 2, 1], [1.0, 1.0, -1.0]))
        d = sol.per_state_deviation[0]
        assert d[1] == pytest.approx(2 * d[0])
        _, vertices = lp_vertex_oracle([1, 2, 1], [1.0, 1.0, -1.0])
        assert len(vertices) >= 2
        norms = [np.linalg.norm(v) for v in vertices]
        assert np.linalg.norm(list(d.values())) <= min(norms) + 1e-12

    @given(seeds)
    def test_matches_linprog(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 6))
        n = rng.integers(1, 4, size=m)
        adv = np.round(rng.normal(size=m), 1)
        b = single_state_batch(n, adv)
        sol = unit_tv_maximizer(b, validate=m <= 4)
        assert sol.per_state_value[0] == pytest.approx(_linprog_value(n, adv), rel=1e-9, abs=1e-12)
        dev = DeviationTuple.from_pairs(b, sol.pair_deviation)
        assert abs(dev.constraint_residual()[0]) <= 1e-12
        if sol.per_state_value[0] > 0:
            assert dev.per_state_tv()[0] == pytest.approx(1.0, abs=1e-12)

    @given(seeds)
    def test_vertex_oracle_matches_linprog(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 5))
        n = rng.integers(1, 4, size=m)
        adv = rng.normal(size=m)
        best, _ = lp_vertex_oracle(n, adv)
        assert best == pytest.approx(_linprog_value(n, adv), rel=1e-9, abs=1e-12)

    @given(seeds)
    def test_value_bounded_by_advantage_norm(self, seed):
        rng, pol, b = random_instance(seed)
        sol = unit_tv_maximizer(b)
        assert sol.aggregate_value <= 2 * np.max(np.abs(b.advantages)) + 1e-12


class TestRadius:
    def test_collapses_at_one(self):
        b = single_state_batch([1, 1], [2.0, -1.0])
        assert delta_apc(b, 1.0) == 0.0
        assert not np.any(tv_trpo_maximizer(b, 1.0).pair_values)

    def test_single_state_example(self):
        b = single_state_batch([1, 1], [2.0, -1.0])
        m = unit_tv_maximizer(b, gamma=0.9).aggregate_value
        assert m == pytest.approx(1.5)
        optimal_step = 0.1 / (7.2 * 2.0) * m
        assert delta_apc(b, 0.9) == pytest.approx(optimal_step, rel=1e-15)
        np.testing.assert_allclose(tv_trpo_maximizer(b, 0.9).pair_values, [optimal_step, -optimal_step], rtol=1e-15)

    def test_zero_value_gives_zero(self):
        b = single_state_batch([1, 1], [0.3, 0.3])
        assert delta_apc(b, 0.9) == 0.0
        assert not np.any(tv_trpo_maximizer(b, 0.9).pair_values)

    def test_main_form_option(self):
        b = single_state_batch([1, 1], [2.0, -1.0])
        assert delta_apc(b, 0.9, form="scaled") == pytest.approx(0.01 * 1.5 / (7.2 * 2 * 2))
        with pytest.raises(ConfigError):
            delta_apc(b, 0.9, form="other")

    @given(seeds, st.floats(0.05, 0.99))
    def test_bounded_by_trpo_radius(self, seed, gamma):
        rng, pol, b = random_instance(seed)
        assert delta_apc(b, gamma) <= delta_trpo(gamma) + 1e-15

    def test_shrinks_linearly(self):
        b = single_state_batch([1, 1], [1.0, -1.0])
        ratios = [delta_apc(b, g) / (1 - g) for g in (0.9, 0.99, 0.999)]
        assert ratios[2] / ratios[1] == pytest.approx(0.99 / 0.999, rel=1e-12)

    def test_state_weights(self):
        b = single_state_batch([2, 1], [1.0, -1.0])
        np.testing.assert_allclose(state_weights(b, 1.0), [1 / 3])
        with pytest.raises(ConfigError):
            state_weights(b, 0.0)


class TestRetract:
    def test_inside_unchanged(self):
        b = single_state_batch([1, 1], [0, 0])
        np.testing.assert_allclose(retract(b, [0.05, -0.05], 0.2).pair_values, [0.05, -0.05], atol=1e-16)

    def test_pm_half(self):
        b = single_state_batch([1, 1], [0, 0])
        np.testing.assert_array_equal(retract(b, [0.5, -0.5], 0.2).pair_values, [0.0, 0.0])

    def test_pm_03(self):
        b = single_state_batch([1, 1], [0, 0])
        out = retract(b, [0.3, -0.3], 0.2)
        np.testing.assert_allclose(out.pair_values, [0.1, -0.1], atol=1e-15)
        assert out.per_state_tv()[0] < 0.2

    def test_rejects_infeasible(self):
        b = single_state_batch([1, 1], [0, 0])
        with pytest.raises(InputError):
            retract(b, [0.3, 0.3], 0.2)

    @given(seeds)
    def test_property(self, seed):
        rng, pol, b = random_instance(seed)
        u = random_feasible_deviation(rng, b, scale=float(rng.uniform(0.01, 1.0)))
        delta = float(rng.uniform(0.01, 0.5))
        out = retract(b, u, delta)
        tv_in = u.per_state_tv()
        tv_out = out.per_state_tv()
        assert np.all(tv_out <= delta + 1e-12)
        assert np.all(tv_out[tv_in > delta] < delta - 1e-9)
        np.testing.assert_allclose(out.constraint_residual(), 0.0, atol=1e-12)

    def test_suite(self):
        res = check_retraction(200)
        assert res.passed, res.failures


class TestCorrectionAndForms:
    @given(seeds)
    def test_correction_vanishes_inside(self, seed):
        rng, pol, b = random_instance(seed)
        u = random_feasible_deviation(rng, b, scale=0.05)
        delta = float(u.per_state_tv().max()) * 1.01 + 1e-9
        np.testing.assert_allclose(correction_term(b, u, delta), 0.0, atol=1e-12)

    @given(seeds)
    def test_objective_forms_agree(self, seed):
        rng, b = _centered_instance(seed)
        u = random_feasible_deviation(rng, b, scale=0.15)
        delta = float(rng.uniform(0.02, 0.4))
        direct = apc_objective(b, 1.0 + u.values, delta)
        surrogate = surrogated_apc_objective(b, u, delta)
        const = float(np.mean(b.advantages))
        assert direct == pytest.approx(surrogate, abs=1e-10)
        assert abs(const) <= 1e-12

    def test_penalized_objective_needs_discount(self):
        b = single_state_batch([1, 1], [1.0, -1.0])
        with pytest.raises(ConfigError):
            reduced_tv_trpo_objective(b, [0.0, 0.0], 1.0)


class TestDeviationTuple:
    def test_from_tokens_rejects_split_pair(self):
        b = single_state_batch([2], [0.0])
        with pytest.raises(InputError):
            DeviationTuple.from_tokens(b, [0.1, 0.2])

    def test_pair_values_read_only(self):
        b = single_state_batch([1, 1], [0.0, 0.0])
        d = DeviationTuple.from_pairs(b, [0.1, -0.1])
        with pytest.raises(ValueError):
            d.pair_values[0] = 3.0
        assert d.as_dict() == {(0, 0): 0.1, (0, 1): -0.1}


class TestEquivalence:
    def test_two_action_example(self):
        b = single_state_batch([1, 1], [1.0, -1.0])
        rep = equivalence_check(b, 0.9)
        assert rep.max_abs_diff <= 1e-3

    def test_zero_value_instance(self):
        b = single_state_batch([1, 1], [0.5, 0.5])
        rep = equivalence_check(b, 0.9)
        assert rep.optimal_step == 0.0
        assert rep.max_abs_diff <= 1e-3

    def test_two_state_batch(self):
        b = Batch.from_tokens([[0, 0, 0, 0, 1.0], [0, 1, 1, 0, -1.0], [1, 0, 0, 1, 0.5], [1, 1, 1, 1, -0.5]])
        rep = equivalence_check(b, 0.5)
        assert rep.max_abs_diff <= 1e-3

    def test_suite_small(self):
        res = check_equivalence(n_instances=4)
        assert res.passed, res.failures
