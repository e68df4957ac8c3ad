import json

import numpy as np
import pytest
from hypothesis import given

from ratiogate.checks import check_first_order, check_reflecting
from ratiogate.core import GatingConfig, random_policy, sample_batch
from ratiogate.errors import InputError, StructuralError
from ratiogate.fbg import (
    Density,
    FbgInstance,
    FiniteBundle,
    MarkovKernel,
    check_reflecting as kernel_is_reflecting,
    fbg_gate,
    fiberpo_fbg_instance,
    first_order_check,
    kernel_apply,
    pushforward,
    residual,
)
from ratiogate.fiberpo import fiberpo_gate

from conftest import log_ratio_batch, seeds


def _identity_instance(bundle: FiniteBundle, kernel=None) -> FbgInstance:
    return FbgInstance(
        kernel or MarkovKernel.uniform(bundle),
        base_gate=lambda p: p,
        fiber_gate=lambda x, p: x,
        decompose=np.log,
        recover=np.exp,
        label="identity",
    )


def _random_bundle(rng: np.random.Generator) -> FiniteBundle:
    n_base = int(rng.integers(1, 6))
    sizes = rng.integers(1, 5, size=n_base)
    proj = np.repeat(np.arange(n_base), sizes)
    return FiniteBundle(rng.permutation(proj), n_base)


def _random_kernel(rng: np.random.Generator, bundle: FiniteBundle) -> MarkovKernel:
    raw = rng.uniform(0.1, 1.0, size=bundle.n_total)
    sums = np.bincount(bundle.projection, weights=raw)
    return MarkovKernel(bundle, raw / sums[bundle.projection])


class TestBundle:
    def test_empty_fiber_rejected(self):
        with pytest.raises(StructuralError):
            FiniteBundle(np.array([0, 0, 2]), 3)

    def test_out_of_range(self):
        with pytest.raises(StructuralError):
            FiniteBundle(np.array([0, 3]), 2)

    def test_empty(self):
        with pytest.raises(InputError):
            FiniteBundle(np.array([], dtype=int), 1)

    def test_round_trip(self):
        b = FiniteBundle(np.array([1, 0, 1]), 2)
        again = FiniteBundle.from_dict(json.loads(json.dumps(b.to_dict())))
        np.testing.assert_array_equal(again.projection, b.projection)
        assert again.n_base == 2
        np.testing.assert_array_equal(b.fiber(1), [0, 2])

    def test_density_space(self):
        with pytest.raises(InputError):
            Density("X", [1.0])
        with pytest.raises(InputError):
            Density("E", [np.nan])


class TestPushforward:
    def test_examples(self):
        b = FiniteBundle(np.array([0, 0, 0, 1]), 2)
        np.testing.assert_array_equal(pushforward(b, np.zeros(4)), [0, 0])
        np.testing.assert_array_equal(pushforward(b, [1.0, 2.0, 3.0, 5.0]), [6.0, 5.0])
        np.testing.assert_array_equal(pushforward(b, Density("E", [1.0, 2.0, 3.0, 0.0])), [6.0, 0.0])

    def test_size_mismatch(self):
        with pytest.raises(InputError):
            pushforward(FiniteBundle(np.array([0]), 1), [1.0, 2.0])


class TestKernel:
    def test_uniform_spread(self):
        b = FiniteBundle(np.array([0, 0, 0, 1]), 2)
        np.testing.assert_allclose(kernel_apply(MarkovKernel.uniform(b), [3.0, 2.0]), [1.0, 1.0, 1.0, 2.0])
        np.testing.assert_array_equal(kernel_apply(MarkovKernel.uniform(b), [0.0, 0.0]), np.zeros(4))

    def test_reflecting(self):
        b = FiniteBundle(np.array([0, 0, 1]), 2)
        assert kernel_is_reflecting(b, MarkovKernel.uniform(b))
        assert not kernel_is_reflecting(b, MarkovKernel(b, [0.45, 0.45, 1.0]))

    def test_triplets(self):
        b = FiniteBundle(np.array([0, 0, 1]), 2)
        k = MarkovKernel.from_triplets(b, [[0, 0, 0.25], [1, 0, 0.75], [2, 1, 1.0], [2, 0, 0.0]])
        np.testing.assert_array_equal(k.weights, [0.25, 0.75, 1.0])
        assert MarkovKernel.from_triplets(b, k.to_triplets()).weights.tolist() == k.weights.tolist()
        with pytest.raises(StructuralError):
            MarkovKernel.from_triplets(b, [[0, 1, 0.5]])
        with pytest.raises(StructuralError):
            MarkovKernel.from_triplets(b, [[7, 0, 0.5]])

    def test_negative_weight(self):
        b = FiniteBundle(np.array([0, 0]), 1)
        with pytest.raises(InputError):
            MarkovKernel(b, [1.5, -0.5])

    @given(seeds)
    def test_round_trip_identity(self, seed):
        rng = np.random.default_rng(seed)
        b = _random_bundle(rng)
        k = _random_kernel(rng, b)
        assert kernel_is_reflecting(b, k)
        for _ in range(20):
            p = rng.normal(size=b.n_base)
            np.testing.assert_allclose(pushforward(b, kernel_apply(k, p)), p, atol=1e-12)

    def test_reflecting_suite(self):
        assert check_reflecting(50).passed
        res = check_reflecting(5, fault="non-reflecting-kernel")
        assert not res.passed
        assert "all_reflecting" in res.failures


class TestResidual:
    def test_examples(self):
        b = FiniteBundle(np.array([0, 0]), 1)
        k = MarkovKernel.uniform(b)
        np.testing.assert_allclose(residual(k, [1.0, 3.0]), [-1.0, 1.0])
        np.testing.assert_allclose(residual(k, kernel_apply(k, [4.0])), [0.0, 0.0])

    @given(seeds)
    def test_orthogonal_to_base(self, seed):
        rng = np.random.default_rng(seed)
        b = _random_bundle(rng)
        k = _random_kernel(rng, b)
        sigma = rng.normal(size=b.n_total)
        np.testing.assert_allclose(pushforward(b, residual(k, sigma)), 0.0, atol=1e-12)


class TestGate:
    @given(seeds)
    def test_identity_gates(self, seed):
        rng = np.random.default_rng(seed)
        b = _random_bundle(rng)
        inst = _identity_instance(b, _random_kernel(rng, b))
        sigma = rng.normal(size=b.n_total)
        np.testing.assert_allclose(fbg_gate(inst, sigma), sigma, atol=1e-12)

    def test_zero_fiber_gate(self):
        b = FiniteBundle(np.array([0, 0, 1]), 2)
        k = MarkovKernel.uniform(b)
        inst = FbgInstance(k, lambda p: 2 * p, lambda x, p: np.zeros_like(x), np.log, np.exp)
        sigma = np.array([1.0, 3.0, 2.0])
        np.testing.assert_allclose(fbg_gate(inst, sigma), kernel_apply(k, 2 * pushforward(b, sigma)))

    @given(seeds)
    def test_recovery_bitwise(self, seed):
        b, r = log_ratio_batch(seed, 0.3)
        inst = fiberpo_fbg_instance(b, GatingConfig())
        back = inst.recover(inst.decompose(r))
        np.testing.assert_allclose(back, r, rtol=4e-16)

    @given(seeds)
    def test_fiberpo_instance_matches_direct_gate(self, seed):
        b, r = log_ratio_batch(seed, 0.1)
        cfg = GatingConfig()
        inst = fiberpo_fbg_instance(b, cfg)
        assert kernel_is_reflecting(inst.bundle, inst.kernel)
        np.testing.assert_allclose(inst.gate_ratios(r), fiberpo_gate(b, r, cfg), rtol=1e-12)


class TestFirstOrder:
    def _setup(self, seed=3):
        rng = np.random.default_rng(seed)
        pol = random_policy(rng, [3, 2, 3])
        b = sample_batch(rng, pol, [4, 3, 5])
        return pol, b

    def test_fiberpo_instance(self):
        pol, b = self._setup()
        rep = first_order_check(fiberpo_fbg_instance(b, GatingConfig()), b, pol)
        assert rep.precondition_ok
        assert rep.value_gap <= 1e-12
        assert rep.max_rel_error <= 1e-5
        assert rep.passed
        assert rep.to_dict()["passed"] is True

    def test_broken_gate_flagged(self):
        pol, b = self._setup()
        good = fiberpo_fbg_instance(b, GatingConfig())
        broken = FbgInstance(
            good.kernel, lambda p: 2 * p, good.fiber_gate, good.decompose, good.recover, label="broken"
        )
        rep = first_order_check(broken, b, pol)
        assert not rep.precondition_ok
        assert not rep.passed
        assert any("base gate has slope" in v for v in rep.violations)

    def test_saturated_clip_flagged(self):
        pol, b = self._setup()
        good = fiberpo_fbg_instance(b, GatingConfig())
        frozen = FbgInstance(
            good.kernel, good.base_gate, lambda x, p: np.clip(x, 0.0, 0.0), good.decompose, good.recover
        )
        rep = first_order_check(frozen, b, pol)
        assert not rep.precondition_ok
        assert any(v.startswith("fiber") for v in rep.violations)

    def test_suite(self):
        res = check_first_order(5)
        assert res.passed, res.failures
