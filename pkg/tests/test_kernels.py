import numpy as np
import pytest
from hypothesis import given

from ratiogate import kernels
from ratiogate.core import GatingConfig
from ratiogate.fiberpo import fiberpo_gate, fiberpo_jacobian

from conftest import log_ratio_batch, random_instance, seeds

BACKENDS = kernels.available_backends()
needs_compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def _fiberpo_args(seed: int, scale: float):
    b, r = log_ratio_batch(seed, scale, n_traj=(1, 6), length=(1, 12))
    cfg = GatingConfig()
    return b, r, (np.log(r), b.traj_index, b.traj_lengths, b.traj_lengths, cfg.c_plus, cfg.c_minus, cfg.epsilon)


class TestSelection:
    def test_python_always_available(self):
        assert "python" in BACKENDS
        assert kernels.get_backend("python").__name__.endswith("_kernels_py")

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            kernels.get_backend("fortran")

    def test_active_backend_listed(self):
        assert kernels.BACKEND in BACKENDS


class TestNumpyBackend:
    def test_g_agg_branches(self):
        out = kernels.g_agg_array([0.1, 0.125, 0.14, -0.125], 0.12, 10, backend="python")
        np.testing.assert_allclose(out, [0.1, 0.07, 0.0, -0.07], atol=1e-15)

    def test_apc_clip_example(self):
        bound, clipped = kernels.apc_clip(
            np.array([0.5, -0.5]), np.ones(2), np.array([0, 0]), np.array([2]), 0.2, backend="python"
        )
        np.testing.assert_allclose(bound, [-0.1, -0.1], atol=1e-15)
        np.testing.assert_array_equal(clipped, [0.0, 0.0])


@needs_compiled
class TestParity:
    @given(seeds)
    def test_g_agg(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 0.2, size=50)
        c = rng.uniform(0.01, 0.3, size=50)
        k = rng.integers(1, 40, size=50).astype(float)
        for fn in (kernels.g_agg_array, kernels.g_agg_slope_array):
            np.testing.assert_array_equal(fn(x, c, k, backend="python"), fn(x, c, k, backend="cython"))

    @given(seeds)
    def test_apc_clip(self, seed):
        rng, pol, b = random_instance(seed)
        dev = rng.normal(0, 0.3, size=b.T)
        args = (dev, np.ones(b.T), b.state_index, b.state_counts, float(rng.uniform(0, 0.3)))
        for a, c in zip(kernels.apc_clip(*args, backend="python"), kernels.apc_clip(*args, backend="cython")):
            np.testing.assert_allclose(a, c, rtol=0, atol=1e-15)

    @given(seeds)
    def test_forward(self, seed):
        _, _, args = _fiberpo_args(seed, 0.1)
        py = kernels.fiberpo_forward(*args, backend="python")
        cy = kernels.fiberpo_forward(*args, backend="cython")
        assert set(py) == set(cy)
        for key in py:
            np.testing.assert_allclose(py[key], cy[key], rtol=1e-14, atol=1e-16)

    @given(seeds)
    def test_jacobian(self, seed):
        _, _, args = _fiberpo_args(seed, 0.1)
        py = kernels.fiberpo_jacobian(*args, backend="python")
        cy = kernels.fiberpo_jacobian(*args, backend="cython")
        np.testing.assert_allclose(py, cy, rtol=1e-13, atol=1e-15)

    def test_high_level_wrappers(self):
        b, r, _ = _fiberpo_args(7, 0.2)
        cfg = GatingConfig()
        np.testing.assert_allclose(
            fiberpo_gate(b, r, cfg, backend="python"), fiberpo_gate(b, r, cfg, backend="cython"), rtol=1e-14
        )
        np.testing.assert_allclose(
            fiberpo_jacobian(b, r, cfg, backend="python"), fiberpo_jacobian(b, r, cfg, backend="cython"), atol=1e-15
        )
