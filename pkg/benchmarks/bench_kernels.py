"""Time the numpy and compiled kernels on the same inputs.

Usage: python3 benchmarks/bench_kernels.py [--tokens N] [--repeat R]

Prints one line per kernel and backend with the best-of-R wall time, and the
largest absolute difference between the two backends' outputs.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from ratiogate import kernels


def _inputs(n_tokens: int, traj_len: int, rng: np.random.Generator) -> dict:
    n_traj = max(1, n_tokens // traj_len)
    lens = np.full(n_traj, traj_len, dtype=np.int64)
    traj_index = np.repeat(np.arange(n_traj), traj_len)
    log_r = rng.normal(0.0, 0.1, size=traj_index.size)
    n_states = max(1, traj_index.size // 8)
    state_index = rng.integers(0, n_states, size=traj_index.size)
    state_counts = np.bincount(state_index, minlength=n_states)
    used = state_counts > 0
    remap = np.cumsum(used) - 1
    state_index = remap[state_index]
    state_counts = state_counts[used]
    return {
        "log_r": log_r,
        "traj_index": traj_index,
        "traj_len": lens.astype(np.float64),
        "slope": lens.astype(np.float64),
        "state_index": state_index,
        "state_counts": state_counts,
    }


def _calls(x: dict, backend: str) -> dict:
    dev = np.expm1(x["log_r"])
    ones = np.ones_like(dev)
    args = (x["log_r"], x["traj_index"], x["traj_len"], x["slope"], 0.12, 0.05, 0.04)
    calls = {
        "g_agg": lambda: kernels.g_agg_array(x["log_r"], 0.05, 10.0, backend=backend),
        "apc_clip": lambda: kernels.apc_clip(dev, ones, x["state_index"], x["state_counts"], 0.1, backend=backend),
        "fiberpo_forward": lambda: kernels.fiberpo_forward(*args, backend=backend),
    }
    if x["log_r"].size <= 4096:
        calls["fiberpo_jacobian"] = lambda: kernels.fiberpo_jacobian(*args, backend=backend)
    return calls


def _flatten(out) -> np.ndarray:
    if isinstance(out, dict):
        return np.concatenate([np.ravel(out[k]) for k in sorted(out)])
    if isinstance(out, tuple):
        return np.concatenate([np.ravel(v) for v in out])
    return np.ravel(out)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--tokens", type=int, default=2048)
    ap.add_argument("--traj-len", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    x = _inputs(args.tokens, args.traj_len, np.random.default_rng(args.seed))
    backends = kernels.available_backends()
    print(f"tokens={x['log_r'].size} backends={','.join(backends)}")
    if "cython" not in backends:
        print("compiled backend unavailable; timing the numpy backend only")
    results = {b: _calls(x, b) for b in backends}
    for name in results[backends[0]]:
        times = {}
        for b in backends:
            fn = results[b][name]
            times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        line = "  ".join(f"{b}={t * 1e3:9.4f} ms" for b, t in times.items())
        if len(backends) > 1:
            diff = float(np.max(np.abs(_flatten(results["python"][name]()) - _flatten(results["cython"][name]()))))
            speedup = times["python"] / times["cython"]
            line += f"  speedup={speedup:6.2f}x  max_abs_diff={diff:.2e}"
        print(f"{name:18s} {line}")


if __name__ == "__main__":
    main()
