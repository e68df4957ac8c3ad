"""Vectorized numpy implementations of the hot loops.

These functions define the reference semantics; the compiled extension in
``_kernels.pyx`` must reproduce them to floating-point round-off.
"""

from __future__ import annotations

import numpy as np


def g_agg_array(x: np.ndarray, c: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Piecewise-linear aggregate gate, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    c_star = c * (1.0 + 1.0 / k)
    roll = np.sign(x) * (k + 1.0) * c - k * x
    return np.where(ax <= c, x, np.where(ax < c_star, roll, 0.0))


def g_agg_slope_array(x: np.ndarray, c: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Derivative of the aggregate gate, taking the pass-through side at the
    closed boundary and zero at and beyond the zeroing threshold."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    c_star = c * (1.0 + 1.0 / k)
    return np.where(ax <= c, 1.0, np.where(ax < c_star, -np.asarray(k, dtype=np.float64), 0.0))


def apc_clip(
    dev: np.ndarray,
    weights: np.ndarray,
    state_index: np.ndarray,
    state_counts: np.ndarray,
    delta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Cross-coupled clip of deviations.

    Each entry ``i`` receives the bound ``T_s * delta - (S_s - |dev_i|)`` where
    ``S_s`` is the weighted sum of absolute deviations at the entry's state.
    Returns the raw bounds and the deviations clipped to ``[-B+, B+]``.
    """
    dev = np.asarray(dev, dtype=np.float64)
    absdev = np.abs(dev)
    total = np.bincount(state_index, weights=weights * absdev, minlength=state_counts.size)
    bound = state_counts[state_index] * delta - (total[state_index] - absdev)
    bplus = np.maximum(bound, 0.0)
    return bound, np.clip(dev, -bplus, bplus)


def fiberpo_forward(
    log_r: np.ndarray,
    traj_index: np.ndarray,
    traj_len: np.ndarray,
    slope: np.ndarray,
    c_plus: float,
    c_minus: float,
    eps: float,
) -> dict[str, np.ndarray]:
    """Per-token and per-trajectory quantities of the two-level gate."""
    log_r = np.asarray(log_r, dtype=np.float64)
    n_traj = traj_len.size
    lp = np.bincount(traj_index, weights=np.maximum(log_r, 0.0), minlength=n_traj) / traj_len
    lm = np.bincount(traj_index, weights=np.maximum(-log_r, 0.0), minlength=n_traj) / traj_len
    log_w = g_agg_array(lp, c_plus, slope) - g_agg_array(lm, c_minus, slope)
    label = np.where(log_r >= 0.0, 1.0, -1.0)
    own = np.where(label > 0, lp[traj_index], lm[traj_index])
    other = np.where(label > 0, lm[traj_index], lp[traj_index])
    u = label * log_r - own
    v = -other
    log_fiber = np.clip(label * u, -eps, eps) - np.clip(label * v, -eps, eps)
    return {
        "log_s_plus": lp,
        "log_s_minus": lm,
        "log_w": log_w,
        "label": label,
        "residual": u,
        "opposite": v,
        "log_fiber": log_fiber,
        "log_gate": log_w[traj_index] + log_fiber,
    }


def fiberpo_jacobian(
    log_r: np.ndarray,
    traj_index: np.ndarray,
    traj_len: np.ndarray,
    slope: np.ndarray,
    c_plus: float,
    c_minus: float,
    eps: float,
) -> np.ndarray:
    """Dense derivative of gated ratios with respect to raw ratios."""
    f = fiberpo_forward(log_r, traj_index, traj_len, slope, c_plus, c_minus, eps)
    r = np.exp(log_r)
    gate = np.exp(f["log_gate"])
    gam_p = g_agg_slope_array(f["log_s_plus"], c_plus, slope)
    gam_m = g_agg_slope_array(f["log_s_minus"], c_minus, slope)
    label = f["label"]
    gam_j = np.where(label > 0, gam_p[traj_index], gam_m[traj_index])
    au = (np.abs(f["residual"]) <= eps).astype(np.float64)
    av = (np.abs(f["opposite"]) <= eps).astype(np.float64)
    same_traj = traj_index[:, None] == traj_index[None, :]
    same_label = label[:, None] == label[None, :]
    inv_len = 1.0 / traj_len[traj_index]
    coupling = inv_len[:, None] * (
        gam_j[None, :] - au[:, None] * same_label - av[:, None] * (~same_label)
    )
    bracket = np.diag(au) + coupling
    return np.where(same_traj, (gate[:, None] / r[None, :]) * bracket, 0.0)
