# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops mirroring ``_kernels_py``; see that module for semantics."""

import numpy as np
from libc.math cimport fabs, exp, fmax


cdef inline double _sign(double x) nogil:
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


cdef inline double _clip(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef inline double _g_agg(double x, double c, double k) nogil:
    cdef double ax = fabs(x)
    if ax <= c:
        return x
    if ax < c * (1.0 + 1.0 / k):
        return _sign(x) * (k + 1.0) * c - k * x
    return 0.0


cdef inline double _g_agg_slope(double x, double c, double k) nogil:
    cdef double ax = fabs(x)
    if ax <= c:
        return 1.0
    if ax < c * (1.0 + 1.0 / k):
        return -k
    return 0.0


def g_agg_array(x, c, k):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef const double[::1] cv = np.ascontiguousarray(np.broadcast_to(c, (xv.shape[0],)), dtype=np.float64)
    cdef const double[::1] kv = np.ascontiguousarray(np.broadcast_to(k, (xv.shape[0],)), dtype=np.float64)
    out = np.empty(xv.shape[0])
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(xv.shape[0]):
            ov[i] = _g_agg(xv[i], cv[i], kv[i])
    return out


def g_agg_slope_array(x, c, k):
    cdef const double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    cdef const double[::1] cv = np.ascontiguousarray(np.broadcast_to(c, (xv.shape[0],)), dtype=np.float64)
    cdef const double[::1] kv = np.ascontiguousarray(np.broadcast_to(k, (xv.shape[0],)), dtype=np.float64)
    out = np.empty(xv.shape[0])
    cdef double[::1] ov = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(xv.shape[0]):
            ov[i] = _g_agg_slope(xv[i], cv[i], kv[i])
    return out


def apc_clip(const double[::1] dev, const double[::1] weights, const long long[::1] state_index,
             const long long[::1] state_counts, double delta):
    cdef Py_ssize_t n = dev.shape[0]
    cdef Py_ssize_t m = state_counts.shape[0]
    cdef Py_ssize_t i
    cdef long long s
    cdef double b, bp, a
    total_arr = np.zeros(m)
    bound_arr = np.empty(n)
    clipped_arr = np.empty(n)
    cdef double[::1] total = total_arr
    cdef double[::1] bound = bound_arr
    cdef double[::1] clipped = clipped_arr
    with nogil:
        for i in range(n):
            total[state_index[i]] += weights[i] * fabs(dev[i])
        for i in range(n):
            s = state_index[i]
            a = fabs(dev[i])
            b = state_counts[s] * delta - (total[s] - a)
            bound[i] = b
            bp = fmax(b, 0.0)
            clipped[i] = _clip(dev[i], -bp, bp)
    return bound_arr, clipped_arr


cdef void _aggregates(const double[::1] log_r, const long long[::1] traj_index, const long long[::1] traj_len,
                      double[::1] lp, double[::1] lm) noexcept nogil:
    cdef Py_ssize_t i
    cdef Py_ssize_t n = log_r.shape[0]
    cdef Py_ssize_t m = traj_len.shape[0]
    for i in range(m):
        lp[i] = 0.0
        lm[i] = 0.0
    for i in range(n):
        if log_r[i] > 0.0:
            lp[traj_index[i]] += log_r[i]
        elif log_r[i] < 0.0:
            lm[traj_index[i]] += -log_r[i]
    for i in range(m):
        lp[i] = lp[i] / traj_len[i]
        lm[i] = lm[i] / traj_len[i]


def fiberpo_forward(const double[::1] log_r, const long long[::1] traj_index, const long long[::1] traj_len,
                    const double[::1] slope, double c_plus, double c_minus, double eps):
    cdef Py_ssize_t n = log_r.shape[0]
    cdef Py_ssize_t m = traj_len.shape[0]
    cdef Py_ssize_t i
    cdef long long t
    cdef double lab, own, other
    lp_arr = np.empty(m)
    lm_arr = np.empty(m)
    logw_arr = np.empty(m)
    label_arr = np.empty(n)
    u_arr = np.empty(n)
    v_arr = np.empty(n)
    fib_arr = np.empty(n)
    gate_arr = np.empty(n)
    cdef double[::1] lp = lp_arr
    cdef double[::1] lm = lm_arr
    cdef double[::1] logw = logw_arr
    cdef double[::1] label = label_arr
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef double[::1] fib = fib_arr
    cdef double[::1] gate = gate_arr
    with nogil:
        _aggregates(log_r, traj_index, traj_len, lp, lm)
        for i in range(m):
            logw[i] = _g_agg(lp[i], c_plus, slope[i]) - _g_agg(lm[i], c_minus, slope[i])
        for i in range(n):
            t = traj_index[i]
            if log_r[i] >= 0.0:
                lab = 1.0
                own = lp[t]
                other = lm[t]
            else:
                lab = -1.0
                own = lm[t]
                other = lp[t]
            label[i] = lab
            u[i] = lab * log_r[i] - own
            v[i] = -other
            fib[i] = _clip(lab * u[i], -eps, eps) - _clip(lab * v[i], -eps, eps)
            gate[i] = logw[t] + fib[i]
    return {
        "log_s_plus": lp_arr,
        "log_s_minus": lm_arr,
        "log_w": logw_arr,
        "label": label_arr,
        "residual": u_arr,
        "opposite": v_arr,
        "log_fiber": fib_arr,
        "log_gate": gate_arr,
    }


def fiberpo_jacobian(const double[::1] log_r, const long long[::1] traj_index, const long long[::1] traj_len,
                     const double[::1] slope, double c_plus, double c_minus, double eps):
    f = fiberpo_forward(log_r, traj_index, traj_len, slope, c_plus, c_minus, eps)
    cdef double[::1] lp = f["log_s_plus"]
    cdef double[::1] lm = f["log_s_minus"]
    cdef double[::1] label = f["label"]
    cdef double[::1] u = f["residual"]
    cdef double[::1] v = f["opposite"]
    cdef double[::1] lgate = f["log_gate"]
    cdef Py_ssize_t n = log_r.shape[0]
    cdef Py_ssize_t i, j
    cdef long long t
    cdef double gi, gam, au, av, br, inv_len
    out = np.zeros((n, n))
    cdef double[:, ::1] J = out
    with nogil:
        for i in range(n):
            t = traj_index[i]
            gi = exp(lgate[i])
            au = 1.0 if fabs(u[i]) <= eps else 0.0
            av = 1.0 if fabs(v[i]) <= eps else 0.0
            inv_len = 1.0 / traj_len[t]
            for j in range(n):
                if traj_index[j] != t:
                    continue
                if label[j] > 0.0:
                    gam = _g_agg_slope(lp[t], c_plus, slope[t])
                else:
                    gam = _g_agg_slope(lm[t], c_minus, slope[t])
                br = gam
                if label[i] == label[j]:
                    br = br - au
                else:
                    br = br - av
                br = br * inv_len
                if i == j:
                    br = br + au
                J[i, j] = gi / exp(log_r[j]) * br
    return out
