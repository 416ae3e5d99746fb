"""Hot numeric kernels: fixed-step integration and control rollouts.

Every kernel exists twice: a plain-Python/numpy implementation and the
same function compiled with numba.  The environment variable
``ODELEARN_NUMBA=0`` forces the fallback path (useful for debugging and
for the benchmark comparing both); by default numba is used when
importable.  ``benchmarks/bench_kernels.py`` times the two paths.
"""

from __future__ import annotations

import math
import os

import numpy as np

SYS_DUFFING = 0
SYS_TANK = 1
SYS_CARTPOLE = 2

OP_IDENTITY = 0
OP_SIN = 1
OP_COS = 2
OP_SQUARE = 3
OP_CUBE = 4
OP_SQRT_SMOOTH = 5
OP_EXP = 6
OP_TANH = 7

OP_CODES = {
    "identity": OP_IDENTITY,
    "sin": OP_SIN,
    "cos": OP_COS,
    "square": OP_SQUARE,
    "cube": OP_CUBE,
    "sqrt_smooth": OP_SQRT_SMOOTH,
    "exp": OP_EXP,
    "tanh": OP_TANH,
}

_SQRT_EPS2 = 1e-12  # matches autodiff.SQRT_EPS ** 2
BLOWUP_LIMIT = 1e9


def _use_numba():
    flag = os.environ.get("ODELEARN_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USE_NUMBA = _use_numba()


def _rhs(sys_id, params, x, u, t, out):
    if sys_id == SYS_DUFFING:
        b1, b2, b3, b4, w0 = params[0], params[1], params[2], params[3], params[4]
        out[0] = x[1]
        out[1] = b1 * x[1] + b2 * x[0] + b3 * x[0] ** 3 - b4 * math.cos(w0 * t)
    elif sys_id == SYS_TANK:
        k1, k2, k3, k4 = params[0], params[1], params[2], params[3]
        s1 = (x[0] * x[0] + _SQRT_EPS2) ** 0.25
        s2 = (x[1] * x[1] + _SQRT_EPS2) ** 0.25
        out[0] = -k1 * s1 + k4 * u[0]
        out[1] = k2 * s1 - k3 * s2
    else:  # SYS_CARTPOLE, theta = 0 upright
        mc, mp, length, grav, umax = params[0], params[1], params[2], params[3], params[4]
        force = u[0]
        if force > umax:
            force = umax
        elif force < -umax:
            force = -umax
        th, thd = x[2], x[3]
        sth, cth = math.sin(th), math.cos(th)
        total = mc + mp
        denom = length * (total - mp * cth * cth)
        thdd = (total * grav * sth - force * cth - mp * length * thd * thd * sth * cth) / denom
        xdd = (force + mp * length * (thd * thd * sth - thdd * cth)) / total
        out[0] = x[1]
        out[1] = xdd
        out[2] = thd
        out[3] = thdd


def _integrate_steps(sys_id, params, x0, u_half, dt, euler, w_over,
                     clip_lo, clip_hi):
    """Fixed-step integration with per-step additive process noise.

    u_half holds the input at half-step resolution (2*n_steps + 1 rows);
    w_over holds the already-scaled noise term added to the right-hand
    side, one row per step.  Returns (states, status, n_done) with status
    1 on blow-up.
    """
    n_steps = w_over.shape[0]
    n = x0.shape[0]
    states = np.empty((n_steps + 1, n))
    x = np.empty(n)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xs = np.empty(n)
    for j in range(n):
        x[j] = x0[j]
        states[0, j] = x0[j]
    for i in range(n_steps):
        t = i * dt
        _rhs(sys_id, params, x, u_half[2 * i], t, k1)
        for j in range(n):
            k1[j] += w_over[i, j]
        if euler:
            for j in range(n):
                x[j] = x[j] + dt * k1[j]
        else:
            for j in range(n):
                xs[j] = x[j] + 0.5 * dt * k1[j]
            _rhs(sys_id, params, xs, u_half[2 * i + 1], t + 0.5 * dt, k2)
            for j in range(n):
                k2[j] += w_over[i, j]
                xs[j] = x[j] + 0.5 * dt * k2[j]
            _rhs(sys_id, params, xs, u_half[2 * i + 1], t + 0.5 * dt, k3)
            for j in range(n):
                k3[j] += w_over[i, j]
                xs[j] = x[j] + dt * k3[j]
            _rhs(sys_id, params, xs, u_half[2 * i + 2], t + dt, k4)
            for j in range(n):
                k4[j] += w_over[i, j]
                x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for j in range(n):
            if clip_lo[j] > -1e300 and x[j] < clip_lo[j]:
                x[j] = clip_lo[j]
            if clip_hi[j] < 1e300 and x[j] > clip_hi[j]:
                x[j] = clip_hi[j]
        bad = False
        for j in range(n):
            if not math.isfinite(x[j]) or abs(x[j]) > BLOWUP_LIMIT:
                bad = True
        if bad:
            return states, 1, i
        for j in range(n):
            states[i + 1, j] = x[j]
    return states, 0, n_steps


def _apply_op(code, v):
    if code == OP_IDENTITY:
        return v
    if code == OP_SIN:
        return math.sin(v)
    if code == OP_COS:
        return math.cos(v)
    if code == OP_SQUARE:
        return v * v
    if code == OP_CUBE:
        return v * v * v
    if code == OP_SQRT_SMOOTH:
        return (v * v + _SQRT_EPS2) ** 0.25
    if code == OP_EXP:
        return math.exp(v)
    return math.tanh(v)


def _odenet_rhs(w1, w2, w3, w4, delta, opcodes, n_state, n_in, use_time,
                omega, x, u, t, out):
    O1 = w1.shape[3]
    z = np.empty(O1)
    z[0] = 1.0
    idx = 1
    for j in range(n_state):
        z[idx] = x[j]
        idx += 1
    for j in range(n_in):
        z[idx] = u[j]
        idx += 1
    if use_time == 1:
        z[idx] = t
        idx += 1
    if omega > 0.0:
        z[idx] = math.sin(omega * t)
        z[idx + 1] = math.cos(omega * t)
        idx += 2
    nn = w1.shape[0]
    n_br = w1.shape[1]
    K = w1.shape[2]
    o = np.empty(nn + 1)
    o[0] = 1.0
    for jn in range(nn):
        prod = 1.0
        for i in range(n_br):
            s = w2[jn, i, K]
            for k in range(K):
                arg = 0.0
                for l in range(O1):
                    arg += w1[jn, i, k, l] * z[l]
                s += w2[jn, i, k] * _apply_op(opcodes[k], arg)
            prod *= s
        o[1 + jn] = prod
    for d in range(w3.shape[0]):
        num = 0.0
        den = 0.0
        for jn in range(nn + 1):
            num += w3[d, jn] * o[jn]
            den += w4[d, jn] * o[jn]
        out[d] = num / den if den > delta else 0.0


def _cartpole_plan_cost(params, x0, plan, steps_per_u, dt, effort_w):
    """Mean |theta| over an input plan applied to the true cart-pole (RK4)."""
    n = 4
    x = np.empty(n)
    for j in range(n):
        x[j] = x0[j]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xs = np.empty(n)
    u = np.empty(1)
    cost = 0.0
    count = 0
    t = 0.0
    for m in range(plan.shape[0]):
        u[0] = plan[m]
        for _s in range(steps_per_u):
            _rhs(SYS_CARTPOLE, params, x, u, t, k1)
            for j in range(n):
                xs[j] = x[j] + 0.5 * dt * k1[j]
            _rhs(SYS_CARTPOLE, params, xs, u, t + 0.5 * dt, k2)
            for j in range(n):
                xs[j] = x[j] + 0.5 * dt * k2[j]
            _rhs(SYS_CARTPOLE, params, xs, u, t + 0.5 * dt, k3)
            for j in range(n):
                xs[j] = x[j] + dt * k3[j]
            _rhs(SYS_CARTPOLE, params, xs, u, t + dt, k4)
            for j in range(n):
                x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            t += dt
            bad = False
            for j in range(n):
                if not math.isfinite(x[j]) or abs(x[j]) > 1e6:
                    bad = True
            if bad:
                return 1e6
            cost += abs(x[2])
            count += 1
    total = cost / count
    for m in range(plan.shape[0]):
        total += effort_w * plan[m] * plan[m]
    return total


def _odenet_plan_cost(w1, w2, w3, w4, delta, opcodes, n_state, n_in, use_time,
                      omega, x0, plan, steps_per_u, dt, t_start, effort_w):
    """Mean |theta| over an input plan rolled out on a learned network (RK4)."""
    n = n_state
    x = np.empty(n)
    for j in range(n):
        x[j] = x0[j]
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    xs = np.empty(n)
    u = np.empty(1)
    cost = 0.0
    count = 0
    t = t_start
    for m in range(plan.shape[0]):
        u[0] = plan[m]
        for _s in range(steps_per_u):
            _odenet_rhs(w1, w2, w3, w4, delta, opcodes, n_state, n_in, use_time, omega, x, u, t, k1)
            for j in range(n):
                xs[j] = x[j] + 0.5 * dt * k1[j]
            _odenet_rhs(w1, w2, w3, w4, delta, opcodes, n_state, n_in, use_time, omega, xs, u, t + 0.5 * dt, k2)
            for j in range(n):
                xs[j] = x[j] + 0.5 * dt * k2[j]
            _odenet_rhs(w1, w2, w3, w4, delta, opcodes, n_state, n_in, use_time, omega, xs, u, t + 0.5 * dt, k3)
            for j in range(n):
                xs[j] = x[j] + dt * k3[j]
            _odenet_rhs(w1, w2, w3, w4, delta, opcodes, n_state, n_in, use_time, omega, xs, u, t + dt, k4)
            for j in range(n):
                x[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
            t += dt
            bad = False
            for j in range(n):
                if not math.isfinite(x[j]) or abs(x[j]) > 1e6:
                    bad = True
            if bad:
                return 1e6
            cost += abs(x[2])
            count += 1
    total = cost / count
    for m in range(plan.shape[0]):
        total += effort_w * plan[m] * plan[m]
    return total


if USE_NUMBA:
    from numba import njit

    _rhs = njit(cache=True)(_rhs)
    _apply_op = njit(cache=True)(_apply_op)
    _odenet_rhs = njit(cache=True)(_odenet_rhs)
    integrate_steps = njit(cache=True)(_integrate_steps)
    cartpole_plan_cost = njit(cache=True)(_cartpole_plan_cost)
    odenet_plan_cost = njit(cache=True)(_odenet_plan_cost)
else:
    integrate_steps = _integrate_steps
    cartpole_plan_cost = _cartpole_plan_cost
    odenet_plan_cost = _odenet_plan_cost


def pack_single_layer(net):
    """Pack a single-layer OdeNetwork into rectangular kernel arrays."""
    if len(net.layers) != 1:
        raise ValueError("kernel path supports single hidden layer networks only")
    if net.noise_mode == "input":
        raise ValueError("kernel path expects additive-noise networks")
    layer = net.layers[0]
    w1 = np.stack([n.w1 for n in layer])
    w2 = np.stack([n.w2 for n in layer])
    opcodes = np.array([OP_CODES[name] for name in net.ops.names], dtype=np.int64)
    omega = net.time_omega if net.time_omega is not None else -1.0
    return (w1, w2, net.w3.copy(), net.w4.copy(), net.delta, opcodes,
            net.n_state, net.n_in, 1 if net.use_time else 0, omega)
