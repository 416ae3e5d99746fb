"""Benchmark systems, fixed-step integration, dataset synthesis, metrics.

System right-hand sides are written with dispatchable math so the same
function serves numpy simulation and graph-based linearization.  Named
systems carry a kernel id; `integrate` then uses the compiled stepping
kernel unless ``ODELEARN_NUMBA=0``.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .ekbf import NoiseModel

BLOWUP_LIMIT = 1e9


class BlowUpError(RuntimeError):
    def __init__(self, t, norm):
        super().__init__(f"state blow-up at t={t:.6g} (|x|={norm:.3g})")
        self.t = t


@dataclass
class StateSpaceModel:
    """Pair of vector maps xdot = f(x, u, w, t), y = g(x, u, v, t)."""

    f: callable
    g: callable
    n: int
    p: int
    q: int
    noise: NoiseModel
    name: str = ""
    params: dict = field(default_factory=dict)
    kernel_id: int | None = None
    kernel_params: np.ndarray | None = None
    state_clip: tuple | None = None  # (lo, hi) arrays or None

    def with_noise(self, Q=None, R=None):
        noise = NoiseModel(Q=self.noise.Q if Q is None else Q,
                           R=self.noise.R if R is None else R)
        return StateSpaceModel(f=self.f, g=self.g, n=self.n, p=self.p, q=self.q,
                               noise=noise, name=self.name, params=dict(self.params),
                               kernel_id=self.kernel_id, kernel_params=self.kernel_params,
                               state_clip=self.state_clip)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray   # (N, n)
    inputs: np.ndarray   # (N, p)
    outputs: np.ndarray  # (N, q)

    def __post_init__(self):
        N = len(self.times)
        if not (len(self.states) == len(self.inputs) == len(self.outputs) == N):
            raise ValueError("trajectory arrays must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must be strictly increasing")


@dataclass
class Dataset:
    times: np.ndarray
    inputs: np.ndarray        # (N, p)
    measurements: np.ndarray  # (N, q)
    x0: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("dataset times must be sorted strictly increasing")
        if len(self.measurements) != len(self.times):
            raise ValueError("measurement count must match times")


# ---------------------------------------------------------------------------
# input signals
# ---------------------------------------------------------------------------


@dataclass
class InputSignal:
    """Reproducible scalar input signal u(t) of one of a few kinds."""

    kind: str = "constant"                 # constant | multisine | random_hold | zero
    value: float = 0.0
    amplitudes: tuple = ()
    frequencies: tuple = ()
    phases: tuple = ()
    offset: float = 0.0
    bound: float = 1.0
    hold_dt: float = 0.1
    seed: int = 0
    _table: np.ndarray | None = None

    def at(self, t):
        if self.kind == "zero":
            return 0.0
        if self.kind == "constant":
            return self.value
        if self.kind == "multisine":
            u = self.offset
            for a, f, ph in zip(self.amplitudes, self.frequencies, self.phases):
                u = u + a * np.sin(2 * np.pi * f * t + ph)
            return u
        if self.kind == "random_hold":
            idx = int(np.floor(t / self.hold_dt))
            table = self._hold_table(idx + 1)
            return table[idx]
        raise ValueError(f"unknown input signal kind {self.kind!r}")

    def _hold_table(self, size):
        if self._table is None or len(self._table) < size:
            rng = np.random.default_rng(np.random.SeedSequence(self.seed))
            self._table = rng.uniform(-self.bound, self.bound, size=max(size, 1024))
        return self._table

    def sample(self, times):
        return np.array([self.at(t) for t in np.asarray(times)])

    def describe(self):
        if self.kind == "constant":
            return f"constant({self.value})"
        if self.kind == "multisine":
            return f"multisine(offset={self.offset}, n={len(self.amplitudes)})"
        if self.kind == "random_hold":
            return f"random_hold(bound={self.bound}, hold={self.hold_dt}, seed={self.seed})"
        return self.kind


def constant_input(value):
    return InputSignal(kind="constant", value=value)


def zero_input():
    return InputSignal(kind="zero")


def multisine_input(amplitudes, frequencies, phases=None, offset=0.0):
    phases = tuple(phases) if phases is not None else tuple(0.0 for _ in amplitudes)
    return InputSignal(kind="multisine", amplitudes=tuple(amplitudes),
                       frequencies=tuple(frequencies), phases=phases, offset=offset)


def random_hold_input(bound, hold_dt, seed):
    return InputSignal(kind="random_hold", bound=bound, hold_dt=hold_dt, seed=seed)


# ---------------------------------------------------------------------------
# benchmark systems
# ---------------------------------------------------------------------------


def duffing(b, omega0, sigma_v=0.0):
    """Driven oscillator: xdot1 = x2, xdot2 = b1 x2 + b2 x1 + b3 x1^3 - b4 cos(w0 t)."""
    b1, b2, b3, b4 = (float(v) for v in b)
    omega0 = float(omega0)

    def f(x, u, w, t):
        return [x[1] + w[0],
                b1 * x[1] + b2 * x[0] + b3 * x[0] * x[0] * x[0]
                - b4 * ad.d_cos(omega0 * t) + w[1]]

    def g(x, u, v, t):
        return [x[0] + v[0]]

    return StateSpaceModel(
        f=f, g=g, n=2, p=0, q=1,
        noise=NoiseModel(Q=np.zeros((2, 2)), R=np.array([[sigma_v ** 2]])),
        name="duffing",
        params={"b": (b1, b2, b3, b4), "omega0": omega0, "sigma_v": sigma_v},
        kernel_id=kernels.SYS_DUFFING,
        kernel_params=np.array([b1, b2, b3, b4, omega0]),
    )


def duffing_protocol_draw(rng, sigma_v=0.01, min_magnitude=0.0):
    """Benchmark protocol: magnitudes from U(0,1) with the dissipative sign
    orientation (damping, spring and cubic terms negative) so that 48 s
    trajectories stay bounded; forcing amplitude and frequency from U(0,1).

    min_magnitude rejection-samples coefficients away from zero; relative
    parameter-recovery checks need that, since a vanishing coefficient
    leaves nothing to recover at a finite noise level.
    """
    while True:
        mags = rng.uniform(0.0, 1.0, size=4)
        omega0 = rng.uniform(0.0, 1.0)
        if min(mags.min(), omega0) >= min_magnitude:
            break
    x0 = rng.uniform(0.0, 1.0, size=2)
    b = (-mags[0], -mags[1], -mags[2], mags[3])
    return duffing(b, omega0, sigma_v=sigma_v), x0


def cascaded_tank(k, sigma_v=0.0, q_process=0.0, max_level=None):
    """Two-tank cascade with smoothed square roots and nonnegative levels."""
    k1, k2, k3, k4 = (float(v) for v in k)

    def f(x, u, w, t):
        s1 = ad.d_sqrt_smooth(x[0])
        s2 = ad.d_sqrt_smooth(x[1])
        return [-k1 * s1 + k4 * u[0] + w[0],
                k2 * s1 - k3 * s2 + w[1]]

    def g(x, u, v, t):
        return [x[1] + v[0]]

    hi = max_level if max_level is not None else np.inf
    return StateSpaceModel(
        f=f, g=g, n=2, p=1, q=1,
        noise=NoiseModel(Q=q_process * np.eye(2), R=np.array([[sigma_v ** 2]])),
        name="cascaded_tank",
        params={"k": (k1, k2, k3, k4), "sigma_v": sigma_v, "max_level": max_level},
        kernel_id=kernels.SYS_TANK,
        kernel_params=np.array([k1, k2, k3, k4]),
        state_clip=(np.zeros(2), np.full(2, hi)),
    )


def cartpole(m_c=1.0, m_p=0.1, length=0.5, gravity=9.81, u_max=25.0, sigma_v=0.0):
    """Frictionless cart-pole; theta = 0 is upright, input force is clamped.

    Dynamics (point-mass pole on a massless rod, theta from the upright):
        (m_c+m_p) xdd + m_p l (thdd cos th - thd^2 sin th) = F
        l thdd + xdd cos th = g sin th
    """
    total = m_c + m_p

    def f(x, u, w, t):
        force = u[0]
        if not ad.is_node(force):
            force = float(np.clip(force, -u_max, u_max))
        th, thd = x[2], x[3]
        sth, cth = ad.d_sin(th), ad.d_cos(th)
        denom = length * (total - m_p * cth * cth)
        thdd = (total * gravity * sth - force * cth
                - m_p * length * thd * thd * sth * cth) / denom
        xdd = (force + m_p * length * (thd * thd * sth - thdd * cth)) / total
        return [x[1] + w[0], xdd + w[1], thd + w[2], thdd + w[3]]

    def g(x, u, v, t):
        return [x[i] + v[i] for i in range(4)]

    return StateSpaceModel(
        f=f, g=g, n=4, p=1, q=4,
        noise=NoiseModel(Q=np.zeros((4, 4)), R=sigma_v ** 2 * np.eye(4)),
        name="cartpole",
        params={"m_c": m_c, "m_p": m_p, "length": length, "gravity": gravity,
                "u_max": u_max, "sigma_v": sigma_v},
        kernel_id=kernels.SYS_CARTPOLE,
        kernel_params=np.array([m_c, m_p, length, gravity, u_max]),
    )


def cartpole_energy(model, x):
    """Total mechanical energy of the documented cart-pole equations."""
    m_c = model.params["m_c"]
    m_p = model.params["m_p"]
    length = model.params["length"]
    gravity = model.params["gravity"]
    xd, th, thd = x[1], x[2], x[3]
    kinetic = 0.5 * (m_c + m_p) * xd ** 2 + m_p * length * xd * thd * np.cos(th) \
        + 0.5 * m_p * length ** 2 * thd ** 2
    potential = m_p * gravity * length * np.cos(th)
    return kinetic + potential


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------


def _psd_sqrt(M):
    M = np.atleast_2d(M)
    if not np.any(M):
        return np.zeros_like(M)
    w, U = np.linalg.eigh(0.5 * (M + M.T))
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def integrate(model, x0, input_signal, t_end, dt, method="rk4", noise_seed=None):
    """Fixed-step integration, with optional Euler-Maruyama process noise.

    With a noise seed, process noise enters as w = chol(Q) n / sqrt(dt)
    per step (held over the step) and measurement noise v ~ N(0, R) is
    added at each sample.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if method not in ("euler", "rk4"):
        raise ValueError(f"unknown integration method {method!r}")
    n_steps = int(round(t_end / dt))
    times = np.arange(n_steps + 1) * dt
    input_signal = input_signal or zero_input()

    if noise_seed is not None:
        ss = np.random.SeedSequence(noise_seed).spawn(2)
        rng_w = np.random.default_rng(ss[0])
        rng_v = np.random.default_rng(ss[1])
        Lq = _psd_sqrt(model.noise.Q)
        w_over = (rng_w.standard_normal((n_steps, model.n)) @ Lq.T) / np.sqrt(dt)
        Lr = _psd_sqrt(model.noise.R)
        v_samples = rng_v.standard_normal((n_steps + 1, model.q)) @ Lr.T
    else:
        w_over = np.zeros((n_steps, model.n))
        v_samples = np.zeros((n_steps + 1, model.q))

    u_half = input_signal.sample(np.arange(2 * n_steps + 1) * (dt / 2.0))
    u_half = u_half.reshape(-1, 1) if model.p else np.zeros((2 * n_steps + 1, 1))

    x0 = np.asarray(x0, dtype=np.float64)
    if model.kernel_id is not None:
        lo, hi = (model.state_clip if model.state_clip is not None
                  else (np.full(model.n, -np.inf), np.full(model.n, np.inf)))
        lo = np.where(np.isfinite(lo), lo, -1e301)
        hi = np.where(np.isfinite(hi), hi, 1e301)
        states, status, n_done = kernels.integrate_steps(
            model.kernel_id, model.kernel_params, x0, u_half, dt,
            method == "euler", w_over, lo, hi)
        if status != 0:
            raise BlowUpError((n_done + 1) * dt, np.max(np.abs(states[n_done])))
    else:
        states = _integrate_python(model, x0, u_half, dt, method, w_over)

    u_samples = u_half[::2]
    outputs = np.empty((n_steps + 1, model.q))
    for i in range(n_steps + 1):
        u_i = list(u_samples[i]) if model.p else []
        outputs[i] = np.asarray(
            model.g(list(states[i]), u_i, list(v_samples[i]), times[i]), dtype=np.float64)
    inputs = u_samples[:, :model.p] if model.p else np.zeros((n_steps + 1, 0))
    return Trajectory(times=times, states=states, inputs=inputs, outputs=outputs)


def _integrate_python(model, x0, u_half, dt, method, w_over):
    n_steps = w_over.shape[0]
    states = np.empty((n_steps + 1, model.n))
    states[0] = x0
    x = x0.copy()

    def rhs(xc, u_row, w_row, t):
        u_i = list(u_row[:model.p]) if model.p else []
        return np.asarray(model.f(list(xc), u_i, list(w_row), t), dtype=np.float64)

    for i in range(n_steps):
        t = i * dt
        w_row = w_over[i]
        k1 = rhs(x, u_half[2 * i], w_row, t)
        if method == "euler":
            x = x + dt * k1
        else:
            k2 = rhs(x + 0.5 * dt * k1, u_half[2 * i + 1], w_row, t + 0.5 * dt)
            k3 = rhs(x + 0.5 * dt * k2, u_half[2 * i + 1], w_row, t + 0.5 * dt)
            k4 = rhs(x + dt * k3, u_half[2 * i + 2], w_row, t + dt)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if model.state_clip is not None:
            x = np.clip(x, model.state_clip[0], model.state_clip[1])
        norm = np.max(np.abs(x))
        if not np.isfinite(norm) or norm > BLOWUP_LIMIT:
            raise BlowUpError(t + dt, norm)
        states[i + 1] = x
    return states


def synthesize(model, input_signal, t_end, dt, seed, method="euler",
               include_x0=True, x0=None):
    """Generate a reproducible noisy dataset from a model."""
    if x0 is None:
        x0 = np.zeros(model.n)
    traj = integrate(model, x0, input_signal, t_end, dt, method=method,
                     noise_seed=seed)
    sigma = float(np.sqrt(np.max(model.noise.R))) if model.noise.R.size else 0.0
    meta = {
        "system": model.name,
        "dt": dt,
        "t_end": t_end,
        "seed": seed,
        "sigma_v": sigma,
        "method": method,
        "input": (input_signal or zero_input()).describe(),
        "n": model.n, "p": model.p, "q": model.q,
    }
    return Dataset(times=traj.times, inputs=traj.inputs,
                   measurements=traj.outputs,
                   x0=np.asarray(x0, dtype=np.float64) if include_x0 else None,
                   meta=meta)


# ---------------------------------------------------------------------------
# metrics and identified-model simulation
# ---------------------------------------------------------------------------


def rmse(predicted, reference):
    """Root mean square of the per-sample output-vector norms."""
    a = np.asarray(predicted, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    if diff.ndim == 1:
        diff = diff[:, None]
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def simulate_identified(model, dataset, method="euler", substeps=1):
    """Open-loop simulation of a model over a dataset's time grid.

    Inputs are zero-order held between samples; noise inputs are zero;
    outputs go through the model's measurement map.
    """
    times = np.asarray(dataset.times, dtype=np.float64)
    us = np.asarray(dataset.inputs, dtype=np.float64)
    if us.size == 0:
        us = np.zeros((len(times), 0))
    if dataset.x0 is None:
        raise ValueError("dataset has no initial state and none was trained")
    x = np.asarray(dataset.x0, dtype=np.float64).copy()
    zeros_w = [0.0] * model.n
    states = np.empty((len(times), model.n))
    states[0] = x

    def rhs(xc, u_i, t):
        return np.asarray(model.f(list(xc), u_i, zeros_w, t), dtype=np.float64)

    for i in range(len(times) - 1):
        h = (times[i + 1] - times[i]) / substeps
        u_i = list(us[i][:model.p]) if model.p else []
        t = times[i]
        for _ in range(substeps):
            k1 = rhs(x, u_i, t)
            if method == "euler":
                x = x + h * k1
            else:
                k2 = rhs(x + 0.5 * h * k1, u_i, t + 0.5 * h)
                k3 = rhs(x + 0.5 * h * k2, u_i, t + 0.5 * h)
                k4 = rhs(x + h * k3, u_i, t + h)
                x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            t += h
            if model.state_clip is not None:
                x = np.clip(x, model.state_clip[0], model.state_clip[1])
            norm = np.max(np.abs(x))
            if not np.isfinite(norm) or norm > BLOWUP_LIMIT:
                raise BlowUpError(t, norm)
        states[i + 1] = x
    zeros_v = [0.0] * model.q
    outputs = np.empty((len(times), model.q))
    for i in range(len(times)):
        u_i = list(us[i][:model.p]) if model.p else []
        outputs[i] = np.asarray(model.g(list(states[i]), u_i, zeros_v, times[i]),
                                dtype=np.float64)
    inputs = us[:, :model.p] if model.p else np.zeros((len(times), 0))
    return Trajectory(times=times, states=states, inputs=inputs, outputs=outputs)


# ---------------------------------------------------------------------------
# CSV persistence
# ---------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def dataset_to_csv(ds, include_states=None):
    """CSV text: header t,u_1..u_p,y_1..y_q[,x_1..x_n], one row per sample."""
    p = ds.inputs.shape[1] if ds.inputs.ndim == 2 else 0
    q = ds.measurements.shape[1] if ds.measurements.ndim == 2 else 1
    cols = ["t"] + [f"u_{i+1}" for i in range(p)] + [f"y_{i+1}" for i in range(q)]
    n_states = 0
    if include_states is not None:
        n_states = include_states.shape[1]
        cols += [f"x_{i+1}" for i in range(n_states)]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    ys = ds.measurements if ds.measurements.ndim == 2 else ds.measurements[:, None]
    for i, t in enumerate(ds.times):
        row = [_fmt(t)]
        row += [_fmt(v) for v in ds.inputs[i]] if p else []
        row += [_fmt(v) for v in ys[i]]
        if n_states:
            row += [_fmt(v) for v in include_states[i]]
        buf.write(",".join(row) + "\n")
    return buf.getvalue()


def save_dataset(ds, path, include_states=None):
    with open(path, "w") as fh:
        fh.write(dataset_to_csv(ds, include_states=include_states))


def load_dataset(path, x0=None, meta=None):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [list(map(float, line.strip().split(","))) for line in fh if line.strip()]
    data = np.asarray(rows, dtype=np.float64)
    u_cols = [i for i, c in enumerate(header) if c.startswith("u_")]
    y_cols = [i for i, c in enumerate(header) if c.startswith("y_")]
    if header[0] != "t" or not y_cols:
        raise ValueError(f"unrecognized dataset header: {header}")
    return Dataset(times=data[:, 0],
                   inputs=data[:, u_cols] if u_cols else np.zeros((len(data), 0)),
                   measurements=data[:, y_cols],
                   x0=x0, meta=meta or {})


def save_metadata(ds, path):
    import configparser

    cp = configparser.ConfigParser()
    cp["dataset"] = {k: str(v) for k, v in ds.meta.items()}
    if ds.x0 is not None:
        cp["dataset"]["x0"] = ",".join(_fmt(v) for v in ds.x0)
    with open(path, "w") as fh:
        cp.write(fh)


def load_metadata(path):
    import configparser

    cp = configparser.ConfigParser()
    cp.read(path)
    meta = dict(cp["dataset"]) if "dataset" in cp else {}
    x0 = None
    if "x0" in meta:
        x0 = np.array([float(v) for v in meta.pop("x0").split(",")])
    return meta, x0


def load_cascaded_tank_benchmark(path):
    """Parse the public two-tank benchmark CSV (uEst,uVal,yEst,yVal,Ts layout).

    Returns (train Dataset, test Dataset) sampled at the file's Ts.
    """
    with open(path) as fh:
        header = [h.strip() for h in fh.readline().strip().split(",")]
        rows = [list(map(float, ln.strip().split(","))) for ln in fh if ln.strip()]
    data = np.asarray(rows)
    col = {name: i for i, name in enumerate(header)}
    for need in ("uEst", "uVal", "yEst", "yVal"):
        if need not in col:
            raise ValueError(f"benchmark CSV missing column {need!r}; header={header}")
    ts = data[0, col["Ts"]] if "Ts" in col else 4.0
    times = np.arange(len(data)) * ts

    def mk(ucol, ycol, split):
        return Dataset(times=times, inputs=data[:, [col[ucol]]],
                       measurements=data[:, [col[ycol]]], x0=None,
                       meta={"system": "cascaded_tank_benchmark", "dt": ts,
                             "split": split})

    return mk("uEst", "yEst", "train"), mk("uVal", "yVal", "test")
