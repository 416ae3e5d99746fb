"""Continuous-time extended Kalman-Bucy filtering.

The filter is defined by coupled mean and covariance ODEs with the
system relinearized at every new mean estimate.  It serves two roles:
the right-hand sides feed the filter-constrained training losses, and
`run_filter` integrates them classically to act as a validation oracle.

Note on noise semantics: `NoiseModel` holds whatever covariances the
caller works with.  `run_filter` treats Q and R as continuous-time
intensities (that is what the covariance ODE and its Riccati fixed
point assume); the data synthesis in `dynamics` treats R as a
per-sample measurement variance, matching how benchmark data is
usually specified.  Convert with R_intensity = R_sample * dt when
feeding sampled data to the filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class FilterConfigError(ValueError):
    """The filter cannot be built: bad covariance or singular Rhat."""


class FilterDivergence(RuntimeError):
    def __init__(self, t, norm):
        super().__init__(f"covariance blow-up at t={t:.6g} (|P|_inf={norm:.3g})")
        self.t = t


@dataclass
class NoiseModel:
    """Process and measurement noise covariances."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        for name, M in (("Q", self.Q), ("R", self.R)):
            if not np.allclose(M, M.T, atol=1e-12):
                raise FilterConfigError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(M)) < -1e-12:
                raise FilterConfigError(f"{name} must be positive semidefinite")

    def require_pd_r(self):
        try:
            np.linalg.cholesky(self.R)
        except np.linalg.LinAlgError:
            raise FilterConfigError("R must be positive definite for filtering")


@dataclass
class LinearizedSystem:
    A: np.ndarray
    G: np.ndarray
    C: np.ndarray
    V: np.ndarray
    Qhat: np.ndarray
    Rhat: np.ndarray


@dataclass
class FilterState:
    xhat: np.ndarray
    P: np.ndarray
    t: float


@dataclass
class FilterConfig:
    substeps: int = 4
    p_norm_limit: float = 1e9
    record_innovations: bool = True


@dataclass
class FilterRun:
    states: list
    gains: list = field(default_factory=list)
    innovations: list = field(default_factory=list)
    output_cov: list = field(default_factory=list)


def linearize(model, xhat, u, t):
    """Jacobians of f and g at (xhat, u, 0, t), with the mapped noise covariances."""
    n, q = model.n, model.q
    x_nodes = [ad.var(v) for v in np.asarray(xhat, dtype=np.float64)]
    w_nodes = [ad.var(0.0) for _ in range(n)]
    v_nodes = [ad.var(0.0) for _ in range(q)]
    u = list(np.atleast_1d(np.asarray(u, dtype=np.float64))) if model.p else []

    f_out = [ad.lift(fi) for fi in model.f(x_nodes, u, w_nodes, t)]
    g_out = [ad.lift(gi) for gi in model.g(x_nodes, u, v_nodes, t)]
    A = ad.jacobian(f_out, x_nodes)
    G = ad.jacobian(f_out, w_nodes)
    C = ad.jacobian(g_out, x_nodes)
    V = ad.jacobian(g_out, v_nodes)
    Qhat = G @ model.noise.Q @ G.T
    Rhat = V @ model.noise.R @ V.T
    if np.linalg.matrix_rank(Rhat) < q:
        raise FilterConfigError(f"Rhat is singular at t={t:.6g}")
    return LinearizedSystem(A=A, G=G, C=C, V=V, Qhat=Qhat, Rhat=Rhat)


def kalman_gain(P, C, Rhat):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    Rhat = np.atleast_2d(np.asarray(Rhat, dtype=np.float64))
    try:
        return np.linalg.solve(Rhat.T, (P @ C.T).T).T
    except np.linalg.LinAlgError:
        raise FilterConfigError("Rhat is singular in the gain computation")


def mean_rhs(model, xhat, u, ybar, K, t):
    xhat = np.asarray(xhat, dtype=np.float64)
    zeros_w = np.zeros(model.n)
    zeros_v = np.zeros(model.q)
    u = list(np.atleast_1d(np.asarray(u, dtype=np.float64))) if model.p else []
    f0 = np.asarray(model.f(list(xhat), u, list(zeros_w), t), dtype=np.float64)
    g0 = np.asarray(model.g(list(xhat), u, list(zeros_v), t), dtype=np.float64)
    return f0 + np.atleast_2d(K) @ (np.atleast_1d(ybar) - g0)


def cov_rhs(A, P, K, C, Qhat):
    A = np.atleast_2d(A)
    P = np.atleast_2d(P)
    K = np.atleast_2d(K)
    C = np.atleast_2d(C)
    Qhat = np.atleast_2d(Qhat)
    return A @ P + P @ A.T - K @ C @ P + Qhat


def _symmetrize_floor(P):
    P = 0.5 * (P + P.T)
    w = np.linalg.eigvalsh(P)
    if w[0] < 0.0:
        w, U = np.linalg.eigh(P)
        P = (U * np.clip(w, 0.0, None)) @ U.T
        P = 0.5 * (P + P.T)
    return P


def run_filter(model, dataset, x0, P0, config=None):
    """Integrate the mean/covariance ODEs over a dataset (ZOH measurements).

    Emits a FilterState at every measurement time; additionally records
    the gain, the pre-update innovation ybar - g(xhat), and the output
    covariance C P C^T at each emission.
    """
    cfg = config or FilterConfig()
    model.noise.require_pd_r()
    times = np.asarray(dataset.times, dtype=np.float64)
    ys = np.atleast_2d(np.asarray(dataset.measurements, dtype=np.float64))
    if ys.shape[0] != times.shape[0]:
        ys = ys.T
    us = np.asarray(dataset.inputs, dtype=np.float64)
    if us.size == 0:
        us = np.zeros((len(times), 0))

    x = np.asarray(x0, dtype=np.float64).copy()
    P = _symmetrize_floor(np.atleast_2d(np.asarray(P0, dtype=np.float64)).copy())
    run = FilterRun(states=[])

    def emit(t_i, y_i, u_i):
        lin = linearize(model, x, u_i, t_i)
        K = kalman_gain(P, lin.C, lin.Rhat)
        zeros_v = np.zeros(model.q)
        g0 = np.asarray(model.g(list(x), list(u_i) if model.p else [], list(zeros_v), t_i),
                        dtype=np.float64)
        run.states.append(FilterState(xhat=x.copy(), P=P.copy(), t=float(t_i)))
        run.gains.append(K)
        run.innovations.append(y_i - g0)
        run.output_cov.append(lin.C @ P @ lin.C.T)

    def rhs(xc, Pc, y_i, u_i, t_c):
        lin = linearize(model, xc, u_i, t_c)
        K = kalman_gain(Pc, lin.C, lin.Rhat)
        dx = mean_rhs(model, xc, u_i, y_i, K, t_c)
        dP = cov_rhs(lin.A, Pc, K, lin.C, lin.Qhat)
        return dx, dP

    emit(times[0], ys[0], us[0])
    for i in range(len(times) - 1):
        y_i, u_i = ys[i], us[i]
        h = (times[i + 1] - times[i]) / cfg.substeps
        t_c = times[i]
        for _ in range(cfg.substeps):
            dx1, dP1 = rhs(x, P, y_i, u_i, t_c)
            dx2, dP2 = rhs(x + 0.5 * h * dx1, P + 0.5 * h * dP1, y_i, u_i, t_c + 0.5 * h)
            dx3, dP3 = rhs(x + 0.5 * h * dx2, P + 0.5 * h * dP2, y_i, u_i, t_c + 0.5 * h)
            dx4, dP4 = rhs(x + h * dx3, P + h * dP3, y_i, u_i, t_c + h)
            x = x + h / 6.0 * (dx1 + 2 * dx2 + 2 * dx3 + dx4)
            P = _symmetrize_floor(P + h / 6.0 * (dP1 + 2 * dP2 + 2 * dP3 + dP4))
            t_c += h
            norm = np.max(np.abs(P))
            if not np.isfinite(norm) or norm > cfg.p_norm_limit:
                raise FilterDivergence(t_c, norm)
        emit(times[i + 1], ys[i + 1], us[i + 1])
    return run
