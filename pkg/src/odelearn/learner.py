"""Training framework: four networks under a filter-constrained loss.

A smooth mean network xi(t) and a covariance-factor network (psi = L L^T)
represent the state estimate; a state network and an output network
represent the unknown dynamics and measurement maps.  The loss couples
them: a Gaussian likelihood on the measurements, consistency of the mean
and covariance time derivatives with the filter ODEs (obtained by nested
automatic differentiation and per-point linearization), and sparsity
regularization on the equation-learner weights.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import dynamics
from .eqlnet import OdeNetwork, reg_r0

SIGMA_FLOOR = 1e-8


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# network building blocks
# ---------------------------------------------------------------------------


@dataclass
class Mlp:
    """Fully connected network with tanh hidden activations (C^inf smooth)."""

    weights: list
    biases: list

    def forward(self, inputs, params=None):
        h = list(inputs)
        L = len(self.weights)
        for li in range(L):
            W = params[f"w{li}"] if params else self.weights[li]
            b = params[f"b{li}"] if params else self.biases[li]
            out = []
            for j in range(W.shape[0]):
                pre = ad.dot(list(W[j]) + [b[j]], h + [1.0])
                out.append(ad.d_tanh(pre) if li < L - 1 else pre)
            h = out
        return h

    def eval_numpy(self, x):
        h = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if h.ndim == 1 and len(self.weights) and self.weights[0].shape[1] == 1:
            h = h[None, :] if h.shape[0] != 1 else h.reshape(1, -1)
        for li, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = W @ h + (b[:, None] if h.ndim == 2 else b)
            if li < len(self.weights) - 1:
                h = np.tanh(h)
        return h

    def param_items(self):
        items = []
        for li, (W, b) in enumerate(zip(self.weights, self.biases)):
            items.append((f"w{li}", W, np.zeros(W.shape, dtype=bool)))
            items.append((f"b{li}", b, np.zeros(b.shape, dtype=bool)))
        return items

    def to_dict(self):
        return {"format": "mlp-v1",
                "weights": [w.tolist() for w in self.weights],
                "biases": [b.tolist() for b in self.biases]}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "mlp-v1":
            raise ValueError("not an mlp-v1 record")
        return cls(weights=[np.array(w) for w in d["weights"]],
                   biases=[np.array(b) for b in d["biases"]])


def make_mlp(sizes, rng, out_bias=None, out_scale=None):
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    if out_scale is not None:
        weights[-1] *= out_scale
    if out_bias is not None:
        biases[-1][:] = out_bias
    return Mlp(weights=weights, biases=biases)


@dataclass
class TimeFeatureNet:
    """Mlp over [t_norm, sin(w t), cos(w t), ...] features of physical time.

    Oscillatory trajectories are hard for a plain tanh network (spectral
    bias); harmonic features at the dominant measured frequencies make
    the fit converge orders of magnitude faster.  All features are smooth
    in t, so nested time differentiation stays exact.
    """

    mlp: Mlp
    omegas: tuple
    t0: float
    t_scale: float

    def forward_time(self, t_node, params=None):
        tn = (t_node - self.t0) * (1.0 / self.t_scale)
        feats = [tn]
        for w in self.omegas:
            wt = w * t_node
            feats += [ad.d_sin(wt), ad.d_cos(wt)]
        return self.mlp.forward(feats, params=params)

    def eval_numpy(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        rows = [(t - self.t0) / self.t_scale]
        for w in self.omegas:
            rows += [np.sin(w * t), np.cos(w * t)]
        return self.mlp.eval_numpy(np.stack(rows))

    @property
    def biases(self):
        return self.mlp.biases

    def param_items(self):
        return self.mlp.param_items()

    def to_dict(self):
        return {"format": "tfnet-v1", "mlp": self.mlp.to_dict(),
                "omegas": list(self.omegas), "t0": self.t0,
                "t_scale": self.t_scale}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "tfnet-v1":
            raise ValueError("not a tfnet-v1 record")
        return cls(mlp=Mlp.from_dict(d["mlp"]), omegas=tuple(d["omegas"]),
                   t0=d["t0"], t_scale=d["t_scale"])


def make_time_feature_net(n_out, omegas, t0, t_scale, hidden=(32, 32), rng=None,
                          out_scale=None):
    rng = rng if rng is not None else np.random.default_rng(0)
    n_in = 1 + 2 * len(omegas)
    mlp = make_mlp((n_in,) + tuple(hidden) + (n_out,), rng, out_scale=out_scale)
    return TimeFeatureNet(mlp=mlp, omegas=tuple(omegas), t0=t0, t_scale=t_scale)


@dataclass
class AffineOutput:
    """Measurement map y = C x + c0 + v."""

    C: np.ndarray
    c0: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        self.c0 = np.atleast_1d(np.asarray(self.c0, dtype=np.float64))

    @property
    def n_out(self):
        return self.C.shape[0]

    def forward(self, x, u=(), w=None, t=0.0, params=None):
        C = params["C"] if params else self.C
        c0 = params["c0"] if params else self.c0
        out = [ad.dot(list(C[j]), list(x)) + c0[j] for j in range(self.C.shape[0])]
        if w is not None:
            out = [o + wi for o, wi in zip(out, w)]
        return out

    def jacobian_entries(self, params=None):
        return params["C"] if params is not None else self.C

    def param_items(self):
        frozen = not self.trainable
        return [("C", self.C, np.full(self.C.shape, frozen, dtype=bool)),
                ("c0", self.c0, np.full(self.c0.shape, frozen, dtype=bool))]

    def to_dict(self):
        return {"format": "affine-v1", "C": self.C.tolist(),
                "c0": self.c0.tolist(), "trainable": self.trainable}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "affine-v1":
            raise ValueError("not an affine-v1 record")
        return cls(C=np.array(d["C"]), c0=np.array(d["c0"]),
                   trainable=d["trainable"])


def _duffing_template(x, u, w, t, p):
    return [x[1] + w[0],
            p["b1"] * x[1] + p["b2"] * x[0] + p["b3"] * x[0] * x[0] * x[0]
            - p["b4"] * ad.d_cos(p["omega0"] * t) + w[1]]


def _tank_template(x, u, w, t, p):
    s1 = ad.d_sqrt_smooth(x[0])
    s2 = ad.d_sqrt_smooth(x[1])
    return [-p["k1"] * s1 + p["k4"] * u[0] + w[0],
            p["k2"] * s1 - p["k3"] * s2 + w[1]]


TEMPLATES = {
    "duffing": {"fn": _duffing_template, "n": 2, "p": 0,
                "names": ("b1", "b2", "b3", "b4", "omega0")},
    "cascaded_tank": {"fn": _tank_template, "n": 2, "p": 1,
                      "names": ("k1", "k2", "k3", "k4")},
}


@dataclass
class ParametricModel:
    """Known dynamics structure with named trainable coefficients."""

    template: str
    values: dict
    frozen: set = field(default_factory=set)

    def __post_init__(self):
        if self.template not in TEMPLATES:
            raise ValueError(f"unknown template {self.template!r}")
        self.values = {k: np.asarray(float(v)) for k, v in self.values.items()}
        missing = set(TEMPLATES[self.template]["names"]) - set(self.values)
        if missing:
            raise ValueError(f"template {self.template!r} missing values for {missing}")

    @property
    def n_state(self):
        return TEMPLATES[self.template]["n"]

    def forward(self, x, u=(), w=None, t=0.0, params=None):
        if w is None:
            w = [0.0] * self.n_state
        if params is not None:
            p = {k: params[k][()] for k in self.values}
        else:
            p = {k: float(v) for k, v in self.values.items()}
        return TEMPLATES[self.template]["fn"](x, u, w, t, p)

    def param_items(self):
        return [(k, self.values[k], np.full((), k in self.frozen, dtype=bool))
                for k in sorted(self.values)]

    def to_dict(self):
        return {"format": "parametric-v1", "template": self.template,
                "values": {k: float(v) for k, v in self.values.items()},
                "frozen": sorted(self.frozen)}

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "parametric-v1":
            raise ValueError("not a parametric-v1 record")
        return cls(template=d["template"], values=d["values"],
                   frozen=set(d["frozen"]))


@dataclass
class LearnerNetworks:
    mean_net: Mlp
    cov_net: Mlp
    state_net: object   # OdeNetwork | ParametricModel
    output_net: object  # AffineOutput | OdeNetwork


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    alpha4: float = 0.1
    alpha41: float = 1.0
    alpha42: float = 1.0
    a: tuple = (1.0, 10.0, 5.0, 0.01)
    delta: float = 1e-3

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "alpha41", "alpha42"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.delta <= 0:
            raise ValueError("delta must be positive")


@dataclass
class LearnerConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    epochs: int = 200
    epochs_sparsify: int = 0
    pretrain_epochs: int = 0
    pretrain_lr: float | None = None
    batch_size: int | None = None
    seed: int = 0
    p0: float = 0.1
    meas_var: float | None = None
    q_process: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    divergence_patience: int = 5


@dataclass
class TrainReport:
    epochs: list
    wall_time: float = 0.0
    diverged: bool = False
    abort_reason: str = ""
    trained_x0: np.ndarray | None = None

    def final(self):
        return self.epochs[-1] if self.epochs else {}


# ---------------------------------------------------------------------------
# Gaussian moment propagation
# ---------------------------------------------------------------------------


def gaussian_moments_1d(op, m, s):
    """Exact mean/variance of op(z) for z ~ N(m, s)."""
    if op == "identity":
        return m, s
    if op == "sin":
        e1 = ad.d_exp(-0.5 * s) if ad.is_node(s) else np.exp(-0.5 * s)
        e2 = ad.d_exp(-2.0 * s) if ad.is_node(s) else np.exp(-2.0 * s)
        mu = ad.d_sin(m) * e1
        var = 0.5 * (1.0 - ad.d_cos(2.0 * m) * e2) - ad.d_sin(m) * ad.d_sin(m) * (e1 * e1)
        return mu, var
    if op == "cos":
        e1 = ad.d_exp(-0.5 * s) if ad.is_node(s) else np.exp(-0.5 * s)
        e2 = ad.d_exp(-2.0 * s) if ad.is_node(s) else np.exp(-2.0 * s)
        mu = ad.d_cos(m) * e1
        var = 0.5 * (1.0 + ad.d_cos(2.0 * m) * e2) - ad.d_cos(m) * ad.d_cos(m) * (e1 * e1)
        return mu, var
    if op == "square":
        return m * m + s, 2.0 * s * s + 4.0 * m * m * s
    if op == "cube":
        mu = m * m * m + 3.0 * m * s
        m2, s2 = m * m, s * s
        var = 9.0 * (m2 * m2) * s + 36.0 * m2 * s2 + 15.0 * s2 * s
        return mu, var
    raise ValueError(f"no closed-form Gaussian moments for operator {op!r}")


def _single_term_structure(net):
    """Per-output (c0, coeff, op, neuron-arg-row) if the network is a plain
    sum of one operator term per output over a constant-1 denominator."""
    if len(net.layers) != 1:
        return None
    layer = net.layers[0]
    K = net.ops.K
    terms = []
    for d in range(net.n_out):
        w4 = net.w4[d]
        if w4[0] != 1.0 or np.any(w4[1:]):
            return None
        nz = np.nonzero(net.w3[d, 1:])[0]
        if len(nz) > 1:
            return None
        if len(nz) == 0:
            terms.append((net.w3[d, 0], 0.0, "identity", np.zeros(net.layers[0][0].w1.shape[-1])))
            continue
        j = nz[0]
        neuron = layer[j]
        active = [(i, k) for i in range(neuron.branches) for k in range(K)
                  if neuron.w2[i, k] != 0.0]
        if len(active) != 1:
            return None
        i, k = active[0]
        if neuron.w2[i, K] != 0.0:
            return None
        for ib in range(neuron.branches):
            if ib == i:
                continue
            if neuron.w2[ib, K] != 1.0 or np.any(neuron.w2[ib, :K]):
                return None
            if np.any(neuron.w1[ib]):
                return None
        op = net.ops.names[k]
        if op not in ("identity", "sin", "cos", "square", "cube"):
            return None
        coeff = net.w3[d, 1 + j] * neuron.w2[i, k]
        terms.append((net.w3[d, 0], coeff, op, neuron.w1[i, k].copy()))
    return terms


def propagate_moments(xi, psi, output_net, u=(), t=0.0, noise_var=None,
                      chol=None, params=None):
    """Mean and variance of the output net applied to a Gaussian state.

    Exact for affine outputs and for single-operator trig/polynomial
    outputs; otherwise a symmetric sigma-point approximation (2n+1
    points) is used, which needs the covariance factor `chol` when the
    arguments are graph nodes.
    """
    xi = list(xi)
    n = len(xi)
    psi_rows = [list(row) for row in psi]
    q = output_net.n_out
    noise = np.zeros(q) if noise_var is None else np.atleast_1d(np.asarray(noise_var, dtype=np.float64))

    if isinstance(output_net, AffineOutput):
        C = output_net.C if params is None else params["C"]
        c0 = output_net.c0 if params is None else params["c0"]
        mu, sig2 = [], []
        for j in range(q):
            mu.append(ad.dot(list(C[j]), xi) + c0[j])
            psic = [ad.dot(list(C[j]), [psi_rows[a][b] for a in range(n)])
                    for b in range(n)]
            sig2.append(ad.dot(list(C[j]), psic) + noise[j])
        return mu, sig2

    if isinstance(output_net, OdeNetwork) and params is None:
        terms = _single_term_structure(output_net)
        if terms is not None:
            mu, sig2 = [], []
            z_extra = output_net._assemble_inputs([0.0] * n, list(u), [0.0] * n, t)
            for j, (c0, coeff, op, w_row) in enumerate(terms):
                a_vec = w_row[1:1 + n]
                b = ad.dot(list(w_row), z_extra)  # x entries are zero here
                m_z = ad.dot(list(a_vec), xi) + b
                s_row = [ad.dot(list(a_vec), [psi_rows[a][c] for a in range(n)])
                         for c in range(n)]
                s_z = ad.dot(list(a_vec), s_row)
                mo, vo = gaussian_moments_1d(op, m_z, s_z)
                mu.append(c0 + coeff * mo)
                sig2.append(coeff * coeff * vo + noise[j])
            return mu, sig2

    # sigma-point fallback: 2n+1 symmetric points, kappa = 1
    if chol is None:
        if any(ad.is_node(v) for row in psi_rows for v in row):
            raise ValueError("sigma-point propagation on nodes needs the factor chol")
        P = np.array([[float(v) for v in row] for row in psi_rows])
        Lc = np.linalg.cholesky(P + 1e-12 * np.eye(n))
        chol_rows = [list(Lc[i]) for i in range(n)]
    else:
        chol_rows = [list(row) for row in chol]
    scale = np.sqrt(n + 1.0)
    w0 = 1.0 / (n + 1.0)
    wi = 1.0 / (2.0 * (n + 1.0))
    points = [xi]
    weights_pt = [w0]
    for c in range(n):
        col = [chol_rows[a][c] for a in range(n)]
        points.append([xi[a] + scale * col[a] for a in range(n)])
        points.append([xi[a] - scale * col[a] for a in range(n)])
        weights_pt += [wi, wi]
    evals = [output_net.forward(pt, list(u), None, t, params=params) for pt in points]
    mu, sig2 = [], []
    for j in range(q):
        m = None
        for wpt, ev in zip(weights_pt, evals):
            contrib = wpt * ev[j]
            m = contrib if m is None else m + contrib
        v = None
        for wpt, ev in zip(weights_pt, evals):
            dlt = ev[j] - m
            contrib = wpt * dlt * dlt
            v = contrib if v is None else v + contrib
        mu.append(m)
        sig2.append(v + noise[j])
    return mu, sig2


def gaussian_nll(y, mu, sigma2):
    """Negative log of the Gaussian density N(y; mu, sigma2)."""
    resid = y - mu
    if ad.is_node(sigma2) or ad.is_node(resid):
        sigma2 = ad.lift(sigma2)
        return 0.5 * ad.log(sigma2 * (2.0 * np.pi)) + resid * resid / (2.0 * sigma2)
    return 0.5 * np.log(2.0 * np.pi * sigma2) + resid * resid / (2.0 * sigma2)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------


class ParamStore:
    def __init__(self):
        self.groups = []   # (key, name, array, mask)
        self.refs = []     # (array, index) for each trainable scalar

    def add(self, key, items):
        for name, arr, mask in items:
            self.groups.append((key, name, arr, mask))
            for idx in np.ndindex(arr.shape):
                if not mask[idx]:
                    self.refs.append((arr, idx))

    def lift(self):
        lifted = {}
        wrt = []
        for key, name, arr, mask in self.groups:
            ov = np.empty(arr.shape, dtype=object)
            for idx in np.ndindex(arr.shape):
                node = ad.var(arr[idx])
                ov[idx] = node
                if not mask[idx]:
                    wrt.append(node)
            lifted.setdefault(key, {})[name] = ov
        return lifted, wrt

    def get_flat(self):
        return np.array([arr[idx] for arr, idx in self.refs])

    def set_flat(self, values):
        for v, (arr, idx) in zip(values, self.refs):
            arr[idx] = v

    def n_trainable(self):
        return len(self.refs)


# ---------------------------------------------------------------------------
# loss assembly
# ---------------------------------------------------------------------------


class LossBuilder:
    """Builds the four-term loss graph over a batch of collocation times.

    Index 0 of every batch is the initial time, where the initial-value
    terms are anchored.
    """

    def __init__(self, networks, dataset, config):
        self.nets = networks
        self.cfg = config
        self.times = np.asarray(dataset.times, dtype=np.float64)
        ys = np.asarray(dataset.measurements, dtype=np.float64)
        self.ys = ys if ys.ndim == 2 else ys[:, None]
        us = np.asarray(dataset.inputs, dtype=np.float64)
        self.us = us if us.size else np.zeros((len(self.times), 0))
        self.n = len(networks.mean_net.biases[-1])
        self.q = self.ys.shape[1]
        self.p = self.us.shape[1]
        self.t0 = float(self.times[0])
        self.t_scale = float(self.times[-1] - self.times[0]) or 1.0
        self.tri = np.tril_indices(self.n)
        if config.meas_var is not None:
            mv = float(config.meas_var)
        else:
            sigma = float(dataset.meta.get("sigma_v", 0.0)) if dataset.meta else 0.0
            mv = sigma ** 2
        self.meas_var = np.full(self.q, max(mv, SIGMA_FLOOR))
        self.P0 = config.p0 * np.eye(self.n)
        self.x0 = None if dataset.x0 is None else np.asarray(dataset.x0, dtype=np.float64)
        self.x0_trainable = self.x0 is None

    def x0_init(self):
        """Lift the first measurement through the output map's pseudo-inverse."""
        out = self.nets.output_net
        if isinstance(out, AffineOutput):
            guess = np.linalg.pinv(out.C) @ (self.ys[0] - out.c0)
        else:
            guess = np.zeros(self.n)
        return guess

    def _psi_matrix(self, tri_vals):
        n = self.n
        L = [[0.0] * n for _ in range(n)]
        for (a, b), v in zip(zip(*self.tri), tri_vals):
            L[a][b] = v
        psi = [[None] * n for _ in range(n)]
        for a in range(n):
            for b in range(a + 1):
                lena = b + 1  # overlap of row supports
                val = ad.dot([L[a][k] for k in range(lena)],
                             [L[b][k] for k in range(lena)])
                psi[a][b] = val
                psi[b][a] = val
        return L, psi

    def build(self, idx, lifted=None, x0_nodes=None, with_reg=True,
              terms=("l1", "l2", "l3", "l4"), fixed_variance=False):
        """Loss nodes over batch `idx` (idx[0] must point at the initial time).

        `terms` restricts which loss pieces (and hence which parts of the
        graph) are constructed; a likelihood-only pretraining pass skips
        the time derivatives and linearizations entirely.  With
        fixed_variance the likelihood uses the configured measurement
        variance instead of the propagated one (plain weighted least
        squares; keeps the covariance net from absorbing early misfit).
        """
        cfg, nets = self.cfg, self.nets
        w = cfg.weights
        n, q = self.n, self.q
        B = len(idx)
        get = (lambda key: lifted.get(key) if lifted else None)
        want = set(terms)
        need_filter = bool(want & {"l2", "l3"})
        need_nets = need_filter or "l4" in want

        t_node = ad.var(self.times[idx])
        u_nodes = [ad.const(self.us[idx, j]) for j in range(self.p)]
        y_nodes = [ad.const(self.ys[idx, j]) for j in range(q)]

        xi = self._time_net_forward(nets.mean_net, t_node, get("mean"))
        tri_vals = self._time_net_forward(nets.cov_net, t_node, get("cov"))
        L, psi = self._psi_matrix(tri_vals)

        extras_state, extras_out = {}, {}
        if need_nets:
            zeta = self._net_forward(nets.state_net, xi, u_nodes, t_node,
                                     get("state"), extras_state)
            eta = self._net_forward(nets.output_net, xi, u_nodes, t_node,
                                    get("output"), extras_out)

        if need_filter:
            xi_dot = ad.forward_tangent(xi, t_node)
            tri_dot = ad.forward_tangent(tri_vals, t_node)
            Ld = [[0.0] * n for _ in range(n)]
            for (a, b), v in zip(zip(*self.tri), tri_dot):
                Ld[a][b] = v
            psi_dot = [[None] * n for _ in range(n)]
            for a in range(n):
                for b in range(a + 1):
                    kmax = min(a, b) + 1
                    val = ad.dot([Ld[a][k] for k in range(kmax)], [L[b][k] for k in range(kmax)]) \
                        + ad.dot([L[a][k] for k in range(kmax)], [Ld[b][k] for k in range(kmax)])
                    psi_dot[a][b] = val
                    psi_dot[b][a] = val

            A_hat = ad.jacobian([ad.lift(z) for z in zeta], xi, create_graph=True)
            if isinstance(nets.output_net, AffineOutput):
                C_hat = nets.output_net.jacobian_entries(get("output"))
            else:
                C_hat = ad.jacobian([ad.lift(e) for e in eta], xi, create_graph=True)

            # process noise mapping: identity for additive noise, else linearized
            if isinstance(nets.state_net, OdeNetwork) and nets.state_net.noise_mode == "input":
                w_nodes = [ad.var(np.zeros(B)) for _ in range(n)]
                zeta_w = nets.state_net.forward(xi, u_nodes, w_nodes, t_node,
                                                params=get("state"))
                G_hat = ad.jacobian([ad.lift(z) for z in zeta_w], w_nodes, create_graph=True)
                Qmat = cfg.q_process * np.eye(n)
                Q_hat = [[ad.dot([G_hat[a][i] for i in range(n)],
                                 [ad.dot(list(Qmat[i]), [G_hat[b][j] for j in range(n)])
                                  for i in range(n)]) for b in range(n)] for a in range(n)]
            else:
                Q_hat = [[cfg.q_process if a == b else 0.0 for b in range(n)] for a in range(n)]

            # Kalman gain from the covariance net: K = psi C^T R^-1 (diagonal R)
            K = [[ad.dot([self._C(C_hat, j, c) for c in range(n)],
                         [psi[a][c] for c in range(n)]) * (1.0 / self.meas_var[j])
                  for j in range(q)] for a in range(n)]

        zero = ad.const(0.0)
        l1 = l2 = l3 = zero
        if "l1" in want:
            mu, sig2 = propagate_moments(xi, psi, nets.output_net, u_nodes, t_node,
                                         noise_var=self.meas_var, chol=L,
                                         params=get("output"))
            nll = None
            for j in range(q):
                if fixed_variance:
                    s2 = float(self.meas_var[j])
                else:
                    s2 = ad.d_max_smooth(sig2[j], SIGMA_FLOOR)
                term = gaussian_nll(y_nodes[j], mu[j], s2)
                nll = term if nll is None else nll + term
            l1 = ad.bsum(nll) * (1.0 / B) if ad.is_node(nll) else nll

        if "l2" in want:
            inno = [y_nodes[j] - eta[j] for j in range(q)]
            resid2 = []
            for a in range(n):
                corr = ad.dot([K[a][j] for j in range(q)], inno)
                resid2.append(xi_dot[a] - zeta[a] - corr)
            l2_res = ad.norm2_smooth(resid2)
            if x0_nodes is not None:
                x0_ref = x0_nodes
            else:
                x0_ref = list(self.x0) if self.x0 is not None else list(self.x0_init())
            init2 = ad.norm2_smooth([ad.pick(xi[a], 0) - x0_ref[a] for a in range(n)])
            l2 = init2 + ad.bsum(l2_res) * (1.0 / B)

        if "l3" in want:
            resid3 = []
            init3_terms = []
            for a in range(n):
                for b in range(n):
                    apsi = ad.dot([A_hat[a][c] for c in range(n)],
                                  [psi[c][b] for c in range(n)])
                    psiat = ad.dot([psi[a][c] for c in range(n)],
                                   [A_hat[b][c] for c in range(n)])
                    cpsb = [ad.dot([self._C(C_hat, j, c) for c in range(n)],
                                   [psi[c][b] for c in range(n)]) for j in range(q)]
                    kcp = ad.dot([K[a][j] for j in range(q)], cpsb)
                    Psi_ab = apsi + psiat - kcp + Q_hat[a][b]
                    resid3.append(psi_dot[a][b] - Psi_ab)
                    init3_terms.append(ad.pick(psi[a][b], 0) - self.P0[a, b])
            l3 = ad.norm2_smooth(init3_terms) + ad.bsum(ad.norm2_smooth(resid3)) * (1.0 / B)

        # L4: regularization of the equation-learner weights
        l4 = ad.const(0.0)
        if "l4" in want and with_reg and w.alpha4 > 0.0:
            r0_sum = None
            for key, net in (("state", nets.state_net), ("output", nets.output_net)):
                if not isinstance(net, OdeNetwork):
                    continue
                group = get(key)
                for name, arr, mask in net.param_items():
                    src = group[name] if group else arr
                    for idx2 in np.ndindex(arr.shape):
                        if mask[idx2]:
                            continue
                        term = reg_r0(ad.lift(src[idx2]) if group else float(arr[idx2]), w.a)
                        term = ad.lift(term)
                        r0_sum = term if r0_sum is None else r0_sum + term
            r1_sum = None
            for extras in (extras_state, extras_out):
                for den in extras.get("den", ()):
                    term = ad.d_max_smooth(0.0, w.delta - den)
                    term = ad.bsum(term) * (1.0 / B) if np.ndim(term.value) else term
                    r1_sum = term if r1_sum is None else r1_sum + term
            l4 = ad.const(0.0)
            if r0_sum is not None:
                l4 = l4 + w.alpha41 * r0_sum
            if r1_sum is not None:
                l4 = l4 + w.alpha42 * r1_sum

        total = w.alpha1 * l1 + w.alpha2 * l2 + w.alpha3 * l3
        if "l4" in want and with_reg and w.alpha4 > 0.0:
            total = total + w.alpha4 * l4
        return {"l1": l1, "l2": l2, "l3": l3, "l4": l4, "total": total}

    def _time_net_forward(self, net, t_node, params):
        if isinstance(net, TimeFeatureNet):
            return net.forward_time(t_node, params=params)
        tnorm = (t_node - self.t0) * (1.0 / self.t_scale)
        return net.forward([tnorm], params=params)

    def _net_forward(self, net, xi, u_nodes, t_node, params, extras):
        if isinstance(net, OdeNetwork):
            return self._odenet_forward(net, xi, u_nodes, t_node, params, extras)
        return net.forward(xi, u_nodes, None, t_node, params=params)

    def _odenet_forward(self, net, xi, u_nodes, t_node, params, extras):
        """OdeNetwork forward that also exposes the denominator nodes."""
        get = (lambda name, default: params.get(name, default)) if params else (
            lambda name, default: default)
        z = [1.0] + list(xi) + list(u_nodes)
        if net.noise_mode == "input":
            z += [0.0] * net.n_state
        if net.use_time:
            z.append(t_node)
        if net.time_omega is not None:
            wt = net.time_omega * t_node
            z += [ad.d_sin(wt), ad.d_cos(wt)]
        from .eqlnet import neuron_forward

        for li, layer in enumerate(net.layers):
            outs = []
            for ni, neuron in enumerate(layer):
                w1 = get(f"l{li}.n{ni}.w1", neuron.w1)
                w2 = get(f"l{li}.n{ni}.w2", neuron.w2)
                outs.append(neuron_forward(z, neuron, net.ops, w1=w1, w2=w2))
            z = [1.0] + outs
        w3 = get("w3", net.w3)
        w4 = get("w4", net.w4)
        outputs = []
        dens = []
        for d in range(net.n_out):
            num = ad.lift(ad.dot(list(w3[d]), z))
            den = ad.lift(ad.dot(list(w4[d]), z))
            dens.append(den)
            outputs.append(ad.guard_div(num, den, net.delta))
        extras["den"] = dens
        return outputs

    @staticmethod
    def _C(C_hat, j, c):
        entry = C_hat[j][c] if isinstance(C_hat, list) else C_hat[j, c]
        return entry


# ---------------------------------------------------------------------------
# spec-level loss entry points (single evaluation, plain numbers)
# ---------------------------------------------------------------------------


def loss_components(networks, dataset, config, idx=None):
    """Evaluate L1..L4 and the total on a batch (default: full dataset)."""
    builder = LossBuilder(networks, dataset, config)
    if idx is None:
        idx = np.arange(len(builder.times))
    losses = builder.build(np.asarray(idx))
    return {k: float(v.value) if ad.is_node(v) else float(v)
            for k, v in losses.items()}


def loss_l1(networks, dataset, config, idx=None):
    return loss_components(networks, dataset, config, idx)["l1"]


def loss_l2(networks, dataset, config, idx=None):
    return loss_components(networks, dataset, config, idx)["l2"]


def loss_l3(networks, dataset, config, idx=None):
    return loss_components(networks, dataset, config, idx)["l3"]


def loss_l4(networks, dataset, config, idx=None):
    cfg = replace(config, weights=replace(config.weights,
                                          alpha4=max(config.weights.alpha4, 1.0)))
    return loss_components(networks, dataset, cfg, idx)["l4"]


def total_loss(networks, dataset, config, idx=None):
    return loss_components(networks, dataset, config, idx)["total"]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _adam_step(theta, grad, state, lr, b1, b2, eps):
    m, v, t = state
    t += 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    return theta - lr * mhat / (np.sqrt(vhat) + eps), (m, v, t)


def _batches(n_samples, batch_size, rng):
    """Index batches; index 0 (initial time) is prepended to every batch."""
    if batch_size is None or batch_size >= n_samples:
        return [np.arange(n_samples)]
    rest = rng.permutation(np.arange(1, n_samples))
    out = []
    for start in range(0, len(rest), batch_size):
        chunk = rest[start:start + batch_size]
        out.append(np.concatenate([[0], chunk]))
    return out


def train(dataset, networks, config):
    """Two-phase first-order optimization of all four networks jointly.

    Phase 1 fits with the regularizer off; phase 2 switches the sparsity
    terms on.  Deterministic under a fixed seed.
    """
    t_start = time.time()
    builder = LossBuilder(networks, dataset, config)
    store = ParamStore()
    store.add("mean", networks.mean_net.param_items())
    store.add("cov", networks.cov_net.param_items())
    store.add("state", networks.state_net.param_items())
    store.add("output", networks.output_net.param_items())
    x0_arr = None
    if builder.x0_trainable:
        x0_arr = builder.x0_init().astype(np.float64)
        store.add("x0", [("x0", x0_arr, np.zeros(x0_arr.shape, dtype=bool))])

    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    theta = store.get_flat()
    adam = (np.zeros_like(theta), np.zeros_like(theta), 0)
    report = TrainReport(epochs=[])
    bad_streak = 0
    n_samples = len(builder.times)

    total_epochs = config.pretrain_epochs + config.epochs + config.epochs_sparsify
    for epoch in range(total_epochs):
        pretrain = epoch < config.pretrain_epochs
        sparsify = epoch >= config.pretrain_epochs + config.epochs
        if pretrain:
            terms = ("l1",)
            lr = config.pretrain_lr if config.pretrain_lr is not None else config.lr
        elif sparsify:
            terms = ("l1", "l2", "l3", "l4")
            lr = config.lr
        else:
            terms = ("l1", "l2", "l3")
            lr = config.lr
        comps_sum = {"l1": 0.0, "l2": 0.0, "l3": 0.0, "l4": 0.0, "total": 0.0}
        n_steps = 0
        for idx in _batches(n_samples, config.batch_size, rng):
            lifted, wrt = store.lift()
            x0_nodes = list(lifted["x0"]["x0"].ravel()) if x0_arr is not None else None
            losses = builder.build(idx, lifted=lifted, x0_nodes=x0_nodes,
                                   with_reg=sparsify, terms=terms,
                                   fixed_variance=pretrain)
            total = losses["total"]
            val = float(total.value)
            if not np.isfinite(val):
                bad_streak += 1
                if bad_streak >= config.divergence_patience:
                    report.diverged = True
                    report.abort_reason = f"non-finite loss for {bad_streak} steps"
                    report.wall_time = time.time() - t_start
                    return report
                continue
            bad_streak = 0
            grads = ad.grad(total, wrt)
            gvec = np.array([float(g) for g in grads])
            theta, adam = _adam_step(theta, gvec, adam, lr,
                                     config.adam_beta1, config.adam_beta2,
                                     config.adam_eps)
            store.set_flat(theta)
            for k in comps_sum:
                v = losses[k]
                comps_sum[k] += float(v.value) if ad.is_node(v) else float(v)
            n_steps += 1
        if n_steps:
            entry = {k: v / n_steps for k, v in comps_sum.items()}
            entry["epoch"] = epoch
            entry["phase"] = 0 if pretrain else (2 if sparsify else 1)
            report.epochs.append(entry)
    report.wall_time = time.time() - t_start
    if x0_arr is not None:
        report.trained_x0 = x0_arr.copy()
    return report


def train_episodes(datasets, networks_list, config):
    """Fit shared state/output nets across several episode datasets.

    networks_list[k] carries the per-episode mean and covariance nets;
    every entry must reference the same state_net and output_net objects.
    Episodes are visited round-robin with a full batch each.
    """
    if len(datasets) != len(networks_list):
        raise ValueError("one networks bundle per dataset required")
    for nets in networks_list[1:]:
        if nets.state_net is not networks_list[0].state_net \
                or nets.output_net is not networks_list[0].output_net:
            raise ValueError("episodes must share the state and output nets")
    t_start = time.time()
    builders = [LossBuilder(nets, ds, config)
                for nets, ds in zip(networks_list, datasets)]
    store = ParamStore()
    for k, nets in enumerate(networks_list):
        store.add(f"mean{k}", nets.mean_net.param_items())
        store.add(f"cov{k}", nets.cov_net.param_items())
    store.add("state", networks_list[0].state_net.param_items())
    store.add("output", networks_list[0].output_net.param_items())

    theta = store.get_flat()
    adam = (np.zeros_like(theta), np.zeros_like(theta), 0)
    report = TrainReport(epochs=[])
    bad_streak = 0
    n_eps = len(datasets)

    total_epochs = config.pretrain_epochs + config.epochs + config.epochs_sparsify
    for epoch in range(total_epochs):
        pretrain = epoch < config.pretrain_epochs
        sparsify = epoch >= config.pretrain_epochs + config.epochs
        terms = ("l1",) if pretrain else (
            ("l1", "l2", "l3", "l4") if sparsify else ("l1", "l2", "l3"))
        lr = config.pretrain_lr if (pretrain and config.pretrain_lr is not None) \
            else config.lr
        comps_sum = {"l1": 0.0, "l2": 0.0, "l3": 0.0, "l4": 0.0, "total": 0.0}
        n_steps = 0
        for k in range(n_eps):
            lifted, wrt = store.lift()
            view = {"mean": lifted[f"mean{k}"], "cov": lifted[f"cov{k}"],
                    "state": lifted["state"], "output": lifted["output"]}
            idx = np.arange(len(builders[k].times))
            losses = builders[k].build(idx, lifted=view, with_reg=sparsify,
                                       terms=terms, fixed_variance=pretrain)
            val = float(losses["total"].value)
            if not np.isfinite(val):
                bad_streak += 1
                if bad_streak >= config.divergence_patience:
                    report.diverged = True
                    report.abort_reason = f"non-finite loss for {bad_streak} steps"
                    report.wall_time = time.time() - t_start
                    return report
                continue
            bad_streak = 0
            grads = ad.grad(losses["total"], wrt)
            gvec = np.array([float(g) for g in grads])
            theta, adam = _adam_step(theta, gvec, adam, lr, config.adam_beta1,
                                     config.adam_beta2, config.adam_eps)
            store.set_flat(theta)
            for key in comps_sum:
                v = losses[key]
                comps_sum[key] += float(v.value) if ad.is_node(v) else float(v)
            n_steps += 1
        if n_steps:
            entry = {k2: v / n_steps for k2, v in comps_sum.items()}
            entry["epoch"] = epoch
            entry["phase"] = 0 if pretrain else (2 if sparsify else 1)
            report.epochs.append(entry)
    report.wall_time = time.time() - t_start
    return report


# ---------------------------------------------------------------------------
# plain collocation mode (noise-free, fully observed)
# ---------------------------------------------------------------------------


def loss_pinn_node(mean_net, times, states_f, x0, lifted=None, t0=None, t_scale=None):
    """Squared-residual collocation loss for a known right-hand side.

    states_f(x_list, t_node) -> list of xdot expressions.
    """
    t0 = times[0] if t0 is None else t0
    if t_scale is None:
        t_scale = (times[-1] - times[0]) or 1.0
    t_node = ad.var(np.asarray(times, dtype=np.float64))
    tnorm = (t_node - t0) * (1.0 / t_scale)
    x_t = mean_net.forward([tnorm], params=lifted)
    xd = ad.forward_tangent(x_t, t_node)
    f_val = states_f(x_t, t_node)
    total = None
    for a in range(len(x_t)):
        r = xd[a] - f_val[a]
        term = ad.bsum(r * r)
        total = term if total is None else total + term
    for a in range(len(x_t)):
        d = ad.pick(x_t[a], 0) - x0[a]
        total = total + d * d
    return total


def loss_pinn(mean_net, times, states_f, x0):
    return float(loss_pinn_node(mean_net, np.asarray(times), states_f, x0).value)


def train_pinn(mean_net, times, states_f, x0, lr=1e-2, epochs=2000, seed=0):
    """Fit the mean network to a known ODE by plain collocation."""
    store = ParamStore()
    store.add("mean", mean_net.param_items())
    theta = store.get_flat()
    adam = (np.zeros_like(theta), np.zeros_like(theta), 0)
    history = []
    for _ in range(epochs):
        lifted, wrt = store.lift()
        loss = loss_pinn_node(mean_net, times, states_f, x0, lifted=lifted["mean"])
        grads = ad.grad(loss, wrt)
        gvec = np.array([float(g) for g in grads])
        theta, adam = _adam_step(theta, gvec, adam, lr, 0.9, 0.999, 1e-8)
        store.set_flat(theta)
        history.append(float(loss.value))
    return history


# ---------------------------------------------------------------------------
# checkpoints and identified models
# ---------------------------------------------------------------------------


def _net_to_dict(net):
    return net.to_dict()


def _net_from_dict(d):
    fmt = d.get("format")
    if fmt == "odenet-v1":
        return OdeNetwork.from_dict(d)
    if fmt == "mlp-v1":
        return Mlp.from_dict(d)
    if fmt == "affine-v1":
        return AffineOutput.from_dict(d)
    if fmt == "tfnet-v1":
        return TimeFeatureNet.from_dict(d)
    if fmt == "parametric-v1":
        return ParametricModel.from_dict(d)
    raise ValueError(f"unknown network record format {fmt!r}")


def save_checkpoint(path, networks, dataset=None, config=None, x0=None,
                    extra=None):
    t0 = float(dataset.times[0]) if dataset is not None else 0.0
    t_scale = float(dataset.times[-1] - dataset.times[0]) if dataset is not None else 1.0
    rec = {
        "format": "learner-v1",
        "t0": t0,
        "t_scale": t_scale or 1.0,
        "mean_net": _net_to_dict(networks.mean_net),
        "cov_net": _net_to_dict(networks.cov_net),
        "state_net": _net_to_dict(networks.state_net),
        "output_net": _net_to_dict(networks.output_net),
        "x0": None if x0 is None else [float(v) for v in x0],
        "meas_var": None if config is None else config.meas_var,
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(rec, fh)


def load_checkpoint(path):
    with open(path) as fh:
        rec = json.load(fh)
    if rec.get("format") != "learner-v1":
        raise ValueError(f"not a learner-v1 checkpoint: {rec.get('format')!r}")
    networks = LearnerNetworks(
        mean_net=_net_from_dict(rec["mean_net"]),
        cov_net=_net_from_dict(rec["cov_net"]),
        state_net=_net_from_dict(rec["state_net"]),
        output_net=_net_from_dict(rec["output_net"]),
    )
    extras = {"t0": rec["t0"], "t_scale": rec["t_scale"],
              "x0": None if rec["x0"] is None else np.array(rec["x0"]),
              "meas_var": rec.get("meas_var"), "extra": rec.get("extra", {})}
    return networks, extras


def identified_model(networks, n=None, p=None, q=None):
    """Wrap the learned state/output nets as a simulatable state-space model."""
    state_net = networks.state_net
    output_net = networks.output_net
    if n is None:
        n = state_net.n_state
    if p is None:
        p = getattr(state_net, "n_in", 0)
    if q is None:
        q = output_net.n_out

    def f(x, u, w, t):
        out = state_net.forward(list(x), list(u), None, t)
        return [o + wi for o, wi in zip(out, w)]

    def g(x, u, v, t):
        out = output_net.forward(list(x), list(u), None, t)
        return [o + vi for o, vi in zip(out, v)]

    from .ekbf import NoiseModel

    return dynamics.StateSpaceModel(
        f=f, g=g, n=n, p=p, q=q,
        noise=NoiseModel(Q=np.zeros((n, n)), R=np.zeros((q, q))),
        name="identified")


def dataset_hash(dataset):
    text = dynamics.dataset_to_csv(dataset)
    return hashlib.sha256(text.encode()).hexdigest()


def estimate_forcing_frequency(y, dt, skip_fraction=0.5, min_omega=0.1):
    """Dominant angular frequency of a measured channel via a padded FFT.

    Skips the leading transient, windows the remainder, and interpolates
    the spectral peak with 8x zero padding.  Used to initialize a
    trainable forcing frequency inside its convergence basin: the loss
    is multimodal in the frequency, with basins roughly 2*pi/T apart.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    start = int(len(y) * skip_fraction)
    seg = y[start:]
    seg = seg - seg.mean()
    seg = seg * np.hanning(len(seg))
    n_fft = 8 * len(seg)
    spec = np.abs(np.fft.rfft(seg, n=n_fft))
    omegas = 2.0 * np.pi * np.fft.rfftfreq(n_fft, d=dt)
    spec[omegas < min_omega] = 0.0
    return float(omegas[np.argmax(spec)])


def estimate_dominant_frequencies(y, dt, count=2, skip_fraction=0.0,
                                  min_omega=0.1, min_separation=0.15):
    """The `count` strongest well-separated spectral peaks, descending."""
    y = np.asarray(y, dtype=np.float64).ravel()
    start = int(len(y) * skip_fraction)
    seg = y[start:]
    seg = (seg - seg.mean()) * np.hanning(len(seg))
    n_fft = 8 * len(seg)
    spec = np.abs(np.fft.rfft(seg, n=n_fft))
    omegas = 2.0 * np.pi * np.fft.rfftfreq(n_fft, d=dt)
    spec[omegas < min_omega] = 0.0
    found = []
    spec = spec.copy()
    for _ in range(count):
        k = int(np.argmax(spec))
        if spec[k] <= 0:
            break
        found.append(float(omegas[k]))
        spec[np.abs(omegas - omegas[k]) < min_separation] = 0.0
    return found
