"""Operator-neuron networks with a guarded division output layer.

An operator-neuron multiplies I weighted sums of K nonlinear operator
activations; a network of them represents the right-hand side of an ODE
(or a measurement map) in near-symbolic form.  Weight matrices can be
pre-seeded from known model terms, and a trained network can be folded
back into an explicit expression.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

DEFAULT_DELTA = 1e-3
INIT_SCALE = 0.1


class CapacityError(ValueError):
    """A prior term cannot be represented by the network as configured."""


_OP_TABLE = {
    "identity": lambda x: x,
    "sin": ad.d_sin,
    "cos": ad.d_cos,
    "square": lambda x: x * x,
    "cube": lambda x: x * x * x,
    "sqrt_smooth": ad.d_sqrt_smooth,
    "exp": ad.d_exp,
    "tanh": ad.d_tanh,
}


@dataclass(frozen=True)
class OperatorSet:
    """Ordered set of unary continuously differentiable operators."""

    names: tuple

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("operator set must contain at least one operator")
        for name in self.names:
            if name not in _OP_TABLE:
                raise ValueError(f"unknown operator {name!r}; known: {sorted(_OP_TABLE)}")

    @property
    def K(self):
        return len(self.names)

    def apply(self, k, x):
        return _OP_TABLE[self.names[k]](x)


def operator_set(*names):
    return OperatorSet(tuple(names))


@dataclass
class OperatorNeuron:
    """Weights of one operator-neuron: w1 is (I, K, O+1), w2 is (I, K+1)."""

    w1: np.ndarray
    w2: np.ndarray

    def __post_init__(self):
        if self.w1.ndim != 3 or self.w2.ndim != 2:
            raise ValueError("w1 must be (I, K, O+1), w2 must be (I, K+1)")
        if self.w1.shape[0] != self.w2.shape[0] or self.w2.shape[1] != self.w1.shape[1] + 1:
            raise ValueError(
                f"inconsistent neuron shapes: w1 {self.w1.shape}, w2 {self.w2.shape}")

    @property
    def branches(self):
        return self.w1.shape[0]


def neuron_forward(z, neuron, ops, w1=None, w2=None):
    """Forward pass of one operator-neuron.

    `z` is the input vector with the leading bias 1; entries may be nodes
    or numbers.  Optional w1/w2 override the stored weights (used to
    inject parameter nodes during training).
    """
    w1 = neuron.w1 if w1 is None else w1
    w2 = neuron.w2 if w2 is None else w2
    n_br, K, O1 = neuron.w1.shape
    if len(z) != O1:
        raise ValueError(f"neuron expects input of length {O1}, got {len(z)}")
    out = None
    for i in range(n_br):
        acts = [ops.apply(k, ad.dot(w1[i, k], z)) for k in range(K)]
        branch = ad.dot(list(w2[i, :K]) + [w2[i, K]], acts + [1.0])
        out = branch if out is None else out * branch
    return out


@dataclass
class OdeNetwork:
    """Equation-learner network mapping (state, input, noise, time) to a vector.

    The input layout is [1, x, u, (w if noise_mode == "input"), (t), (sin
    w0 t, cos w0 t)].  With noise_mode "additive" (default) the process
    noise is added to the outputs instead, so its Jacobian is exactly the
    identity.
    """

    layers: list
    w3: np.ndarray
    w4: np.ndarray
    delta: float
    ops: OperatorSet
    n_state: int
    n_in: int = 0
    use_time: bool = False
    time_omega: float | None = None
    noise_mode: str = "additive"
    frozen: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        width = len(self.layers[-1])
        if self.w3.shape != (self.n_out, width + 1) or self.w4.shape != self.w3.shape:
            raise ValueError("output weight shapes do not match the last layer width")

    @property
    def n_out(self):
        return self.w3.shape[0] if self.w3.ndim == 2 else 1

    @property
    def n_noise(self):
        return self.n_state if self.noise_mode == "input" else 0

    def input_names(self):
        names = ["bias"]
        names += [f"x{i+1}" for i in range(self.n_state)]
        names += [f"u{i+1}" for i in range(self.n_in)]
        if self.noise_mode == "input":
            names += [f"w{i+1}" for i in range(self.n_state)]
        if self.use_time:
            names.append("t")
        if self.time_omega is not None:
            names += ["sin_w0t", "cos_w0t"]
        return names

    def input_width(self):
        return len(self.input_names())

    def _assemble_inputs(self, x, u, w, t):
        z = [1.0] + list(x) + list(u)
        if self.noise_mode == "input":
            z += list(w)
        if self.use_time:
            z.append(t)
        if self.time_omega is not None:
            wt = self.time_omega * t
            z += [ad.d_sin(wt), ad.d_cos(wt)]
        return z

    def forward(self, x, u=(), w=None, t=0.0, params=None):
        """Evaluate the network; works on nodes and plain numbers alike.

        `params`, when given, maps parameter names to arrays of nodes so
        gradients can flow into the weights.
        """
        get = (lambda name, default: params.get(name, default)) if params else (
            lambda name, default: default)
        z = self._assemble_inputs(x, u, w if w is not None else [0.0] * self.n_state, t)
        if len(z) != self.input_width():
            raise ValueError(
                f"input width mismatch: expected {self.input_width()}, got {len(z)}")
        for li, layer in enumerate(self.layers):
            outs = []
            for ni, neuron in enumerate(layer):
                w1 = get(f"l{li}.n{ni}.w1", neuron.w1)
                w2 = get(f"l{li}.n{ni}.w2", neuron.w2)
                outs.append(neuron_forward(z, neuron, self.ops, w1=w1, w2=w2))
            z = [1.0] + outs
        w3 = get("w3", self.w3)
        w4 = get("w4", self.w4)
        outputs = []
        for d in range(self.n_out):
            num = ad.dot(list(w3[d]), z)
            den = ad.dot(list(w4[d]), z)
            if ad.is_node(num) or ad.is_node(den):
                val = ad.guard_div(ad.lift(num), ad.lift(den), self.delta)
            else:
                val = num / den if den > self.delta else 0.0
            outputs.append(val)
        if self.noise_mode == "additive" and w is not None:
            outputs = [o + wi for o, wi in zip(outputs, w)]
        return outputs

    def eval_numpy(self, x, u=(), w=None, t=0.0):
        """Vectorized numpy forward pass; x is (n,) or (n, B)."""
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        B = x.shape[1] if batched else None
        ones = np.ones(B) if batched else np.float64(1.0)

        def as_row(v):
            v = np.asarray(v, dtype=np.float64)
            return np.broadcast_to(v, (B,)) if batched else v

        rows = [ones] + [as_row(xi) for xi in x]
        if self.n_in:
            u_arr = np.asarray(u, dtype=np.float64)
            if u_arr.ndim == 0:
                u_arr = u_arr.reshape(1)
            rows += [as_row(ui) for ui in u_arr]
        if self.noise_mode == "input":
            wv = np.zeros(self.n_state) if w is None else np.asarray(w, dtype=np.float64)
            rows += [as_row(wi) for wi in wv]
        if self.use_time:
            rows.append(as_row(t))
        if self.time_omega is not None:
            wt = self.time_omega * np.asarray(t, dtype=np.float64)
            rows += [as_row(np.sin(wt)), as_row(np.cos(wt))]
        z = np.stack(rows)
        for layer in self.layers:
            outs = []
            for neuron in layer:
                args = np.tensordot(neuron.w1, z, axes=([2], [0]))  # (I, K[, B])
                acts = np.stack([
                    _OP_TABLE[self.ops.names[k]](args[:, k]) for k in range(self.ops.K)
                ], axis=1)
                branch = np.einsum("ik,ik...->i...", neuron.w2[:, :-1], acts)
                branch = branch + (neuron.w2[:, -1:] if batched else neuron.w2[:, -1])
                outs.append(np.prod(branch, axis=0))
            z = np.stack([ones] + outs)
        num = self.w3 @ z
        den = self.w4 @ z
        out = np.where(den > self.delta, num / np.where(den > self.delta, den, 1.0), 0.0)
        if self.noise_mode == "additive" and w is not None:
            wv = np.asarray(w, dtype=np.float64)
            out = out + (wv[:, None] if batched else wv)
        return out

    # -- parameter bookkeeping -------------------------------------------------

    def param_items(self):
        """(name, array, frozen-mask) triples for every weight tensor."""
        items = []
        for li, layer in enumerate(self.layers):
            for ni, neuron in enumerate(layer):
                for wname, arr in (("w1", neuron.w1), ("w2", neuron.w2)):
                    name = f"l{li}.n{ni}.{wname}"
                    items.append((name, arr, self.frozen.get(name, np.zeros(arr.shape, dtype=bool))))
        for name, arr in (("w3", self.w3), ("w4", self.w4)):
            items.append((name, arr, self.frozen.get(name, np.zeros(arr.shape, dtype=bool))))
        return items

    def trainable_weight_values(self):
        """Flat array of all non-frozen weights (regularizer input)."""
        vals = []
        for _, arr, mask in self.param_items():
            vals.append(arr[~mask])
        return np.concatenate(vals)

    # -- persistence -----------------------------------------------------------

    def to_dict(self):
        return {
            "format": "odenet-v1",
            "ops": list(self.ops.names),
            "delta": self.delta,
            "n_state": self.n_state,
            "n_in": self.n_in,
            "use_time": self.use_time,
            "time_omega": self.time_omega,
            "noise_mode": self.noise_mode,
            "layers": [
                [{"w1": n.w1.tolist(), "w2": n.w2.tolist()} for n in layer]
                for layer in self.layers
            ],
            "w3": self.w3.tolist(),
            "w4": self.w4.tolist(),
            "frozen": {k: v.tolist() for k, v in self.frozen.items()},
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != "odenet-v1":
            raise ValueError(f"not an odenet-v1 record: format={d.get('format')!r}")
        layers = [
            [OperatorNeuron(np.array(n["w1"]), np.array(n["w2"])) for n in layer]
            for layer in d["layers"]
        ]
        return cls(
            layers=layers,
            w3=np.array(d["w3"]),
            w4=np.array(d["w4"]),
            delta=d["delta"],
            ops=OperatorSet(tuple(d["ops"])),
            n_state=d["n_state"],
            n_in=d["n_in"],
            use_time=d["use_time"],
            time_omega=d["time_omega"],
            noise_mode=d["noise_mode"],
            frozen={k: np.array(v, dtype=bool) for k, v in d["frozen"].items()},
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def copy(self):
        return OdeNetwork.from_dict(self.to_dict())


def network_forward(net, state, inp=(), noise=None, t=0.0):
    """Plain-number forward pass through an OdeNetwork."""
    return net.forward(list(state), list(inp), noise, t)


def make_ode_network(n_state, n_out=None, n_in=0, neurons=6, branches=2,
                     ops=("identity", "square", "cube"), delta=DEFAULT_DELTA,
                     use_time=False, time_omega=None, noise_mode="additive",
                     rng=None, init_scale=INIT_SCALE):
    """Single hidden layer of operator-neurons with a division output layer.

    Non-preconditioned weights start uniform in +-init_scale; the
    denominator bias starts at 1 so the division is initially neutral.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    opset = ops if isinstance(ops, OperatorSet) else OperatorSet(tuple(ops))
    n_out = n_state if n_out is None else n_out
    O = 1 + n_state + n_in + (n_state if noise_mode == "input" else 0)
    O += 1 if use_time else 0
    O += 2 if time_omega is not None else 0
    layer = [
        OperatorNeuron(
            w1=rng.uniform(-init_scale, init_scale, size=(branches, opset.K, O)),
            w2=rng.uniform(-init_scale, init_scale, size=(branches, opset.K + 1)),
        )
        for _ in range(neurons)
    ]
    w3 = rng.uniform(-init_scale, init_scale, size=(n_out, neurons + 1))
    w4 = np.zeros((n_out, neurons + 1))
    w4[:, 0] = 1.0
    return OdeNetwork(layers=[layer], w3=w3, w4=w4, delta=delta, ops=opset,
                      n_state=n_state, n_in=n_in, use_time=use_time,
                      time_omega=time_omega, noise_mode=noise_mode)


# ---------------------------------------------------------------------------
# prior knowledge / pre-conditioning
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PriorTerm:
    """One known additive term: coeff * op(sum_j arg_weights[j] * z_j)."""

    target: int
    op: str
    arg_weights: dict
    coeff: float
    frozen: bool = False

    def describe(self):
        arg = " + ".join(f"{v}*{k}" for k, v in self.arg_weights.items())
        return f"{self.coeff} * {self.op}({arg}) -> xdot{self.target + 1}"


@dataclass(frozen=True)
class PriorKnowledge:
    terms: tuple
    situation: str = "partial"  # parameters-only | partial | unknown


def precondition(net, prior):
    """Seed network weights so it evaluates exactly to the prior's term sum.

    Each term occupies one operator-neuron (first branch carries the
    operator, remaining branches are pinned to the constant 1); the term
    coefficient lives in the output layer.  The denominator is set to the
    constant 1.  Terms marked frozen get their weights excluded from
    gradient updates.
    """
    net = net.copy()
    if prior.situation == "unknown" or not prior.terms:
        return net
    if len(net.layers) != 1:
        raise CapacityError("pre-conditioning requires a single hidden layer")
    layer = net.layers[0]
    if len(prior.terms) > len(layer):
        raise CapacityError(
            f"{len(prior.terms)} prior terms but only {len(layer)} neurons")
    names = net.input_names()
    index = {n: i for i, n in enumerate(names)}

    n_out, width1 = net.w3.shape
    net.w3 = np.zeros((n_out, width1))
    net.w4 = np.zeros((n_out, width1))
    net.w4[:, 0] = 1.0
    frozen = {name: np.zeros(arr.shape, dtype=bool) for name, arr, _ in net.param_items()}
    frozen["w4"] = np.ones(net.w4.shape, dtype=bool)  # denominator pinned to 1

    for j, term in enumerate(prior.terms):
        if term.op not in net.ops.names:
            raise CapacityError(
                f"term '{term.describe()}' needs operator {term.op!r}, "
                f"which the operator set {net.ops.names} lacks")
        if not (0 <= term.target < n_out):
            raise CapacityError(f"term '{term.describe()}' targets invalid output")
        for key in term.arg_weights:
            if key not in index:
                raise CapacityError(
                    f"term '{term.describe()}' references unknown input {key!r}; "
                    f"available: {names}")
        neuron = layer[j]
        k_op = net.ops.names.index(term.op)
        neuron.w1[:] = 0.0
        neuron.w2[:] = 0.0
        for key, wv in term.arg_weights.items():
            neuron.w1[0, k_op, index[key]] = wv
        neuron.w2[0, k_op] = 1.0
        neuron.w2[1:, -1] = 1.0  # remaining branches multiply by 1
        net.w3[term.target, 1 + j] = term.coeff
        if term.frozen:
            frozen[f"l0.n{j}.w1"][:] = True
            frozen[f"l0.n{j}.w2"][:] = True
            frozen["w3"][term.target, 1 + j] = True
    net.frozen = frozen
    return net


# ---------------------------------------------------------------------------
# regularizers
# ---------------------------------------------------------------------------


def reg_r0(w, a):
    """Sparsity penalty: sigmoid well around zero plus a shallow linear tail."""
    a1, a2, a3, a4 = a
    aw = ad.d_abs_smooth(w)
    if ad.is_node(aw):
        return a1 / (ad.exp(-a2 * aw + a3) + 1.0) + a4 * aw
    return a1 / (1.0 + np.exp(-a2 * aw + a3)) + a4 * aw


def reg_r1(o, w4, delta):
    """Penalty for the division denominator approaching the guard threshold."""
    den = ad.dot(list(w4), list(o))
    return ad.d_max_smooth(0.0, delta - den)


# ---------------------------------------------------------------------------
# symbolic extraction
# ---------------------------------------------------------------------------


def _sym_coeff(wv):
    import sympy as sp

    if float(wv) == int(wv):
        return sp.Integer(int(wv))
    return sp.Float(wv)


def _sympy_op(name, arg):
    import sympy as sp

    if name == "identity":
        return arg
    if name == "sin":
        return sp.sin(arg)
    if name == "cos":
        return sp.cos(arg)
    if name == "square":
        return arg ** 2
    if name == "cube":
        return arg ** 3
    if name == "sqrt_smooth":
        return (arg ** 2 + sp.Float(ad.SQRT_EPS) ** 2) ** sp.Rational(1, 4)
    if name == "exp":
        return sp.exp(arg)
    if name == "tanh":
        return sp.tanh(arg)
    raise ValueError(f"no symbolic form for operator {name!r}")


def symbols_for(net):
    import sympy as sp

    syms = [sp.Integer(1)]
    for name in net.input_names()[1:]:
        if name == "sin_w0t":
            syms.append(sp.sin(net.time_omega * sp.Symbol("t")))
        elif name == "cos_w0t":
            syms.append(sp.cos(net.time_omega * sp.Symbol("t")))
        else:
            syms.append(sp.Symbol(name))
    return syms


def extract_expression(net, prune_tol=0.0):
    """Fold the network into one expression per output dimension.

    Weights with magnitude below prune_tol are zeroed first; the result
    evaluates identically to the pruned network wherever the division
    guard is inactive.
    """
    import sympy as sp

    net = net.copy()
    if prune_tol > 0.0:
        for _, arr, _ in net.param_items():
            arr[np.abs(arr) < prune_tol] = 0.0
    z = symbols_for(net)
    for layer in net.layers:
        outs = []
        for neuron in layer:
            n_br, K, _ = neuron.w1.shape
            prod = sp.Integer(1)
            for i in range(n_br):
                branch = _sym_coeff(neuron.w2[i, -1]) if neuron.w2[i, -1] else sp.Integer(0)
                for k in range(K):
                    if neuron.w2[i, k] == 0.0:
                        continue
                    arg = sp.Add(*[_sym_coeff(wv) * zz for wv, zz in zip(neuron.w1[i, k], z) if wv])
                    branch = branch + _sym_coeff(neuron.w2[i, k]) * _sympy_op(net.ops.names[k], arg)
                prod = prod * branch
            outs.append(sp.expand_mul(prod) if prod.is_Mul else prod)
        z = [sp.Integer(1)] + outs
    exprs = []
    for d in range(net.n_out):
        num = sp.Add(*[_sym_coeff(wv) * zz for wv, zz in zip(net.w3[d], z) if wv])
        den = sp.Add(*[_sym_coeff(wv) * zz for wv, zz in zip(net.w4[d], z) if wv])
        if den == sp.Float(1.0) or den == sp.Integer(1):
            exprs.append(num)
        else:
            exprs.append(num / den)
    return exprs


def evaluate_expression(exprs, net, x, u=(), t=0.0):
    """Numeric evaluation of extracted expressions with the net's input layout."""
    import sympy as sp

    subs = {}
    for i, xv in enumerate(x):
        subs[sp.Symbol(f"x{i+1}")] = xv
    for i, uv in enumerate(u):
        subs[sp.Symbol(f"u{i+1}")] = uv
    subs[sp.Symbol("t")] = t
    return np.array([float(e.subs(subs).evalf()) for e in exprs])
