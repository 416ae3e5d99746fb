"""Reverse-mode automatic differentiation on a define-by-run scalar graph.

Every node carries one scalar quantity, optionally batched over a set of
evaluation points (value is a 0-d or 1-d float64 array, elementwise
semantics).  Gradients can be requested either as plain numbers (terminal
training pass) or as new graph nodes, which makes derivatives themselves
differentiable -- needed because the filter-constrained losses contain
time derivatives and Jacobians of network outputs that are then
differentiated again with respect to the weights.

Nodes are created with monotonically increasing ids, so sorting by id is
a reproducible topological order.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

_COUNTER = itertools.count()

ABS_EPS = 1e-8    # smoothing of |x| at 0
MAX_EPS = 1e-8    # smoothing of max(a, b) at a == b
SQRT_EPS = 1e-6   # smoothing of the square root below this scale


class DomainError(ValueError):
    """An operation was evaluated outside its declared domain."""

    def __init__(self, op, node_id, detail):
        super().__init__(f"domain violation in op '{op}' (node {node_id}): {detail}")
        self.op = op
        self.node_id = node_id


def _as_value(x):
    v = np.asarray(x, dtype=np.float64)
    if v.ndim > 1:
        raise ValueError(f"node values must be scalar or 1-d, got shape {v.shape}")
    return v


class Node:
    """One scalar quantity in the computation graph."""

    __slots__ = ("uid", "tag", "value", "parents", "meta")

    def __init__(self, tag, value, parents=(), meta=None):
        self.uid = next(_COUNTER)
        self.tag = tag
        self.value = value
        self.parents = parents
        self.meta = meta

    def __repr__(self):
        return f"Node({self.tag}#{self.uid}, value={self.value!r})"

    # arithmetic sugar; floats are lifted to constants
    def __add__(self, other):
        return add(self, lift(other))

    def __radd__(self, other):
        return add(lift(other), self)

    def __sub__(self, other):
        return sub(self, lift(other))

    def __rsub__(self, other):
        return sub(lift(other), self)

    def __mul__(self, other):
        return mul(self, lift(other))

    def __rmul__(self, other):
        return mul(lift(other), self)

    def __truediv__(self, other):
        return div(self, lift(other))

    def __rtruediv__(self, other):
        return div(lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, k):
        return pow_int(self, k)


@dataclass
class Gradient:
    """Gradient of a scalar output with respect to an ordered list of inputs."""

    wrt: list
    values: np.ndarray


def lift(x):
    return x if isinstance(x, Node) else const(x)


def var(value):
    """Create a bindable input/parameter node."""
    return Node("input", _as_value(value))


def const(value):
    return Node("const", _as_value(value))


# ---------------------------------------------------------------------------
# primitive operations
#
# For each op we define how to compute the value, how to push an adjoint
# value back to the parents (fast numpy path), and how to build the local
# partial as a node (graph path, used for nested differentiation).
# ---------------------------------------------------------------------------


def add(a, b):
    return Node("add", a.value + b.value, (a, b))


def sub(a, b):
    return Node("sub", a.value - b.value, (a, b))


def neg(a):
    return Node("neg", -a.value, (a,))


def mul(a, b):
    return Node("mul", a.value * b.value, (a, b))


def div(a, b):
    if np.any(b.value == 0.0):
        raise DomainError("div", b.uid, "zero denominator")
    return Node("div", a.value / b.value, (a, b))


def guard_div(num, den, delta):
    """Guarded ratio: num/den where den > delta, else 0 (totalized division)."""
    mask = den.value > delta
    safe = np.where(mask, den.value, 1.0)
    return Node("guard_div", np.where(mask, num.value / safe, 0.0), (num, den),
                meta=float(delta))


def sin(a):
    return Node("sin", np.sin(a.value), (a,))


def cos(a):
    return Node("cos", np.cos(a.value), (a,))


def tanh(a):
    return Node("tanh", np.tanh(a.value), (a,))


def exp(a):
    return Node("exp", np.exp(a.value), (a,))


def log(a):
    if np.any(a.value <= 0.0):
        raise DomainError("log", a.uid, "argument <= 0")
    return Node("log", np.log(a.value), (a,))


def sqrt(a):
    if np.any(a.value < 0.0):
        raise DomainError("sqrt", a.uid, "argument < 0")
    return Node("sqrt", np.sqrt(a.value), (a,))


def sqrt_smooth(a, eps=SQRT_EPS):
    """Even smooth surrogate for sqrt(|x|): (x^2 + eps^2)^(1/4)."""
    return Node("sqrt_smooth", np.power(a.value * a.value + eps * eps, 0.25), (a,),
                meta=float(eps))


def pow_int(a, k):
    k = int(k)
    if k < 0 and np.any(a.value == 0.0):
        raise DomainError("pow_int", a.uid, f"zero base with negative exponent {k}")
    return Node("pow_int", a.value ** k, (a,), meta=k)


def abs_smooth(a, eps=ABS_EPS):
    """Smooth surrogate for |x|: sqrt(x^2 + eps^2)."""
    return Node("abs_smooth", np.sqrt(a.value * a.value + eps * eps), (a,),
                meta=float(eps))


def max_smooth(a, b, eps=MAX_EPS):
    """Smooth surrogate for max(a, b): (a + b + sqrt((a-b)^2 + eps^2)) / 2."""
    a, b = lift(a), lift(b)
    d = a.value - b.value
    return Node("max_smooth", 0.5 * (a.value + b.value + np.sqrt(d * d + eps * eps)),
                (a, b), meta=float(eps))


def bsum(a):
    """Reduce a batched node to its scalar sum over the batch axis."""
    return Node("bsum", np.asarray(np.sum(a.value)), (a,))


def pick(a, idx):
    """Extract one batch element as a scalar node."""
    if a.value.ndim == 0:
        return a
    return Node("pick", np.asarray(a.value[idx]), (a,), meta=int(idx))


def scatter(a, idx, size):
    """Place a scalar node at one position of a zero batch vector."""
    out = np.zeros(size)
    out[idx] = a.value
    return Node("scatter", out, (a,), meta=(int(idx), int(size)))


def affine(weights, inputs):
    """Fused dot product sum_i w_i * x_i over two equally long node lists."""
    if len(weights) != len(inputs):
        raise ValueError("affine: weight/input length mismatch")
    total = 0.0
    for w, x in zip(weights, inputs):
        total = total + w.value * x.value
    return Node("affine", np.asarray(total), tuple(weights) + tuple(inputs),
                meta=len(weights))


def dot(weights, inputs):
    """affine() when any operand is a node, plain arithmetic otherwise."""
    if any(isinstance(v, Node) for v in weights) or any(isinstance(v, Node) for v in inputs):
        return affine([lift(w) for w in weights], [lift(x) for x in inputs])
    total = 0.0
    for w, x in zip(weights, inputs):
        total = total + w * x
    return total


# ---------------------------------------------------------------------------
# value re-evaluation (spec-level `forward`)
# ---------------------------------------------------------------------------


def _value_of(node, vals):
    p = [vals[q.uid] for q in node.parents]
    tag, meta = node.tag, node.meta
    if tag == "add":
        return p[0] + p[1]
    if tag == "sub":
        return p[0] - p[1]
    if tag == "neg":
        return -p[0]
    if tag == "mul":
        return p[0] * p[1]
    if tag == "div":
        if np.any(p[1] == 0.0):
            raise DomainError("div", node.uid, "zero denominator")
        return p[0] / p[1]
    if tag == "guard_div":
        mask = p[1] > meta
        return np.where(mask, p[0] / np.where(mask, p[1], 1.0), 0.0)
    if tag == "sin":
        return np.sin(p[0])
    if tag == "cos":
        return np.cos(p[0])
    if tag == "tanh":
        return np.tanh(p[0])
    if tag == "exp":
        return np.exp(p[0])
    if tag == "log":
        if np.any(p[0] <= 0.0):
            raise DomainError("log", node.uid, "argument <= 0")
        return np.log(p[0])
    if tag == "sqrt":
        if np.any(p[0] < 0.0):
            raise DomainError("sqrt", node.uid, "argument < 0")
        return np.sqrt(p[0])
    if tag == "sqrt_smooth":
        return np.power(p[0] * p[0] + meta * meta, 0.25)
    if tag == "pow_int":
        if meta < 0 and np.any(p[0] == 0.0):
            raise DomainError("pow_int", node.uid, "zero base, negative exponent")
        return p[0] ** meta
    if tag == "abs_smooth":
        return np.sqrt(p[0] * p[0] + meta * meta)
    if tag == "max_smooth":
        d = p[0] - p[1]
        return 0.5 * (p[0] + p[1] + np.sqrt(d * d + meta * meta))
    if tag == "bsum":
        return np.asarray(np.sum(p[0]))
    if tag == "pick":
        return np.asarray(p[0][meta]) if np.ndim(p[0]) else np.asarray(p[0])
    if tag == "scatter":
        idx, size = meta
        out = np.zeros(size)
        out[idx] = p[0]
        return out
    if tag == "affine":
        k = meta
        total = 0.0
        for i in range(k):
            total = total + p[i] * p[k + i]
        return np.asarray(total)
    raise ValueError(f"cannot re-evaluate node tag {tag!r}")


def ancestors(*outputs):
    """All nodes reachable from the outputs, sorted in creation (topological) order."""
    seen = {}
    stack = list(outputs)
    while stack:
        node = stack.pop()
        if node.uid in seen:
            continue
        seen[node.uid] = node
        stack.extend(node.parents)
    return [seen[k] for k in sorted(seen)]


def forward(output, bindings=None):
    """Re-evaluate the graph below `output`, substituting bound input values.

    Does not mutate the graph; returns the recomputed value of `output`.
    """
    bindings = bindings or {}
    bound = {n.uid: _as_value(v) for n, v in bindings.items()}
    vals = {}
    for node in ancestors(output):
        if node.uid in bound:
            vals[node.uid] = bound[node.uid]
        elif node.tag in ("input", "const"):
            vals[node.uid] = node.value
        else:
            vals[node.uid] = _value_of(node, vals)
    return vals[output.uid]


# ---------------------------------------------------------------------------
# reverse mode: fast numpy path
# ---------------------------------------------------------------------------


def _vjp_values(node, adj):
    """Adjoint contributions to each parent, as numpy values."""
    tag, meta, p = node.tag, node.meta, node.parents
    if tag == "add":
        return (adj, adj)
    if tag == "sub":
        return (adj, -adj)
    if tag == "neg":
        return (-adj,)
    if tag == "mul":
        return (adj * p[1].value, adj * p[0].value)
    if tag == "div":
        return (adj / p[1].value, -adj * node.value / p[1].value)
    if tag == "guard_div":
        mask = p[1].value > meta
        safe = np.where(mask, p[1].value, 1.0)
        g = np.where(mask, adj / safe, 0.0)
        return (g, -g * node.value)
    if tag == "sin":
        return (adj * np.cos(p[0].value),)
    if tag == "cos":
        return (-adj * np.sin(p[0].value),)
    if tag == "tanh":
        return (adj * (1.0 - node.value * node.value),)
    if tag == "exp":
        return (adj * node.value,)
    if tag == "log":
        return (adj / p[0].value,)
    if tag == "sqrt":
        return (adj / (2.0 * node.value),)
    if tag == "sqrt_smooth":
        return (adj * p[0].value / (2.0 * node.value ** 3),)
    if tag == "pow_int":
        return (adj * meta * p[0].value ** (meta - 1),)
    if tag == "abs_smooth":
        return (adj * p[0].value / node.value,)
    if tag == "max_smooth":
        d = p[0].value - p[1].value
        r = np.sqrt(d * d + meta * meta)
        return (adj * 0.5 * (1.0 + d / r), adj * 0.5 * (1.0 - d / r))
    if tag == "bsum":
        return (adj,)
    if tag == "pick":
        out = np.zeros_like(p[0].value)
        out[meta] = adj
        return (out,)
    if tag == "scatter":
        return (adj[meta[0]] if np.ndim(adj) else adj,)
    if tag == "affine":
        k = meta
        scalar_weights = all(p[i].value.ndim == 0 for i in range(k))
        if scalar_weights and np.ndim(adj) == 1:
            H = np.stack([np.broadcast_to(p[k + i].value, adj.shape) for i in range(k)])
            w_contrib = H @ adj
            w_vals = np.array([p[i].value for i in range(k)])
            x_contrib = w_vals[:, None] * adj[None, :]
            return tuple(w_contrib) + tuple(x_contrib)
        out = []
        for i in range(k):
            out.append(adj * p[k + i].value)
        for i in range(k):
            out.append(adj * p[i].value)
        return tuple(out)
    raise ValueError(f"no vjp for node tag {tag!r}")


def _partial_node(node, i):
    """Local partial d node / d parents[i], built as a node (differentiable)."""
    tag, meta, p = node.tag, node.meta, node.parents
    if tag in ("add",):
        return const(1.0)
    if tag == "sub":
        return const(1.0) if i == 0 else const(-1.0)
    if tag == "neg":
        return const(-1.0)
    if tag == "mul":
        return p[1] if i == 0 else p[0]
    if tag == "div":
        if i == 0:
            return div(const(1.0), p[1])
        return neg(div(node, p[1]))
    if tag == "guard_div":
        if i == 0:
            return guard_div(const(1.0), p[1], meta)
        return neg(guard_div(node, p[1], meta))
    if tag == "sin":
        return cos(p[0])
    if tag == "cos":
        return neg(sin(p[0]))
    if tag == "tanh":
        return sub(const(1.0), mul(node, node))
    if tag == "exp":
        return node
    if tag == "log":
        return div(const(1.0), p[0])
    if tag == "sqrt":
        return div(const(0.5), node)
    if tag == "sqrt_smooth":
        return div(p[0], mul(const(2.0), pow_int(node, 3)))
    if tag == "pow_int":
        return mul(const(float(meta)), pow_int(p[0], meta - 1))
    if tag == "abs_smooth":
        return div(p[0], node)
    if tag == "max_smooth":
        d = sub(p[0], p[1])
        r = abs_smooth(d, meta)
        half = div(d, r)
        if i == 0:
            return mul(const(0.5), add(const(1.0), half))
        return mul(const(0.5), sub(const(1.0), half))
    if tag == "affine":
        k = meta
        return p[k + i] if i < k else p[i - k]
    raise ValueError(f"no nodewise partial for tag {tag!r}")


def _path_nodes(output, wrt):
    """Nodes lying on a path from any `wrt` node to `output`, topo sorted."""
    anc = ancestors(output)
    wanted = {w.uid for w in wrt}
    onpath = set(wanted)
    keep = []
    for node in anc:
        if node.uid in wanted:
            keep.append(node)
            continue
        if any(q.uid in onpath for q in node.parents):
            onpath.add(node.uid)
            keep.append(node)
    return keep, onpath


def grad(output, wrt, create_graph=False):
    """Gradients of a node with respect to the given nodes.

    For a scalar-valued output this is the ordinary gradient.  For a
    batched output the path must be elementwise (no batch reductions);
    the result is then the per-sample derivative of each batch element
    with respect to the matching element (or broadcast scalar) of the
    wrt node -- exactly the pointwise Jacobian entries needed when the
    same formula is evaluated over a batch of points.

    With create_graph=False returns numpy values (cheap terminal pass);
    with create_graph=True returns nodes so the result can be
    differentiated again.  Unreachable wrt nodes get a zero gradient.
    """
    keep, onpath = _path_nodes(output, wrt)
    batched = np.ndim(output.value) != 0
    if batched:
        for node in keep:
            if node.tag in ("bsum", "pick", "scatter"):
                raise ValueError(
                    "per-sample gradient of a batched output needs an "
                    f"elementwise path; found {node.tag!r} (node {node.uid})")
    if output.uid not in onpath:
        zeros = [const(np.zeros_like(w.value)) for w in wrt] if create_graph \
            else [np.zeros_like(w.value) for w in wrt]
        return zeros
    if create_graph:
        return _grad_nodes(output, wrt, keep, onpath, batched)

    acc = {output.uid: np.ones_like(output.value) if batched else np.float64(1.0)}
    for node in reversed(keep):
        adj = acc.get(node.uid)
        if adj is None or not node.parents:
            continue
        contribs = _vjp_values(node, adj)
        for parent, c in zip(node.parents, contribs):
            if parent.uid not in onpath:
                continue
            if np.ndim(parent.value) == 0 and np.ndim(c) > 0:
                c = np.sum(c)
            prev = acc.get(parent.uid)
            acc[parent.uid] = c if prev is None else prev + c
    out = []
    for w in wrt:
        g = acc.get(w.uid, None)
        if g is None:
            g = np.float64(0.0)
        elif np.ndim(w.value) == 0 and np.ndim(g) > 0:
            g = np.sum(g)
        out.append(np.asarray(g, dtype=np.float64))
    return out


def _grad_nodes(output, wrt, keep, onpath, batched=False):
    acc = {output.uid: const(np.ones_like(output.value)) if batched else const(1.0)}
    for node in reversed(keep):
        adj = acc.get(node.uid)
        if adj is None or not node.parents:
            continue
        for i, parent in enumerate(node.parents):
            if parent.uid not in onpath:
                continue
            if node.tag == "bsum":
                c = adj  # uniform broadcast back over the batch
            elif node.tag == "pick":
                c = scatter(adj, node.meta, parent.value.shape[0])
            elif node.tag == "scatter":
                c = pick(adj, node.meta[0])
            else:
                c = mul(adj, _partial_node(node, i))
            if np.ndim(parent.value) == 0 and np.ndim(c.value) > 0:
                c = bsum(c)
            prev = acc.get(parent.uid)
            acc[parent.uid] = c if prev is None else add(prev, c)
    out = []
    for w in wrt:
        out.append(acc.get(w.uid, const(0.0)))
    return out


def backward(output, wrt):
    """Spec-level gradient: numpy values packed with the wrt list."""
    values = grad(output, wrt, create_graph=False)
    return Gradient(wrt=list(wrt), values=np.array([np.sum(v) if np.ndim(v) else v for v in values]))


def jacobian(outputs, wrt, create_graph=False):
    """Row i holds the gradient of outputs[i]; numpy matrix or node matrix."""
    rows = [grad(o, wrt, create_graph=create_graph) for o in outputs]
    if create_graph:
        mat = np.empty((len(outputs), len(wrt)), dtype=object)
        for i, row in enumerate(rows):
            for j, g in enumerate(row):
                mat[i, j] = g
        return mat
    return np.array([[float(np.sum(g)) if np.ndim(g) else float(g) for g in row] for row in rows])


# ---------------------------------------------------------------------------
# forward mode along one input (time derivatives)
# ---------------------------------------------------------------------------


def forward_tangent(outputs, wrt):
    """d(outputs)/d(wrt) via forward accumulation, returned as nodes.

    One sweep yields the derivative of every output with respect to a single
    input node; the tangents are ordinary graph nodes and can be
    differentiated again.
    """
    anc = ancestors(*outputs)
    tangents = {wrt.uid: const(np.ones_like(wrt.value))}
    for node in anc:
        if node.uid in tangents or not node.parents:
            continue
        acc = None
        for i, parent in enumerate(node.parents):
            pt = tangents.get(parent.uid)
            if pt is None:
                continue
            if node.tag == "bsum":
                c = bsum(pt)
            elif node.tag == "pick":
                c = pick(pt, node.meta)
            elif node.tag == "scatter":
                c = scatter(pt, node.meta[0], node.meta[1])
            else:
                c = mul(_partial_node(node, i), pt)
            acc = c if acc is None else add(acc, c)
        if acc is not None:
            tangents[node.uid] = acc
    out = []
    for o in outputs:
        t = tangents.get(o.uid)
        out.append(t if t is not None else const(np.zeros_like(o.value)))
    return out


# ---------------------------------------------------------------------------
# dispatch helpers: same formulas for nodes and numpy arrays
# ---------------------------------------------------------------------------


def d_sin(x):
    return sin(x) if isinstance(x, Node) else np.sin(x)


def d_cos(x):
    return cos(x) if isinstance(x, Node) else np.cos(x)


def d_tanh(x):
    return tanh(x) if isinstance(x, Node) else np.tanh(x)


def d_exp(x):
    return exp(x) if isinstance(x, Node) else np.exp(x)


def d_log(x):
    return log(x) if isinstance(x, Node) else np.log(x)


def d_sqrt(x):
    return sqrt(x) if isinstance(x, Node) else np.sqrt(x)


def d_sqrt_smooth(x, eps=SQRT_EPS):
    if isinstance(x, Node):
        return sqrt_smooth(x, eps)
    return np.power(x * x + eps * eps, 0.25)


def d_abs_smooth(x, eps=ABS_EPS):
    if isinstance(x, Node):
        return abs_smooth(x, eps)
    return np.sqrt(x * x + eps * eps)


def d_max_smooth(a, b, eps=MAX_EPS):
    if isinstance(a, Node) or isinstance(b, Node):
        return max_smooth(lift(a), lift(b), eps)
    d = a - b
    return 0.5 * (a + b + np.sqrt(d * d + eps * eps))


def is_node(x):
    return isinstance(x, Node)


def value_of(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def norm2_smooth(terms, eps=1e-12):
    """Euclidean norm of a list of node/array residuals, smoothed at 0."""
    total = None
    for r in terms:
        sq = mul(r, r) if isinstance(r, Node) else r * r
        total = sq if total is None else total + sq
    if isinstance(total, Node):
        return sqrt(total + const(eps * eps))
    return np.sqrt(total + eps * eps)
