"""Reverse-mode autodiff on dense float64 arrays.

A GradGraph is a define-by-run tape: every kernel application appends a
node holding the op name, input node references and the computed value.
Backward walks the tape in reverse and accumulates gradients into every
trainable parameter node. Graphs are rebuilt per minibatch, which is what
lets the trainer swap which parameter groups are trainable between the
discriminator and generator phases.

Shapes are kept deliberately rigid: kernels operate on scalars (0-d),
vectors (1-d) and matrices (2-d), and the only broadcast allowed anywhere
is adding a bias vector to every row of a matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when kernel operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or infinity."""


def _as_f64(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
    return arr


class Node:
    """One tape entry: an op, its input nodes and the computed value."""

    __slots__ = ("graph", "idx", "op", "inputs", "value", "trainable", "attrs", "name")

    def __init__(self, graph, idx, op, inputs, value, trainable=False, attrs=None, name=None):
        self.graph = graph
        self.idx = idx
        self.op = op
        self.inputs = inputs
        self.value = value
        self.trainable = trainable
        self.attrs = attrs or {}
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or self.op
        return f"Node({self.idx}, {tag}, shape={self.value.shape})"


@dataclass
class GradCheckReport:
    """Outcome of comparing backward gradients with central differences."""

    max_rel_error: float
    passed: bool
    per_param: dict = field(default_factory=dict)


class GradGraph:
    """Tape of kernel applications, topologically ordered by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _record(self, op, inputs, value, trainable=False, attrs=None, name=None):
        value = _as_f64(value)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(f"kernel {op!r} produced non-finite values")
        node = Node(self, len(self.nodes), op, list(inputs), value,
                    trainable=trainable, attrs=attrs, name=name)
        self.nodes.append(node)
        return node

    def parameter(self, value, name=None) -> Node:
        return self._record("leaf", [], np.array(value, dtype=np.float64),
                            trainable=True, name=name)

    def constant(self, value, name=None) -> Node:
        return self._record("leaf", [], np.array(value, dtype=np.float64),
                            trainable=False, name=name)

    def parameters(self) -> list[Node]:
        return [n for n in self.nodes if n.trainable]

    # -- backward ---------------------------------------------------------

    def backward(self, loss: Node) -> dict[int, np.ndarray]:
        """Gradient of a scalar loss w.r.t. every trainable leaf.

        Returns a map node.idx -> gradient array (same shape as the leaf).
        Unreached parameters get zero gradients. Accumulation order is
        fixed by tape order, so repeated calls are bitwise identical.
        """
        if loss.graph is not self:
            raise ValueError("loss node belongs to a different graph")
        if loss.value.ndim != 0 and loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.idx: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.idx + 1]):
            g = grads.pop(node.idx, None)
            if g is None or node.op == "leaf":
                if g is not None and node.op == "leaf":
                    grads[node.idx] = g
                continue
            for parent, pg in zip(node.inputs, _BACKWARD[node.op](node, g)):
                if pg is None:
                    continue
                if parent.idx in grads:
                    grads[parent.idx] = grads[parent.idx] + pg
                else:
                    grads[parent.idx] = pg
        out = {}
        for p in self.parameters():
            out[p.idx] = grads.get(p.idx, np.zeros_like(p.value))
        return out

    # -- replay (used by the finite-difference checker) --------------------

    def replay(self, subset=None) -> None:
        """Recompute node values in tape order after a leaf value change."""
        for node in self.nodes:
            if node.op == "leaf":
                continue
            if subset is not None and node.idx not in subset:
                continue
            node.value = _FORWARD[node.op](node)

    def _dependents(self, leaf: Node) -> set[int]:
        dep = {leaf.idx}
        for node in self.nodes:
            if node.op != "leaf" and any(p.idx in dep for p in node.inputs):
                dep.add(node.idx)
        return dep

    def check_gradients(self, loss: Node, step: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
        """Compare backward output against central finite differences.

        Relative error uses max(|analytic|, |numeric|, 1) in the
        denominator so near-zero gradients are judged on absolute error.
        """
        analytic = self.backward(loss)
        worst = 0.0
        per_param = {}
        for p in self.parameters():
            dep = self._dependents(p)
            grad = analytic[p.idx]
            num = np.zeros_like(p.value)
            flat = p.value.reshape(-1)
            nflat = num.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                self.replay(dep)
                up = float(loss.value)
                flat[k] = orig - step
                self.replay(dep)
                down = float(loss.value)
                flat[k] = orig
                nflat[k] = (up - down) / (2.0 * step)
            self.replay(dep)
            denom = np.maximum(np.maximum(np.abs(grad), np.abs(num)), 1.0)
            err = float(np.max(np.abs(grad - num) / denom)) if flat.size else 0.0
            per_param[p.name or p.idx] = err
            worst = max(worst, err)
        return GradCheckReport(max_rel_error=worst, passed=worst <= tol, per_param=per_param)


# -- kernels ---------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise ShapeError(f"matmul needs (m,k)@(k,n), got {a.value.shape} @ {b.value.shape}")
    return a.graph._record("matmul", [a, b], a.value @ b.value)


def add(a: Node, b: Node) -> Node:
    va, vb = a.value, b.value
    bias = va.ndim == 2 and vb.ndim == 1 and vb.shape[0] == va.shape[1]
    if not bias and va.shape != vb.shape:
        raise ShapeError(f"add needs equal shapes or matrix+bias, got {va.shape} + {vb.shape}")
    return a.graph._record("add", [a, b], va + vb)


def concat(*parts: Node) -> Node:
    if len(parts) < 2:
        raise ShapeError("concat needs at least two inputs")
    ndim = parts[0].value.ndim
    if ndim not in (1, 2) or any(p.value.ndim != ndim for p in parts):
        raise ShapeError("concat inputs must all be 1-d or all 2-d")
    axis = ndim - 1
    if ndim == 2:
        rows = parts[0].value.shape[0]
        if any(p.value.shape[0] != rows for p in parts):
            raise ShapeError("concat of matrices needs equal row counts")
    value = np.concatenate([p.value for p in parts], axis=axis)
    widths = [p.value.shape[axis] for p in parts]
    return parts[0].graph._record("concat", list(parts), value, attrs={"widths": widths, "axis": axis})


def relu(x: Node) -> Node:
    return x.graph._record("relu", [x], np.maximum(x.value, 0.0))


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return x.graph._record("sigmoid", [x], out)


def softmax(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"softmax expects a matrix, got shape {x.value.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return x.graph._record("softmax", [x], e / e.sum(axis=1, keepdims=True))


def embed_lookup(table: Node, indices) -> Node:
    idx = np.asarray(indices, dtype=np.int64)
    if table.value.ndim != 2 or idx.ndim != 1:
        raise ShapeError("embed_lookup expects a 2-d table and 1-d indices")
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.value.shape[0]})")
    return table.graph._record("embed_lookup", [table], table.value[idx], attrs={"indices": idx})


def reduce_mean(x: Node) -> Node:
    return x.graph._record("reduce_mean", [x], np.mean(x.value))


def reduce_sum(x: Node) -> Node:
    return x.graph._record("reduce_sum", [x], np.sum(x.value))


def log(x: Node) -> Node:
    if np.any(x.value <= 0.0):
        raise NonFiniteError("log of non-positive value")
    return x.graph._record("log", [x], np.log(x.value))


def exp(x: Node) -> Node:
    return x.graph._record("exp", [x], np.exp(x.value))


def elementwise_mul(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"elementwise_mul needs equal shapes, got {a.value.shape} * {b.value.shape}")
    return a.graph._record("elementwise_mul", [a, b], a.value * b.value)


def affine(x: Node, scale: float, shift: float = 0.0) -> Node:
    return x.graph._record("affine", [x], scale * x.value + shift,
                           attrs={"scale": float(scale), "shift": float(shift)})


def div(a: Node, b: Node) -> Node:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"div needs equal shapes, got {a.value.shape} / {b.value.shape}")
    if np.any(b.value == 0.0):
        raise NonFiniteError("division by zero")
    return a.graph._record("div", [a, b], a.value / b.value)


def sqrt(x: Node) -> Node:
    """Square root clamped below at zero; subgradient 0 on the clamp."""
    return x.graph._record("sqrt", [x], np.sqrt(np.maximum(x.value, 0.0)))


def clamp(x: Node, lo: float, hi: float) -> Node:
    return x.graph._record("clamp", [x], np.clip(x.value, lo, hi),
                           attrs={"lo": float(lo), "hi": float(hi)})


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.value.shape}")
    return x.graph._record("transpose", [x], x.value.T.copy())


# forward recomputation used by replay

_FORWARD = {
    "matmul": lambda n: n.inputs[0].value @ n.inputs[1].value,
    "add": lambda n: n.inputs[0].value + n.inputs[1].value,
    "concat": lambda n: np.concatenate([p.value for p in n.inputs], axis=n.attrs["axis"]),
    "relu": lambda n: np.maximum(n.inputs[0].value, 0.0),
    "sigmoid": lambda n: _sigmoid_value(n.inputs[0].value),
    "softmax": lambda n: _softmax_value(n.inputs[0].value),
    "embed_lookup": lambda n: n.inputs[0].value[n.attrs["indices"]],
    "reduce_mean": lambda n: np.mean(n.inputs[0].value),
    "reduce_sum": lambda n: np.sum(n.inputs[0].value),
    "log": lambda n: np.log(n.inputs[0].value),
    "exp": lambda n: np.exp(n.inputs[0].value),
    "elementwise_mul": lambda n: n.inputs[0].value * n.inputs[1].value,
    "affine": lambda n: n.attrs["scale"] * n.inputs[0].value + n.attrs["shift"],
    "div": lambda n: n.inputs[0].value / n.inputs[1].value,
    "sqrt": lambda n: np.sqrt(np.maximum(n.inputs[0].value, 0.0)),
    "clamp": lambda n: np.clip(n.inputs[0].value, n.attrs["lo"], n.attrs["hi"]),
    "transpose": lambda n: n.inputs[0].value.T.copy(),
}


def _sigmoid_value(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def _softmax_value(v):
    e = np.exp(v - v.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# backward rules: node, upstream grad -> per-input grads (None = no flow)


def _bw_matmul(n, g):
    a, b = n.inputs
    return [g @ b.value.T, a.value.T @ g]


def _bw_add(n, g):
    a, b = n.inputs
    if b.value.ndim == 1 and a.value.ndim == 2:
        return [g, g.sum(axis=0)]
    return [g, g]


def _bw_concat(n, g):
    out = []
    start = 0
    for w in n.attrs["widths"]:
        sl = (slice(None), slice(start, start + w)) if n.attrs["axis"] == 1 else slice(start, start + w)
        out.append(g[sl])
        start += w
    return out


def _bw_softmax(n, g):
    s = n.value
    return [s * (g - np.sum(g * s, axis=1, keepdims=True))]


def _bw_embed(n, g):
    table = n.inputs[0]
    grad = np.zeros_like(table.value)
    np.add.at(grad, n.attrs["indices"], g)
    return [grad]


def _bw_sqrt(n, g):
    x = n.inputs[0].value
    safe = np.where(x > 0.0, x, 1.0)
    return [np.where(x > 0.0, 0.5 * np.asarray(g, dtype=np.float64) / np.sqrt(safe), 0.0)]


_BACKWARD = {
    "matmul": _bw_matmul,
    "add": _bw_add,
    "concat": _bw_concat,
    "relu": lambda n, g: [g * (n.inputs[0].value > 0.0)],
    "sigmoid": lambda n, g: [g * n.value * (1.0 - n.value)],
    "softmax": _bw_softmax,
    "embed_lookup": _bw_embed,
    "reduce_mean": lambda n, g: [np.full_like(n.inputs[0].value, float(g) / n.inputs[0].value.size)],
    "reduce_sum": lambda n, g: [np.full_like(n.inputs[0].value, float(g))],
    "log": lambda n, g: [g / n.inputs[0].value],
    "exp": lambda n, g: [g * n.value],
    "elementwise_mul": lambda n, g: [g * n.inputs[1].value, g * n.inputs[0].value],
    "affine": lambda n, g: [n.attrs["scale"] * g],
    "div": lambda n, g: [g / n.inputs[1].value, -g * n.value / n.inputs[1].value],
    "sqrt": _bw_sqrt,
    "clamp": lambda n, g: [g * ((n.inputs[0].value > n.attrs["lo"]) & (n.inputs[0].value < n.attrs["hi"]))],
    "transpose": lambda n, g: [g.T.copy()],
}


# public dispatch over the named kernel set

KERNELS = {
    "matmul": matmul,
    "add": add,
    "concat": concat,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "embed_lookup": embed_lookup,
    "reduce_mean": reduce_mean,
    "log": log,
    "elementwise_mul": elementwise_mul,
}


def apply_kernel(kind: str, *inputs):
    """Apply a named kernel to already-recorded nodes.

    `kind` must be one of KERNELS. Inputs are validated for shape and
    finiteness; the result is recorded on the inputs' graph.
    """
    if kind not in KERNELS:
        raise KeyError(f"unknown kernel {kind!r}; expected one of {sorted(KERNELS)}")
    for x in inputs:
        if isinstance(x, Node) and not np.all(np.isfinite(x.value)):
            raise NonFiniteError(f"kernel {kind!r} given non-finite input")
    return KERNELS[kind](*inputs)
