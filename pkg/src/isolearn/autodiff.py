"""Tape-based reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` is a Wengert list.  Every op appends a record (kind, input
ids, attributes) and, when all inputs carry values, evaluates eagerly.  Leaves
created without a value act as placeholders that :meth:`Tape.eval` binds
later.

Activations expose their first derivative as a tape op whose own derivative is
the second derivative, so a Jacobian-vector product built on a tape can be
differentiated with respect to the network weights.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

SMOOTH_EPS = 1e-12


class TapeError(RuntimeError):
    pass


class ShapeError(TapeError, ValueError):
    pass


class NonFiniteError(TapeError, FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# activations


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _tanh_d1(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_d2(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _softplus_d2(x):
    s = _sigmoid(x)
    return s * (1.0 - s)


@dataclass(frozen=True)
class Activation:
    """An elementwise nonlinearity with closed-form first and second derivatives."""

    name: str
    f: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    # first derivative expressed through the output f(x), to skip recomputing f
    d1_from_f: Callable[[np.ndarray], np.ndarray] | None = None

    def derivative(self, x, order=0):
        return (self.f, self.d1, self.d2)[order](x)


ACTIVATIONS = {
    "tanh": Activation("tanh", np.tanh, _tanh_d1, _tanh_d2, lambda y: 1.0 - y * y),
    "softplus": Activation("softplus", _softplus, _sigmoid, _softplus_d2, lambda y: -np.expm1(-y)),
    "identity": Activation(
        "identity",
        lambda x: np.array(x, dtype=float, copy=True),
        np.ones_like,
        np.zeros_like,
        np.ones_like,
    ),
}


def get_activation(name) -> Activation:
    if isinstance(name, Activation):
        return name
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# ---------------------------------------------------------------------------
# op table: forward(values, attrs) and backward(g, values, out, attrs)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _matmul_bwd(g, vals, out, attrs, needs=(True, True)):
    a, b = vals
    a2 = a if a.ndim == 2 else a[None, :]
    b2 = b if b.ndim == 2 else b[:, None]
    g2 = np.reshape(g, (a2.shape[0], b2.shape[1]))
    return [
        (g2 @ b2.T).reshape(a.shape) if needs[0] else None,
        (a2.T @ g2).reshape(b.shape) if needs[1] else None,
    ]


def _sum_bwd(g, vals, out, attrs):
    (x,) = vals
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        g = np.expand_dims(g, axis)
    return [np.broadcast_to(g, x.shape)]


def _act_bwd(g, vals, out, attrs):
    order, act = attrs["order"], attrs["act"]
    if order >= 2:
        raise TapeError("third-order derivatives are not supported")
    if order == 0 and act.d1_from_f is not None:
        return [g * act.d1_from_f(out)]
    return [g * act.derivative(vals[0], order + 1)]


def _take_bwd(g, vals, out, attrs):
    x = vals[0]
    idx = attrs["index"].reshape(-1)
    n = x.shape[0]
    g2 = g.reshape(idx.size, -1)
    if g2.shape[1] <= 32:
        # bincount scatter-add is much faster than np.add.at and order-deterministic
        cols = [np.bincount(idx % n, weights=g2[:, j], minlength=n) for j in range(g2.shape[1])]
        return [np.stack(cols, axis=1).reshape(x.shape)]
    gx = np.zeros_like(x)
    np.add.at(gx, attrs["index"], g)
    return [gx]


def _norm_fwd(vals, attrs):
    (x,) = vals
    return np.sqrt(np.sum(x * x, axis=attrs["axis"]) + attrs["eps"])


def _norm_bwd(g, vals, out, attrs):
    (x,) = vals
    axis = attrs["axis"]
    if axis is not None:
        g = np.expand_dims(g, axis)
        out = np.expand_dims(out, axis)
    return [g * x / out]


_FORWARD = {
    "add": lambda v, a: v[0] + v[1],
    "sub": lambda v, a: v[0] - v[1],
    "mul": lambda v, a: v[0] * v[1],
    "neg": lambda v, a: -v[0],
    "scale": lambda v, a: a["c"] * v[0],
    "matmul": lambda v, a: np.matmul(v[0], v[1]),
    "transpose": lambda v, a: v[0].T.copy(),
    "act": lambda v, a: a["act"].derivative(v[0], a["order"]),
    "sum": lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]),
    "square": lambda v, a: v[0] * v[0],
    "sqrt": lambda v, a: np.sqrt(v[0] + a["eps"]),
    "norm": _norm_fwd,
    "take": lambda v, a: np.take(v[0], a["index"], axis=0),
    "reshape": lambda v, a: v[0].reshape(a["shape"]),
    "concat": lambda v, a: np.concatenate(v, axis=0),
}

def _binary_bwd(ga, gb):
    def bwd(g, v, o, a, needs):
        return [
            _unbroadcast(ga(g, v), v[0].shape) if needs[0] else None,
            _unbroadcast(gb(g, v), v[1].shape) if needs[1] else None,
        ]

    return bwd


def _unary(fn):
    return lambda g, v, o, a, needs: [fn(g, v, o, a)]


_BACKWARD = {
    "add": _binary_bwd(lambda g, v: g, lambda g, v: g),
    "sub": _binary_bwd(lambda g, v: g, lambda g, v: -g),
    "mul": _binary_bwd(lambda g, v: g * v[1], lambda g, v: g * v[0]),
    "neg": _unary(lambda g, v, o, a: -g),
    "scale": _unary(lambda g, v, o, a: a["c"] * g),
    "matmul": lambda g, v, o, a, needs: _matmul_bwd(g, v, o, a, needs),
    "transpose": _unary(lambda g, v, o, a: g.T),
    "act": _unary(lambda g, v, o, a: _act_bwd(g, v, o, a)[0]),
    "sum": _unary(lambda g, v, o, a: _sum_bwd(g, v, o, a)[0]),
    "square": _unary(lambda g, v, o, a: 2.0 * g * v[0]),
    "sqrt": _unary(lambda g, v, o, a: 0.5 * g / o),
    "norm": _unary(lambda g, v, o, a: _norm_bwd(g, v, o, a)[0]),
    "take": _unary(lambda g, v, o, a: _take_bwd(g, v, o, a)[0]),
    "reshape": _unary(lambda g, v, o, a: g.reshape(v[0].shape)),
    "concat": lambda g, v, o, a, needs: np.split(g, np.cumsum([len(x) for x in v])[:-1], axis=0),
}


def _reduced_shape(shape, axis, keepdims):
    if axis is None:
        return tuple(1 for _ in shape) if keepdims else ()
    axis = axis % len(shape)
    if keepdims:
        return tuple(1 if i == axis else n for i, n in enumerate(shape))
    return tuple(n for i, n in enumerate(shape) if i != axis)


def _infer_shape(kind, shapes, attrs):
    if kind in ("add", "sub", "mul"):
        return tuple(np.broadcast_shapes(*shapes))
    if kind in ("neg", "scale", "act", "square", "sqrt"):
        return shapes[0]
    if kind == "matmul":
        a, b = shapes
        if not (1 <= len(a) <= 2 and 1 <= len(b) <= 2):
            raise ValueError(f"matmul supports 1-D/2-D operands, got {a} @ {b}")
        if a[-1] != b[0]:
            raise ValueError(f"inner dimensions differ: {a} @ {b}")
        return a[:-1] + b[1:]
    if kind == "transpose":
        if len(shapes[0]) != 2:
            raise ValueError(f"transpose needs a 2-D operand, got {shapes[0]}")
        return shapes[0][::-1]
    if kind == "sum":
        return _reduced_shape(shapes[0], attrs["axis"], attrs["keepdims"])
    if kind == "norm":
        return _reduced_shape(shapes[0], attrs["axis"], False)
    if kind == "take":
        idx = attrs["index"]
        if idx.size and (idx.min() < -shapes[0][0] or idx.max() >= shapes[0][0]):
            raise ValueError(f"row index out of range for shape {shapes[0]}")
        return idx.shape + shapes[0][1:]
    if kind == "reshape":
        new = attrs["shape"]
        if int(np.prod(new, dtype=np.int64)) != int(np.prod(shapes[0], dtype=np.int64)):
            raise ValueError(f"cannot reshape {shapes[0]} to {new}")
        return new
    if kind == "concat":
        if any(len(sh) == 0 or sh[1:] != shapes[0][1:] for sh in shapes):
            raise ValueError(f"cannot stack rows of shapes {shapes}")
        return (sum(sh[0] for sh in shapes),) + shapes[0][1:]
    raise ValueError(f"unknown op {kind!r}")


# ---------------------------------------------------------------------------


class Node:
    """Handle to one record on a tape."""

    __slots__ = ("_tape", "id", "kind", "inputs", "attrs", "shape", "value", "name", "requires_grad")

    def __init__(self, tape, id, kind, inputs, attrs, shape, value, name, requires_grad):
        # weak, so a finished tape and its intermediate arrays are freed without waiting for the cycle collector
        self._tape = weakref.ref(tape)
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.attrs = attrs
        self.shape = shape
        self.value = value
        self.name = name
        self.requires_grad = requires_grad

    @property
    def tape(self):
        tape = self._tape()
        if tape is None:
            raise TapeError(f"node {self.id} outlived its tape")
        return tape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Node {self.id} {self.kind}{label} shape={self.shape}>"

    def __add__(self, other):
        return self.tape.add(self, other)

    def __radd__(self, other):
        return self.tape.add(other, self)

    def __sub__(self, other):
        return self.tape.sub(self, other)

    def __rsub__(self, other):
        return self.tape.sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.scale(self, other)
        return self.tape.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.tape.neg(self)

    def __matmul__(self, other):
        return self.tape.matmul(self, other)

    def __rmatmul__(self, other):
        return self.tape.matmul(other, self)

    @property
    def T(self):
        return self.tape.transpose(self)


class Tape:
    """Ordered op records plus lazily allocated adjoints.

    Single-owner: a tape must not be shared between threads while a forward or
    backward pass is running.
    """

    def __init__(self, check_finite=True):
        self.nodes: list[Node] = []
        self.adjoints: dict[int, np.ndarray] = {}
        self.check_finite = check_finite

    # -- construction -----------------------------------------------------

    def leaf(self, value=None, *, shape=None, name=None, requires_grad=True) -> Node:
        if value is not None:
            value = np.array(value, dtype=np.float64)
            if shape is not None and tuple(shape) != value.shape:
                raise ShapeError(f"leaf {name!r}: value shape {value.shape} != declared {tuple(shape)}")
            shape = value.shape
            self._check(value, len(self.nodes), name)
        elif shape is None:
            raise ShapeError(f"leaf {name!r} needs a value or a shape")
        node = Node(self, len(self.nodes), "leaf", (), {}, tuple(shape), value, name, requires_grad)
        self.nodes.append(node)
        return node

    def const(self, value, name=None) -> Node:
        return self.leaf(value, name=name, requires_grad=False)

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.tape is not self:
                raise TapeError(f"{x!r} belongs to a different tape")
            return x
        return self.const(x)

    def _record(self, kind, inputs, name=None, **attrs) -> Node:
        inputs = tuple(self._as_node(x) for x in inputs)
        nid = len(self.nodes)
        try:
            shape = _infer_shape(kind, [n.shape for n in inputs], attrs)
        except ValueError as exc:
            raise ShapeError(f"node {nid} ({kind}): {exc}") from None
        requires_grad = any(n.requires_grad for n in inputs)
        value = None
        if all(n.value is not None for n in inputs):
            value = self._apply(nid, kind, [n.value for n in inputs], attrs, name)
        node = Node(self, nid, kind, tuple(n.id for n in inputs), attrs, shape, value, name, requires_grad)
        self.nodes.append(node)
        return node

    def _apply(self, nid, kind, vals, attrs, name):
        out = np.asarray(_FORWARD[kind](vals, attrs), dtype=np.float64)
        self._check(out, nid, name)
        return out

    def _check(self, value, nid, name):
        if self.check_finite and not np.all(np.isfinite(value)):
            label = f" ({name})" if name else ""
            raise NonFiniteError(f"non-finite value at node {nid}{label}")

    # -- primitive ops ----------------------------------------------------

    def add(self, a, b, name=None):
        return self._record("add", (a, b), name)

    def sub(self, a, b, name=None):
        return self._record("sub", (a, b), name)

    def mul(self, a, b, name=None):
        return self._record("mul", (a, b), name)

    def neg(self, a, name=None):
        return self._record("neg", (a,), name)

    def scale(self, a, c, name=None):
        return self._record("scale", (a,), name, c=float(c))

    def matmul(self, a, b, name=None):
        return self._record("matmul", (a, b), name)

    def transpose(self, a, name=None):
        return self._record("transpose", (a,), name)

    def activation(self, x, kind, order=0, name=None):
        """Apply an activation (order 0) or its first/second derivative."""
        if order not in (0, 1, 2):
            raise ValueError("activation order must be 0, 1 or 2")
        return self._record("act", (x,), name, act=get_activation(kind), order=order)

    def sum(self, x, axis=None, keepdims=False, name=None):
        return self._record("sum", (x,), name, axis=axis, keepdims=keepdims)

    def mean(self, x, name=None):
        x = self._as_node(x)
        n = int(np.prod(x.shape, dtype=np.int64))
        if n == 0:
            raise ShapeError(f"mean of empty node {x.id}")
        return self.scale(self.sum(x), 1.0 / n, name=name)

    def square(self, x, name=None):
        return self._record("square", (x,), name)

    def sqrt(self, x, eps=0.0, name=None):
        """``sqrt(x + eps)``; pass ``eps > 0`` wherever ``x`` can reach 0."""
        x = self._as_node(x)
        if x.value is not None and np.any(x.value + eps < 0):
            raise NonFiniteError(f"sqrt of negative value at node {x.id}")
        return self._record("sqrt", (x,), name, eps=float(eps))

    def norm(self, x, axis=None, eps=SMOOTH_EPS, name=None):
        """Smoothed L2 norm ``sqrt(sum(x**2) + eps)``."""
        return self._record("norm", (x,), name, axis=axis, eps=float(eps))

    def take(self, x, index, name=None):
        """Gather rows ``x[index]`` along axis 0."""
        index = np.asarray(index, dtype=np.intp)
        return self._record("take", (x,), name, index=index)

    def concat(self, xs, name=None):
        """Stack nodes along axis 0."""
        return self._record("concat", tuple(xs), name)

    def reshape(self, x, shape, name=None):
        return self._record("reshape", (x,), name, shape=tuple(shape))

    # -- evaluation -------------------------------------------------------

    def eval(self, bindings: Mapping | None = None, output: Node | int | None = None):
        """Re-run every op with leaves rebound from ``bindings``.

        ``bindings`` maps leaf nodes (or their ids) to arrays.  Returns the
        value of ``output`` (default: the last node).
        """
        for key, val in (bindings or {}).items():
            node = self.nodes[key.id if isinstance(key, Node) else key]
            if node.kind != "leaf":
                raise TapeError(f"node {node.id} is not a leaf")
            val = np.array(val, dtype=np.float64)
            if val.shape != node.shape:
                raise ShapeError(f"binding for leaf {node.id}: shape {val.shape} != {node.shape}")
            self._check(val, node.id, node.name)
            node.value = val
        for node in self.nodes:
            if node.kind == "leaf":
                if node.value is None:
                    raise TapeError(f"leaf {node.id} ({node.name}) is unbound")
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            node.value = self._apply(node.id, node.kind, vals, node.attrs, node.name)
        self.adjoints = {}
        if not self.nodes:
            raise TapeError("empty tape")
        out = self.nodes[-1] if output is None else self.nodes[output.id if isinstance(output, Node) else output]
        return out.value

    def backward(self, output: Node) -> dict[int, np.ndarray]:
        """Adjoints of a scalar ``output`` with respect to every differentiable leaf.

        Returns ``{leaf_id: gradient}``.  Node values are left untouched.
        """
        if output.tape is not self:
            raise TapeError("output belongs to a different tape")
        if output.shape != ():
            raise TapeError(f"backward needs a scalar output, node {output.id} has shape {output.shape}")
        if output.value is None:
            raise TapeError("backward called before forward evaluation")
        adj = {output.id: np.ones((), dtype=np.float64)}
        for node in reversed(self.nodes[: output.id + 1]):
            g = adj.get(node.id)
            if g is None or node.kind == "leaf" or not node.requires_grad:
                continue
            inputs = [self.nodes[i] for i in node.inputs]
            needs = [n.requires_grad for n in inputs]
            grads = _BACKWARD[node.kind](g, [n.value for n in inputs], node.value, node.attrs, needs)
            for inp, gi in zip(inputs, grads):
                if not inp.requires_grad:
                    continue
                if inp.id in adj:
                    adj[inp.id] = adj[inp.id] + gi
                else:
                    adj[inp.id] = np.array(gi, dtype=np.float64)
        self.adjoints = adj
        return {
            n.id: adj.get(n.id, np.zeros(n.shape))
            for n in self.nodes
            if n.kind == "leaf" and n.requires_grad
        }


# ---------------------------------------------------------------------------


def gradient_check(f, point, step=1e-5):
    """Max relative error between tape gradients and central differences.

    ``f(tape, leaf)`` must return a scalar node.  ``point`` is an array, or a
    dict of arrays in which case ``f`` receives a dict of leaves.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = not isinstance(point, Mapping)
    points = {"x": point} if single else dict(point)
    points = {k: np.array(v, dtype=np.float64) for k, v in points.items()}

    def run(vals):
        tape = Tape()
        leaves = {k: tape.leaf(v, name=k) for k, v in vals.items()}
        out = f(tape, leaves["x"] if single else leaves)
        return tape, leaves, out

    tape, leaves, out = run(points)
    grads = tape.backward(out)

    worst = 0.0
    for key, base in points.items():
        analytic = grads[leaves[key].id]
        flat = base.reshape(-1)
        for i in range(flat.size):
            vals = {k: v.copy() for k, v in points.items()}
            hi = vals[key].reshape(-1)
            hi[i] = flat[i] + step
            f_plus = float(run(vals)[2].value)
            hi[i] = flat[i] - step
            f_minus = float(run(vals)[2].value)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteError(f"f is not finite near coordinate {i} of {key!r}")
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(analytic.reshape(-1)[i] - fd) / (abs(fd) + 1e-12)
            worst = max(worst, err)
    return worst
