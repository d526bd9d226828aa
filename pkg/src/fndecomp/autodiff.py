"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tape` records one :class:`Node` per primitive call. Each node keeps
its forward value and an adjoint closure mapping the upstream gradient to the
gradients of its inputs. :meth:`Tape.backward` walks the nodes in strictly
decreasing id order, so every node is visited once after all of its
consumers.

Example
-------
>>> tape = Tape()
>>> p = tape.parameter(np.array([1.0, 2.0]), name="p")
>>> grads = tape.backward(frobenius_sq(p))
>>> grads["p"]
array([2., 4.])
"""

import numpy as np
from scipy.special import expit

from . import _conv
from .tensor import DimensionError, inverse as _inverse, ridged


class Node:
    __slots__ = ("tape", "id", "op", "inputs", "value", "grad", "requires_grad", "name", "_adjoint")

    def __init__(self, tape, id, op, inputs, value, adjoint, requires_grad, name=None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._adjoint = adjoint

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


class Tape:
    """Append-only record of primitive applications."""

    def __init__(self):
        self.nodes = []
        self.param_ids = []

    def _record(self, op, inputs, value, adjoint=None, name=None):
        for inp in inputs:
            if inp.tape is not self:
                raise ValueError("cannot mix nodes from different tapes")
        requires = adjoint is not None and any(inp.requires_grad for inp in inputs)
        node = Node(self, len(self.nodes), op, tuple(inputs), value, adjoint, requires, name)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None):
        return self._record("const", (), np.asarray(value), name=name)

    def parameter(self, value, name=None):
        node = self._record("param", (), np.asarray(value), name=name)
        node.requires_grad = True
        self.param_ids.append(node.id)
        return node

    def detach(self, node):
        """Constant copy of ``node``'s value; no gradient flows through it."""
        return self.constant(node.value)

    def backward(self, root):
        """Populate ``grad`` on every parameter reachable from ``root``.

        Returns a dict keyed by parameter name (or id when unnamed). Parameters
        that ``root`` does not depend on get zero gradients.
        """
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        if root.value.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
        for node in self.nodes:
            node.grad = None
        root.grad = np.ones_like(root.value)
        params = set(self.param_ids)
        for node in reversed(self.nodes[:root.id + 1]):
            g = node.grad
            if g is None or not node.requires_grad or node._adjoint is None:
                continue
            in_grads = node._adjoint(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                ig = np.asarray(ig, dtype=inp.value.dtype)
                if ig.shape != inp.value.shape:
                    raise DimensionError(f"adjoint of {node.op} produced {ig.shape} for {inp.value.shape}")
                inp.grad = ig if inp.grad is None else inp.grad + ig
            if node.id not in params:
                node.grad = None
        out = {}
        for pid in self.param_ids:
            p = self.nodes[pid]
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            out[p.name if p.name is not None else pid] = p.grad
        return out


def backward(tape, root):
    return tape.backward(root)


def _as_node(x, like):
    if isinstance(x, Node):
        return x
    return like.tape.constant(np.asarray(x, dtype=like.value.dtype))


def _pair(a, b):
    if isinstance(a, Node):
        return a, _as_node(b, a)
    return _as_node(a, b), b


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# elementwise arithmetic

def add(a, b):
    a, b = _pair(a, b)
    return a.tape._record("add", (a, b), a.value + b.value,
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    return a.tape._record("sub", (a, b), a.value - b.value,
                          lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    return a.tape._record("mul", (a, b), a.value * b.value,
                          lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.value / b.value

    def adjoint(g):
        ga = g / b.value
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return a.tape._record("div", (a, b), out, adjoint)


def scale(a, c):
    c = float(c)
    return a.tape._record("scale", (a,), a.value * a.value.dtype.type(c), lambda g: (g * c,))


def square(a):
    return a.tape._record("square", (a,), a.value * a.value, lambda g: (2 * g * a.value,))


def abs(a):
    # sign(0) == 0, so the adjoint at the kink is zero
    return a.tape._record("abs", (a,), np.abs(a.value), lambda g: (g * np.sign(a.value),))


def sqrt(a):
    out = np.sqrt(a.value)
    return a.tape._record("sqrt", (a,), out, lambda g: (g / (2 * out),))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` against a constant floor."""
    keep = a.value >= floor
    out = np.where(keep, a.value, a.value.dtype.type(floor))
    return a.tape._record("maximum", (a,), out, lambda g: (g * keep,))


def leaky_relu(a, slope=0.2):
    pos = a.value > 0
    factor = np.where(pos, 1, slope).astype(a.value.dtype)
    return a.tape._record("leaky_relu", (a,), a.value * factor, lambda g: (g * factor,))


def sigmoid(a):
    out = expit(a.value)
    return a.tape._record("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


# reductions

def sum(a, axis=None, keepdims=False):
    out = np.sum(a.value, axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return a.tape._record("sum", (a,), np.asarray(out), adjoint)


def mean(a, axis=None, keepdims=False):
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.value, axis=axis, keepdims=keepdims)

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return a.tape._record("mean", (a,), np.asarray(out), adjoint)


def temporal_mean(a, axis=0):
    """Elementwise average over the time axis, keeping it as a length-1 axis."""
    return mean(a, axis=axis, keepdims=True)


def frobenius_sq(a):
    return a.tape._record("frobenius_sq", (a,), np.asarray(np.sum(a.value * a.value)),
                          lambda g: (2 * g * a.value,))


# linear algebra and reshaping

def matmul(a, b):
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} @ {b.shape}")
    return a.tape._record("matmul", (a, b), a.value @ b.value,
                          lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a):
    return a.tape._record("transpose", (a,), a.value.T, lambda g: (g.T,))


def inverse(a, ridge=0.0):
    """Inverse of ``a + ridge * mean(diag(a)) * I``.

    With ``B`` the inverse, the adjoint is ``-B^T g B^T`` plus the trace term
    contributed by the ridge.
    """
    if a.value.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"inverse needs a square matrix, got {a.shape}")
    inv = _inverse(a.value, ridge).astype(a.value.dtype, copy=False)
    k = a.shape[0]

    def adjoint(g):
        ga = -inv.T @ g @ inv.T
        if ridge:
            ga = ga + (ridge / k) * np.trace(ga) * np.eye(k, dtype=ga.dtype)
        return (ga,)

    return a.tape._record("inverse", (a,), inv, adjoint)


def reshape(a, shape):
    return a.tape._record("reshape", (a,), a.value.reshape(shape), lambda g: (g.reshape(a.shape),))


def astype(a, dtype):
    return a.tape._record("astype", (a,), a.value.astype(dtype), lambda g: (g.astype(a.value.dtype),))


def concat(nodes, axis=-1):
    nodes = list(nodes)
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    return nodes[0].tape._record("concat", nodes, out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def gather(a, index, axis=0):
    """Select ``a.take(index, axis)``; ``index`` must not repeat."""
    index = np.asarray(index)

    def adjoint(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        sl = [slice(None)] * a.value.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return a.tape._record("gather", (a,), np.take(a.value, index, axis=axis), adjoint)


# convolution layers

def conv3d(x, w, b, stride=1):
    """3x3x3 convolution of ``x`` (N, W, H, D, Cin) by ``w`` (3, 3, 3, Cin, Cout)."""
    if w.shape[:3] != (3, 3, 3) or x.shape[-1] != w.shape[3]:
        raise DimensionError(f"conv3d input {x.shape} incompatible with kernel {w.shape}")
    if stride == 2 and any(s % 2 for s in x.shape[1:4]):
        raise DimensionError(f"stride-2 conv needs even extents, got {x.shape[1:4]}")
    out, cols = _conv.conv3d(x.value, w.value, b.value, stride)

    def adjoint(g):
        return _conv.conv3d_grads(g, x.shape, w.value, cols, stride, need_x=x.requires_grad)

    return x.tape._record("conv3d", (x, w, b), out, adjoint)


def conv_transpose3d(x, w, b):
    """Stride-2 transposed 3x3x3 convolution; ``w`` is (3, 3, 3, Cout, Cin)."""
    if w.shape[:3] != (3, 3, 3) or x.shape[-1] != w.shape[4]:
        raise DimensionError(f"conv_transpose3d input {x.shape} incompatible with kernel {w.shape}")
    out = _conv.conv_transpose3d(x.value, w.value, b.value)

    def adjoint(g):
        return _conv.conv_transpose3d_grads(g, x.value, w.value, need_x=x.requires_grad)

    return x.tape._record("conv_transpose3d", (x, w, b), out, adjoint)


def channel_norm(x, gamma, beta, eps=1e-5):
    """Per-sample, per-channel normalization over the spatial axes of a
    channels-last (N, W, H, D, C) array, followed by a learned affine map."""
    axes = tuple(range(1, x.value.ndim - 1))
    m = np.prod([x.shape[i] for i in axes])
    mu = x.value.mean(axis=axes, keepdims=True)
    xc = x.value - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=axes, keepdims=True) + eps)
    xhat = xc * inv_std
    out = xhat * gamma.value + beta.value

    def adjoint(g):
        dxhat = g * gamma.value
        dx = inv_std / m * (m * dxhat - dxhat.sum(axis=axes, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
        red = tuple(range(x.value.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return x.tape._record("channel_norm", (x, gamma, beta), out.astype(x.value.dtype, copy=False), adjoint)


def channel_max_scale(x, axis=0, eps=1e-8, stop_gradient=False):
    """Divide every slice along ``axis`` by its maximum so the maximum becomes 1.

    Slices whose maximum is at most ``eps`` pass through unchanged. By default
    the divisor is differentiated through the selected maximum entry.
    """
    v = x.value
    idx = np.expand_dims(np.argmax(v, axis=axis), axis)
    vmax = np.take_along_axis(v, idx, axis=axis)
    live = vmax > eps
    divisor = np.where(live, vmax, 1).astype(v.dtype)
    out = v / divisor

    def adjoint(g):
        dx = g / divisor
        if not stop_gradient:
            dmax = -(g * out).sum(axis=axis, keepdims=True) / divisor * live
            np.put_along_axis(dx, idx, np.take_along_axis(dx, idx, axis=axis) + dmax, axis=axis)
        return (dx,)

    return x.tape._record("channel_max_scale", (x,), out, adjoint)


def grad_check(f, params, step=1e-5, tolerance=1e-4, max_entries=None, seed=0,
               reference_dtype=np.float64, atol=1e-7):
    """Compare adjoint gradients of ``f`` with central finite differences.

    ``f(tape, nodes)`` builds a scalar on ``tape`` from a dict of parameter
    nodes. Finite differences are evaluated in ``reference_dtype``; the adjoint
    uses the dtype of ``params`` as given, so a float32 model can be checked
    against a float64 reference.

    The per-entry error is ``|a - n| / max(|a|, |n|, 1e-3 * max|n|, atol)``
    where ``max|n|`` runs over every checked entry of every parameter; entries
    far below the gradient's overall scale are compared against that scale
    instead of their own magnitude.

    Returns a dict with ``errors`` (per parameter), ``max_error`` and ``ok``.
    """
    rng = np.random.default_rng(seed)

    def evaluate(values):
        tape = Tape()
        nodes = {k: tape.parameter(v, name=k) for k, v in values.items()}
        return tape, f(tape, nodes)

    tape, root = evaluate(params)
    adjoint = tape.backward(root)
    ref = {k: np.asarray(v, dtype=reference_dtype) for k, v in params.items()}
    pairs = {}
    for name, value in params.items():
        flat_count = np.size(value)
        if max_entries is not None and flat_count > max_entries:
            entries = rng.choice(flat_count, size=max_entries, replace=False)
        else:
            entries = np.arange(flat_count)
        numeric = np.empty(len(entries))
        for j, e in enumerate(entries):
            base = ref[name]
            pert = base.copy()
            pert.flat[e] = base.flat[e] + step
            fp = float(evaluate({**ref, name: pert})[1].value)
            pert.flat[e] = base.flat[e] - step
            fm = float(evaluate({**ref, name: pert})[1].value)
            numeric[j] = (fp - fm) / (2 * step)
        pairs[name] = (np.asarray(adjoint[name], dtype=np.float64).ravel()[entries], numeric)
    scale = max((np.abs(n).max(initial=0.0) for _, n in pairs.values()), default=0.0)
    floor = max(1e-3 * scale, atol)
    errors = {}
    for name, (analytic, numeric) in pairs.items():
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom)) if len(numeric) else 0.0
    max_error = max(errors.values()) if errors else 0.0
    return {"errors": errors, "max_error": max_error, "ok": max_error < tolerance}
