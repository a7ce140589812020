"""Tape-based reverse-mode differentiation over a closed set of array primitives.

Values are float64 arrays whose trailing two axes are the matrix axes; leading
axes are batch axes that broadcast like ``numpy.matmul``. Every operation goes
through :meth:`Tape.apply`, which refuses names missing from ``PRIMITIVES``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import CrateError
from .linalg import softmax_columns

__all__ = ["Tape", "Tensor", "PRIMITIVES", "UnregisteredPrimitiveError", "grad", "value_and_grad"]


class UnregisteredPrimitiveError(CrateError, KeyError):
    pass


@dataclass(frozen=True)
class Primitive:
    forward: Callable  # (*values, **attrs) -> (out, saved)
    vjp: Callable  # (g, out, saved, values, **attrs) -> tuple of input cotangents


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.vjp)
        return cls

    return register


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast cotangent back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _t(a):
    return np.swapaxes(a, -1, -2)


@primitive("matmul")
class _MatMul:
    @staticmethod
    def forward(a, b):
        return a @ b, None

    @staticmethod
    def vjp(g, out, saved, vals):
        a, b = vals
        return unbroadcast(g @ _t(b), a.shape), unbroadcast(_t(a) @ g, b.shape)


@primitive("add")
class _Add:
    @staticmethod
    def forward(a, b):
        return a + b, None

    @staticmethod
    def vjp(g, out, saved, vals):
        return unbroadcast(g, np.shape(vals[0])), unbroadcast(g, np.shape(vals[1]))


@primitive("sub")
class _Sub:
    @staticmethod
    def forward(a, b):
        return a - b, None

    @staticmethod
    def vjp(g, out, saved, vals):
        return unbroadcast(g, np.shape(vals[0])), unbroadcast(-g, np.shape(vals[1]))


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(a, b):
        return a * b, None

    @staticmethod
    def vjp(g, out, saved, vals):
        a, b = vals
        return unbroadcast(g * b, np.shape(a)), unbroadcast(g * a, np.shape(b))


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(a, c):
        return c * a, None

    @staticmethod
    def vjp(g, out, saved, vals, c):
        return (c * g,)


@primitive("shift")
class _Shift:
    @staticmethod
    def forward(a, c):
        return a + c, None

    @staticmethod
    def vjp(g, out, saved, vals, c):
        return (g,)


@primitive("transpose")
class _Transpose:
    @staticmethod
    def forward(a):
        return _t(a), None

    @staticmethod
    def vjp(g, out, saved, vals):
        return (_t(g),)


@primitive("reshape")
class _Reshape:
    @staticmethod
    def forward(a, shape):
        return a.reshape(shape), None

    @staticmethod
    def vjp(g, out, saved, vals, shape):
        return (g.reshape(vals[0].shape),)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(a, axis):
        return a.sum(axis=axis), None

    @staticmethod
    def vjp(g, out, saved, vals, axis):
        return (np.broadcast_to(np.expand_dims(g, axis), vals[0].shape).copy(),)


@primitive("softmax_columns")
class _Softmax:
    @staticmethod
    def forward(a):
        return softmax_columns(a), None

    @staticmethod
    def vjp(g, s, saved, vals):
        # column-wise (diag(s) - s s^T) g
        return (s * (g - (g * s).sum(axis=-2, keepdims=True)),)


@primitive("relu")
class _Relu:
    @staticmethod
    def forward(a):
        return np.maximum(a, 0.0), None

    @staticmethod
    def vjp(g, out, saved, vals):
        return (g * (vals[0] > 0),)


@primitive("layernorm")
class _LayerNorm:
    """Normalize each column over axis -2, then per-feature gain and bias."""

    @staticmethod
    def forward(x, gain, bias, eps):
        c = x - x.mean(axis=-2, keepdims=True)
        inv = 1.0 / np.sqrt((c * c).mean(axis=-2, keepdims=True) + eps)
        xhat = c * inv
        return xhat * gain[:, None] + bias[:, None], (xhat, inv)

    @staticmethod
    def vjp(g, out, saved, vals, eps):
        xhat, inv = saved
        gain = vals[1]
        lead = tuple(range(g.ndim - 2)) + (g.ndim - 1,)
        g_bias = g.sum(axis=lead)
        g_gain = (g * xhat).sum(axis=lead)
        gh = g * gain[:, None]
        gx = inv * (gh - gh.mean(axis=-2, keepdims=True) - xhat * (gh * xhat).mean(axis=-2, keepdims=True))
        return gx, g_gain, g_bias


@primitive("column_select")
class _ColumnSelect:
    @staticmethod
    def forward(a, index):
        return a[..., index : index + 1].copy(), None

    @staticmethod
    def vjp(g, out, saved, vals, index):
        ga = np.zeros(vals[0].shape)
        ga[..., index : index + 1] = g
        return (ga,)


@primitive("concatenate")
class _Concatenate:
    """Concatenate along the last axis after broadcasting the leading axes."""

    @staticmethod
    def forward(*xs):
        lead = np.broadcast_shapes(*(x.shape[:-1] for x in xs))
        parts = [np.broadcast_to(x, lead + x.shape[-1:]) for x in xs]
        return np.concatenate(parts, axis=-1), None

    @staticmethod
    def vjp(g, out, saved, vals):
        grads, start = [], 0
        for x in vals:
            n = x.shape[-1]
            grads.append(unbroadcast(g[..., start : start + n], x.shape))
            start += n
        return tuple(grads)


@primitive("solve")
class _Solve:
    """X = A^{-1} B for square A (stacks allowed)."""

    @staticmethod
    def forward(a, b):
        return np.linalg.solve(a, b), None

    @staticmethod
    def vjp(g, x, saved, vals):
        a, b = vals
        gb = np.linalg.solve(_t(a), g)
        return unbroadcast(-gb @ _t(x), a.shape), unbroadcast(gb, b.shape)


@primitive("cross_entropy")
class _CrossEntropy:
    """Mean label-smoothed cross-entropy of ``(B, C)`` logits."""

    @staticmethod
    def forward(logits, labels, smoothing):
        B, C = logits.shape
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        q = np.full((B, C), smoothing / C)
        q[np.arange(B), labels] += 1.0 - smoothing
        return np.asarray(-(q * logp).sum() / B), (np.exp(logp), q)

    @staticmethod
    def vjp(g, out, saved, vals, smoothing):
        prob, q = saved
        return (g * (prob - q) / prob.shape[0], None)


class Tensor:
    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape: "Tape", index: int):
        self.value = value
        self.tape = tape
        self.index = index

    @property
    def shape(self):
        return self.value.shape

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, other)

    def __rmatmul__(self, other):
        return self.tape.apply("matmul", other, self)

    def __add__(self, other):
        if np.isscalar(other):
            return self.tape.apply("shift", self, c=float(other))
        return self.tape.apply("add", self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if np.isscalar(other):
            return self.tape.apply("shift", self, c=-float(other))
        return self.tape.apply("sub", self, other)

    def __rsub__(self, other):
        return self.tape.apply("sub", other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return self.tape.apply("scale", self, c=float(other))
        return self.tape.apply("mul", self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.apply("scale", self, c=-1.0)

    @property
    def T(self):
        return self.tape.apply("transpose", self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return self.tape.apply("reshape", self, shape=tuple(shape))

    def sum(self, axis):
        return self.tape.apply("sum", self, axis=axis)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.index})"


@dataclass
class _Node:
    op: str
    inputs: tuple  # node index per input, None for constants
    values: tuple
    out: np.ndarray
    saved: object
    attrs: dict


class Tape:
    """Append-only record of primitive applications.

    Nodes are appended in evaluation order, so reverse order is a valid
    topological order for the backward sweep and accumulation order is fixed.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, value) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        self.nodes.append(_Node("leaf", (), (), value, None, {}))
        return Tensor(value, self, len(self.nodes) - 1)

    def apply(self, op: str, *inputs, **attrs) -> Tensor:
        prim = PRIMITIVES.get(op)
        if prim is None:
            raise UnregisteredPrimitiveError(f"operation {op!r} is not a registered primitive")
        idx, vals = [], []
        for x in inputs:
            if isinstance(x, Tensor):
                if x.tape is not self:
                    raise CrateError("tensor belongs to a different tape")
                idx.append(x.index)
                vals.append(x.value)
            else:
                idx.append(None)
                vals.append(x if _is_int_array(x) else np.asarray(x, dtype=np.float64))
        out, saved = prim.forward(*vals, **attrs)
        self.nodes.append(_Node(op, tuple(idx), tuple(vals), out, saved, attrs))
        return Tensor(out, self, len(self.nodes) - 1)

    def backward(self, output: Tensor, seed=None) -> list:
        """Adjoints for every node (None where the output does not depend on it)."""
        adj: list = [None] * len(self.nodes)
        adj[output.index] = np.ones_like(output.value) if seed is None else np.asarray(seed, dtype=np.float64)
        for i in range(output.index, -1, -1):
            g = adj[i]
            node = self.nodes[i]
            if g is None or node.op == "leaf":
                continue
            prim = PRIMITIVES[node.op]
            cots = prim.vjp(g, node.out, node.saved, node.values, **node.attrs)
            for j, c in zip(node.inputs, cots):
                if j is None or c is None:
                    continue
                adj[j] = c if adj[j] is None else adj[j] + c
        return adj


def _is_int_array(x) -> bool:
    return isinstance(x, np.ndarray) and np.issubdtype(x.dtype, np.integer)


def value_and_grad(loss_fn, params: dict[str, np.ndarray], *args, **kwargs):
    """Evaluate ``loss_fn(tape_params, *args)`` and return (loss, {name: gradient})."""
    tape = Tape()
    leaves = {name: tape.leaf(v) for name, v in params.items()}
    loss = loss_fn(leaves, *args, **kwargs)
    if not isinstance(loss, Tensor):
        # constant loss: nothing on the tape depends on the parameters
        return float(loss), {name: np.zeros_like(np.asarray(v, dtype=np.float64)) for name, v in params.items()}
    if loss.value.size != 1:
        raise CrateError(f"loss must be scalar, got shape {loss.value.shape}")
    adj = tape.backward(loss)
    grads = {}
    for name, leaf in leaves.items():
        g = adj[leaf.index]
        grads[name] = np.zeros_like(leaf.value) if g is None else g
    return float(loss.value), grads


def grad(loss_fn, params: dict[str, np.ndarray], *args, **kwargs) -> dict[str, np.ndarray]:
    return value_and_grad(loss_fn, params, *args, **kwargs)[1]
