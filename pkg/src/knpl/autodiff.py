"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op takes and returns :class:`Tensor`. A tensor is *tracked* when it
belongs to a :class:`Tape`; ops whose inputs include a tracked tensor are
recorded on that tape, so any interior node (not only leaves) can be a
``wrt`` target of :func:`grad`. Untracked inputs behave as constants.

Broadcasting is limited to the bias rule: the second operand of ``add`` /
``mul`` may have a shape equal to a suffix of the first operand's shape.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphError, NumericError, ShapeError

__all__ = [
    "Tensor", "Tape", "grad", "constant",
    "matmul", "einsum", "add", "mul", "scale", "silu", "sigmoid", "rms_norm",
    "softmax", "cross_entropy", "embedding", "sum", "mean",
    "reshape", "transpose", "concat", "take",
]


class Tensor:
    """Immutable n-d array of float64 values, optionally recorded on a tape."""

    __slots__ = ("value", "tape", "index")

    def __init__(self, value, tape: "Tape | None" = None):
        arr = np.array(value, dtype=np.float64)  # always a private copy
        arr.flags.writeable = False
        self.value = arr
        self.tape = tape
        self.index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the values."""
        return self.value.reshape(-1)

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f", node={self.index}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("op", "inputs", "forward", "backward", "tensor")

    def __init__(self, op, inputs, forward, backward, tensor):
        self.op = op
        self.inputs = inputs
        self.forward = forward
        self.backward = backward
        self.tensor = tensor


class Tape:
    """Linear record of operations; recording order is a topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value) -> Tensor:
        """Create a tracked leaf."""
        t = value if isinstance(value, Tensor) else None
        out = Tensor(t.value if t is not None else value, tape=self)
        _check_finite(out.value, "variable")
        self._append(out, "leaf", (), None, None)
        return out

    def _append(self, tensor, op, inputs, forward, backward):
        tensor.tape = self
        tensor.index = len(self.nodes)
        self.nodes.append(_Node(op, inputs, forward, backward, tensor))

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves, returning the fresh values."""
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.forward is None:
                values.append(node.tensor.value)
                continue
            args = [values[t.index] if t.tape is self else t.value for t in node.inputs]
            values.append(np.asarray(node.forward(*args), dtype=np.float64))
        return values

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def release(self) -> None:
        """Drop recorded nodes so the tape's arrays are freed without waiting for the cycle collector."""
        self.nodes.clear()


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {op}")


def _record(op: str, inputs: Sequence[Tensor], forward: Callable, backward: Callable | None) -> Tensor:
    inputs = tuple(_as_tensor(x) for x in inputs)
    tape = None
    for x in inputs:
        if x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise GraphError(f"{op}: inputs belong to different tapes")
            tape = x.tape
    value = np.asarray(forward(*[x.value for x in inputs]), dtype=np.float64)
    _check_finite(value, op)
    out = Tensor.__new__(Tensor)
    value.flags.writeable = False
    out.value = value
    out.tape = None
    out.index = -1
    if tape is not None:
        tape._append(out, op, inputs, forward, backward)
    return out


def grad(output: Tensor, wrt: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    Nodes of ``wrt`` that ``output`` does not depend on get zero gradients.
    """
    wrt = list(wrt)
    if output.shape != ():
        raise ShapeError(f"grad needs a scalar output, got shape {output.shape}")
    tape = output.tape
    for w in wrt:
        if tape is None or w.tape is not tape:
            raise GraphError("wrt node is not recorded on the output's tape")
    grads: dict[int, np.ndarray] = {output.index: np.ones((), dtype=np.float64)}
    for idx in range(output.index, -1, -1):
        g = grads.get(idx)
        if g is None:
            continue
        node = tape.nodes[idx]
        if node.backward is None:
            continue
        in_vals = [t.value for t in node.inputs]
        parts = node.backward(g, node.tensor.value, *in_vals)
        for t, gi in zip(node.inputs, parts):
            if gi is None or t.tape is not tape:
                continue
            prev = grads.get(t.index)
            grads[t.index] = gi if prev is None else prev + gi
    out = {}
    for w in wrt:
        g = grads.get(w.index)
        out[w] = np.zeros(w.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(w.shape)
    return out


# --- broadcasting helpers --------------------------------------------------

def _check_suffix(a_shape, b_shape, op):
    if len(b_shape) > len(a_shape) or tuple(a_shape[len(a_shape) - len(b_shape):]) != tuple(b_shape):
        raise ShapeError(f"{op}: shape {b_shape} is not a suffix of {a_shape}")


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g


# --- primitives -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")
    b_shape = b.shape
    return _record(
        "add", (a, b), np.add,
        lambda g, out, x, y: (g, _reduce_to(g, b_shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")
    b_shape = b.shape
    return _record(
        "mul", (a, b), np.multiply,
        lambda g, out, x, y: (g * y, _reduce_to(g * x, b_shape)),
    )


def scale(a, c: float) -> Tensor:
    c = float(c)
    return _record("scale", (a,), lambda x: x * c, lambda g, out, x: (g * c,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _record("sigmoid", (a,), _sigmoid, lambda g, out, x: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """Elementwise ``x * sigmoid(x)``."""
    def fwd(x):
        return x * _sigmoid(x)

    def bwd(g, out, x):
        s = _sigmoid(x)
        return (g * (s + x * s * (1.0 - s)),)

    a = _as_tensor(a)
    _check_finite(a.value, "silu input")
    return _record("silu", (a,), fwd, bwd)


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is either a 2-d weight or shares ``a``'s leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 1 or b.value.ndim < 2:
        raise ShapeError(f"matmul: bad ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ {a.shape} @ {b.shape}")
    if b.value.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ {a.shape} @ {b.shape}")
    weight = b.value.ndim == 2

    def bwd(g, out, x, y):
        if x.ndim == 1:
            return g @ y.T, np.outer(x, g)
        ga = g @ np.swapaxes(y, -1, -2)
        if weight:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(x, -1, -2) @ g
        return ga, gb

    return _record("matmul", (a, b), np.matmul, bwd)


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must occur in the other
    operand or in the output (no silent summation of a lone axis)."""
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        for ch in own:
            if ch not in other and ch not in out_idx:
                raise ShapeError(f"einsum {spec!r}: index {ch!r} is summed inside one operand")
    spec_a = f"{out_idx},{ib}->{ia}"
    spec_b = f"{out_idx},{ia}->{ib}"
    return _record(
        "einsum", (a, b),
        lambda x, y: np.einsum(f"{ia},{ib}->{out_idx}", x, y, optimize=True),
        lambda g, out, x, y: (np.einsum(spec_a, g, y, optimize=True), np.einsum(spec_b, g, x, optimize=True)),
    )


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis by its root-mean-square, then multiply by ``gain``."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if gain.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm: gain {gain.shape} vs input {x.shape}")

    def fwd(v, w):
        r = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
        return v * r * w

    def bwd(g, out, v, w):
        r = 1.0 / np.sqrt(np.mean(v * v, axis=-1, keepdims=True) + eps)
        xhat = v * r
        gx_hat = g * w
        gv = r * (gx_hat - xhat * np.mean(gx_hat * xhat, axis=-1, keepdims=True))
        gw = (g * xhat).reshape(-1, v.shape[-1]).sum(axis=0)
        return gv, gw

    return _record("rms_norm", (x, gain), fwd, bwd)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` (suffix-shaped booleans) marks
    admissible entries; masked entries get probability exactly zero."""
    x = _as_tensor(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check_suffix(x.shape, mask.shape, "softmax mask")

    def fwd(v):
        if mask is not None:
            v = np.where(mask, v, -np.inf)
        m = np.max(v, axis=-1, keepdims=True)
        e = np.exp(v - m)
        return e / e.sum(axis=-1, keepdims=True)

    def bwd(g, out, v):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _record("softmax", (x,), fwd, bwd)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over rows of a 2-d logits array."""
    logits = _as_tensor(logits)
    if logits.value.ndim != 2:
        raise ShapeError("cross_entropy expects (rows, classes) logits")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    n = logits.shape[0]
    if targets.shape[0] != n:
        raise ShapeError("cross_entropy: one target per row required")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    total = w.sum()
    if total <= 0:
        raise NumericError("cross_entropy: weights sum to zero")
    rows = np.arange(n)

    def log_probs(v):
        m = v.max(axis=-1, keepdims=True)
        z = v - m
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def fwd(v):
        return np.asarray(-(w * log_probs(v)[rows, targets]).sum() / total)

    def bwd(g, out, v):
        p = np.exp(log_probs(v))
        p[rows, targets] -= 1.0
        return (g * p * (w / total)[:, None],)

    return _record("cross_entropy", (logits,), fwd, bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradient scatters back into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2:
        raise ShapeError("embedding table must be 2-d")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding id out of range")

    def bwd(g, out, t):
        gt = np.zeros_like(t)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, t.shape[1]))
        return (gt,)

    return _record("embedding", (table,), lambda t: t[ids], bwd)


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _record("sum", (x,), lambda v: np.asarray(v.sum()), lambda g, out, v: (np.broadcast_to(g, v.shape).copy(),))


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = x.value.size
    return _record("mean", (x,), lambda v: np.asarray(v.mean()),
                   lambda g, out, v: (np.full(v.shape, float(g) / n),))


def reshape(x, shape) -> Tensor:
    shape = tuple(shape)
    return _record("reshape", (x,), lambda v: v.reshape(shape), lambda g, out, v: (g.reshape(v.shape),))


def transpose(x, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), lambda v: np.transpose(v, axes), lambda g, out, v: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, out, *vals):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", xs, lambda *vals: np.concatenate(vals, axis=axis), bwd)


def take(x, index) -> Tensor:
    """Basic or advanced indexing ``x[index]``."""
    def fwd(v):
        return np.array(v[index], dtype=np.float64)

    def bwd(g, out, v):
        gv = np.zeros_like(v)
        np.add.at(gv, index, g)
        return (gv,)

    return _record("take", (x,), fwd, bwd)
