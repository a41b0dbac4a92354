"""Dense float64 reverse-mode autodiff over 2-D arrays.

The primitive set is deliberately closed: matmul, add, elementwise multiply,
constant scaling, sum, row softmax, cross-entropy, embedding lookup and layer
normalisation. There is no broadcasting; every binary op requires identical
shapes. Graphs are built eagerly (define-by-run) on a tape and differentiated
once with :meth:`Graph.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = ["Tensor", "Graph", "ShapeError", "GraphError", "tensor"]


class ShapeError(ValueError):
    """Operand shapes do not fit the primitive."""


class GraphError(RuntimeError):
    """Misuse of the tape (backward without forward, non-scalar output, ...)."""


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad, name)


@dataclass
class _Node:
    label: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Graph:
    """Tape of primitive operations.

    Each op evaluates immediately and returns a new :class:`Tensor`. Calling
    :meth:`backward` on a scalar produced by this graph walks the tape in
    reverse and fills ``grad`` on every tensor that requires it, including
    intermediates (the trainer reads the full-weight gradient off them).
    """

    def __init__(self) -> None:
        self._tape: list[_Node] = []
        self._owned: set[int] = set()

    def __len__(self) -> int:
        return len(self._tape)

    # -- bookkeeping -----------------------------------------------------

    def _label(self, op: str, name: str | None) -> str:
        label = f"{op}#{len(self._tape)}"
        return f"{label}({name})" if name else label

    def _record(self, label, value, inputs, backward, name=None) -> Tensor:
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"node {label}: non-finite output")
        out = Tensor(value, any(t.requires_grad for t in inputs), name)
        self._tape.append(_Node(label, out, tuple(inputs), backward))
        self._owned.add(id(out))
        return out

    @staticmethod
    def _check_2d(label: str, *ts: Tensor) -> None:
        for t in ts:
            if t.value.ndim != 2:
                raise ShapeError(f"node {label}: expected a matrix, got shape {t.shape}")

    @staticmethod
    def _check_same(label: str, a: Tensor, b: Tensor) -> None:
        if a.shape != b.shape:
            raise ShapeError(f"node {label}: shape {a.shape} does not match {b.shape}")

    # -- primitives ------------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor, transpose_b: bool = False, name=None) -> Tensor:
        label = self._label("matmul", name)
        self._check_2d(label, a, b)
        bv = b.value.T if transpose_b else b.value
        if a.shape[1] != bv.shape[0]:
            raise ShapeError(
                f"node {label}: inner extents differ, {a.shape} @ {bv.shape}"
                + (" (b transposed)" if transpose_b else "")
            )
        av = a.value

        def back(g):
            ga = g @ bv.T
            gb = (g.T @ av) if transpose_b else (av.T @ g)
            return ga, gb

        return self._record(label, av @ bv, (a, b), back, name)

    def add(self, a: Tensor, b: Tensor, name=None) -> Tensor:
        label = self._label("add", name)
        self._check_same(label, a, b)
        return self._record(label, a.value + b.value, (a, b), lambda g: (g, g), name)

    def mul(self, a: Tensor, b: Tensor, name=None) -> Tensor:
        label = self._label("mul", name)
        self._check_same(label, a, b)
        av, bv = a.value, b.value
        return self._record(label, av * bv, (a, b), lambda g: (g * bv, g * av), name)

    def scale(self, a: Tensor, c: float, name=None) -> Tensor:
        label = self._label("scale", name)
        c = float(c)
        return self._record(label, a.value * c, (a,), lambda g: (g * c,), name)

    def sum(self, a: Tensor, name=None) -> Tensor:
        label = self._label("sum", name)
        shape = a.shape
        return self._record(
            label, np.asarray(a.value.sum()), (a,), lambda g: (np.full(shape, float(g)),), name
        )

    def softmax(self, a: Tensor, name=None) -> Tensor:
        label = self._label("softmax", name)
        self._check_2d(label, a)
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)

        def back(g):
            return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

        return self._record(label, y, (a,), back, name)

    def cross_entropy(self, logits: Tensor, targets: Sequence[int], name=None) -> Tensor:
        """Mean negative log-likelihood over rows whose target is >= 0."""
        label = self._label("cross_entropy", name)
        self._check_2d(label, logits)
        t = np.asarray(targets, dtype=np.int64)
        if t.shape != (logits.shape[0],):
            raise ShapeError(f"node {label}: {t.shape[0] if t.ndim else 0} targets for {logits.shape[0]} rows")
        rows = np.flatnonzero(t >= 0)
        if rows.size == 0:
            raise ShapeError(f"node {label}: no scored targets")
        if np.any(t[rows] >= logits.shape[1]):
            raise ShapeError(f"node {label}: target id out of range for {logits.shape[1]} classes")
        z = logits.value[rows]
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = rows.size
        loss = -logp[np.arange(n), t[rows]].sum() / n
        shape = logits.shape

        def back(g):
            p = np.exp(logp)
            p[np.arange(n), t[rows]] -= 1.0
            out = np.zeros(shape)
            out[rows] = p * (float(g) / n)
            return (out,)

        return self._record(label, np.asarray(loss), (logits,), back, name)

    def embedding(self, table: Tensor, ids: Sequence[int], name=None) -> Tensor:
        label = self._label("embedding", name)
        self._check_2d(label, table)
        idx = np.asarray(ids, dtype=np.int64)
        if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= table.shape[0])):
            raise ShapeError(f"node {label}: ids out of range for table of {table.shape[0]} rows")
        shape = table.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return self._record(label, table.value[idx], (table,), back, name)

    def layer_norm(self, a: Tensor, eps: float = 1e-5, name=None) -> Tensor:
        """Row-wise normalisation to zero mean, unit variance (no affine)."""
        label = self._label("layer_norm", name)
        self._check_2d(label, a)
        mu = a.value.mean(axis=1, keepdims=True)
        xc = a.value - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
        xhat = xc * inv

        def back(g):
            gm = g.mean(axis=1, keepdims=True)
            gx = (g * xhat).mean(axis=1, keepdims=True)
            return (inv * (g - gm - xhat * gx),)

        return self._record(label, xhat, (a,), back, name)

    # -- reverse pass ----------------------------------------------------

    def backward(self, output: Tensor) -> None:
        if id(output) not in self._owned:
            raise GraphError("backward called on a tensor this graph has not produced")
        if output.value.size != 1:
            raise GraphError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
        for node in reversed(self._tape):
            g = grads.pop(id(node.out), None)
            if g is None or not node.out.requires_grad:
                continue
            node.out.grad = g
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if id(inp) in self._owned:
                    grads[key] = grads[key] + gi if key in grads else gi
                else:
                    inp.grad = gi if inp.grad is None else inp.grad + gi
