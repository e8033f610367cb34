"""Reverse-mode automatic differentiation over dense numpy arrays.

Deliberately small: exactly the operator set needed by the recurrent
policy network, the relaxed communication channel, and the training
losses. A Tape records every operation in execution order; backward()
walks the record in reverse and accumulates gradients into the leaves.

Two interchangeable backends expose the same operator names so network
code can be written once:

  * TensorOps(tape)  builds a differentiable graph of Tensor nodes
  * ArrayOps()       computes plain float arrays, no tape, no gradients

Feature tensors are 2-D (rows are batch entries), losses are 0-d.
Arrays are float32 by default; a Tape can be built at float64 for
numerical checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, TrainingDivergedError, UsageError

# Probabilities are clamped to this floor before any log.
PROB_FLOOR = 1e-9


class Tensor:
    """One node of the tape: an array plus backward bookkeeping."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "name", "requires_grad")

    def __init__(self, data, parents=(), backward_fn=None, name=None,
                 requires_grad=True):
        self.data = data
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape})"


class Tape:
    """Ordered record of operations, replayed in reverse by backward()."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Tensor] = []
        self.leaves: list[Tensor] = []

    def leaf(self, data, name=None):
        """Register a differentiable leaf (a parameter)."""
        t = Tensor(np.asarray(data, dtype=self.dtype), name=name)
        self.leaves.append(t)
        return t

    def constant(self, data):
        """Wrap an array that should receive no gradient."""
        return Tensor(np.asarray(data, dtype=self.dtype), requires_grad=False)

    def record(self, data, parents, backward_fn):
        t = Tensor(data, parents=parents, backward_fn=backward_fn)
        self.nodes.append(t)
        return t


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(leaf) into each leaf's .grad.

    The loss must be a 0-d tensor recorded on the tape. Gradients are
    never mutated in place, so shared buffers stay intact.
    """
    if loss.data.ndim != 0:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=tape.dtype)
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = pg
            else:
                parent.grad = parent.grad + pg


def _shape_err(op, *shapes):
    listed = ", ".join(str(tuple(s)) for s in shapes)
    return ConfigurationError(f"{op}: incompatible shapes {listed}")


class ArrayOps:
    """Plain numpy implementations, used for inference and evaluation."""

    is_tape = False

    @staticmethod
    def constant(x):
        return x

    @staticmethod
    def matmul(a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise _shape_err("matmul", a.shape, b.shape)
        return a @ b

    @staticmethod
    def add(a, b):
        # Same shape, or b a row vector broadcast over the rows of a.
        if a.shape != b.shape and not (
            a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1]))
        ):
            raise _shape_err("add", a.shape, b.shape)
        return a + b

    @staticmethod
    def mul(a, b):
        if a.shape != b.shape:
            raise _shape_err("mul", a.shape, b.shape)
        return a * b

    @staticmethod
    def concat(parts):
        if any(p.ndim != 2 for p in parts):
            raise _shape_err("concat", *[p.shape for p in parts])
        return np.concatenate(parts, axis=1)

    @staticmethod
    def slice_cols(a, start, stop):
        if a.ndim != 2 or not (0 <= start <= stop <= a.shape[1]):
            raise UsageError(f"slice_cols: bad range [{start}:{stop}] for shape {a.shape}")
        return a[:, start:stop]

    @staticmethod
    def sigmoid(a):
        # Split by sign to avoid overflow in exp.
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        ea = np.exp(a[~pos])
        out[~pos] = ea / (1.0 + ea)
        return out

    @staticmethod
    def tanh(a):
        return np.tanh(a)

    @staticmethod
    def relu(a):
        return np.maximum(a, 0.0)

    @staticmethod
    def softmax(a):
        if a.ndim != 2:
            raise _shape_err("softmax", a.shape)
        shifted = a - a.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    @staticmethod
    def log(a):
        return np.log(a)

    @staticmethod
    def exp(a):
        return np.exp(a)

    @staticmethod
    def scale(a, s):
        return a * float(s)

    @staticmethod
    def gather_cols(a, idx):
        # out[r, j] = a[r, idx[r, j]]; a fixed reindex of each row.
        if a.ndim != 2 or idx.shape != a.shape:
            raise _shape_err("gather_cols", a.shape, idx.shape)
        return np.take_along_axis(a, idx, axis=1)

    @staticmethod
    def row_max(a):
        if a.ndim != 2:
            raise _shape_err("row_max", a.shape)
        return a.max(axis=1, keepdims=True)

    @staticmethod
    def mean_all(a):
        return np.asarray(a.mean(), dtype=a.dtype)

    @staticmethod
    def cce(pred, target):
        """Mean categorical cross-entropy over rows, probability floor 1e-9."""
        pred2 = np.atleast_2d(pred)
        target2 = np.atleast_2d(np.asarray(target, dtype=pred2.dtype))
        if pred2.shape != target2.shape:
            raise UsageError(f"cce: shape mismatch {pred2.shape} vs {target2.shape}")
        clamped = np.maximum(pred2, PROB_FLOOR)
        per_row = -(target2 * np.log(clamped)).sum(axis=1)
        return np.asarray(per_row.mean(), dtype=pred2.dtype)

    @staticmethod
    def value(x):
        return x


class TensorOps:
    """Tape-recording twin of ArrayOps. Accepts raw arrays as constants."""

    is_tape = True

    def __init__(self, tape: Tape):
        self.tape = tape

    def _wrap(self, x):
        if isinstance(x, Tensor):
            return x
        return self.tape.constant(x)

    def constant(self, x):
        return self.tape.constant(x)

    def matmul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        out = ArrayOps.matmul(a.data, b.data)
        ad, bd = a.data, b.data

        def bwd(g):
            return g @ bd.T, ad.T @ g

        return self.tape.record(out, (a, b), bwd)

    def add(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        out = ArrayOps.add(a.data, b.data)
        if a.data.shape == b.data.shape:
            bwd = lambda g: (g, g)
        else:
            bshape = b.data.shape

            def bwd(g):
                return g, g.sum(axis=0).reshape(bshape)

        return self.tape.record(out, (a, b), bwd)

    def mul(self, a, b):
        a, b = self._wrap(a), self._wrap(b)
        out = ArrayOps.mul(a.data, b.data)
        ad, bd = a.data, b.data

        def bwd(g):
            return g * bd, g * ad

        return self.tape.record(out, (a, b), bwd)

    def concat(self, parts):
        parts = [self._wrap(p) for p in parts]
        out = ArrayOps.concat([p.data for p in parts])
        widths = [p.data.shape[1] for p in parts]
        edges = np.cumsum([0] + widths)

        def bwd(g):
            return tuple(g[:, edges[i] : edges[i + 1]] for i in range(len(widths)))

        return self.tape.record(out, tuple(parts), bwd)

    def slice_cols(self, a, start, stop):
        a = self._wrap(a)
        out = ArrayOps.slice_cols(a.data, start, stop)
        shape = a.data.shape
        dtype = a.data.dtype

        def bwd(g):
            da = np.zeros(shape, dtype=dtype)
            da[:, start:stop] = g
            return (da,)

        return self.tape.record(out, (a,), bwd)

    def sigmoid(self, a):
        a = self._wrap(a)
        y = ArrayOps.sigmoid(a.data)

        def bwd(g):
            return (g * (y * (1.0 - y)),)

        return self.tape.record(y, (a,), bwd)

    def tanh(self, a):
        a = self._wrap(a)
        y = np.tanh(a.data)

        def bwd(g):
            return (g * (1.0 - y * y),)

        return self.tape.record(y, (a,), bwd)

    def relu(self, a):
        a = self._wrap(a)
        mask = a.data > 0
        y = np.where(mask, a.data, 0.0).astype(a.data.dtype, copy=False)

        def bwd(g):
            return (g * mask,)

        return self.tape.record(y, (a,), bwd)

    def softmax(self, a):
        a = self._wrap(a)
        y = ArrayOps.softmax(a.data)

        def bwd(g):
            dot = (g * y).sum(axis=1, keepdims=True)
            return (y * (g - dot),)

        return self.tape.record(y, (a,), bwd)

    def log(self, a):
        a = self._wrap(a)
        y = np.log(a.data)
        ad = a.data

        def bwd(g):
            return (g / ad,)

        return self.tape.record(y, (a,), bwd)

    def exp(self, a):
        a = self._wrap(a)
        y = np.exp(a.data)

        def bwd(g):
            return (g * y,)

        return self.tape.record(y, (a,), bwd)

    def scale(self, a, s):
        a = self._wrap(a)
        s = float(s)
        y = a.data * s

        def bwd(g):
            return (g * s,)

        return self.tape.record(y, (a,), bwd)

    def gather_cols(self, a, idx):
        a = self._wrap(a)
        out = ArrayOps.gather_cols(a.data, idx)
        shape = a.data.shape
        dtype = a.data.dtype
        rows = np.arange(shape[0])[:, None]

        def bwd(g):
            da = np.zeros(shape, dtype=dtype)
            np.add.at(da, (rows, idx), g)
            return (da,)

        return self.tape.record(out, (a,), bwd)

    def row_max(self, a):
        a = self._wrap(a)
        out = ArrayOps.row_max(a.data)
        # Subgradient: route to the first maximal entry of each row.
        amax = a.data.argmax(axis=1)
        shape = a.data.shape
        dtype = a.data.dtype
        rows = np.arange(shape[0])

        def bwd(g):
            da = np.zeros(shape, dtype=dtype)
            da[rows, amax] = g[:, 0]
            return (da,)

        return self.tape.record(out, (a,), bwd)

    def mean_all(self, a):
        a = self._wrap(a)
        out = ArrayOps.mean_all(a.data)
        shape = a.data.shape
        dtype = a.data.dtype
        inv = 1.0 / a.data.size

        def bwd(g):
            return (np.full(shape, g * inv, dtype=dtype),)

        return self.tape.record(out, (a,), bwd)

    def cce(self, pred, target):
        """Cross-entropy against a constant target distribution.

        The target never receives gradient; entries of pred below the
        floor sit in the clamp's flat region and get zero gradient.
        """
        pred = self._wrap(pred)
        target = np.asarray(target.data if isinstance(target, Tensor) else target,
                            dtype=pred.data.dtype)
        out = ArrayOps.cce(pred.data, target)
        clamped = np.maximum(pred.data, PROB_FLOOR)
        live = pred.data >= PROB_FLOOR
        n_rows = pred.data.shape[0] if pred.data.ndim == 2 else 1

        def bwd(g):
            return ((-target / clamped) * live * (g / n_rows),)

        return self.tape.record(out, (pred,), bwd)

    @staticmethod
    def value(x):
        if isinstance(x, Tensor):
            return x.data
        return x


ARRAY_OPS = ArrayOps()


@dataclass
class RMSpropState:
    """Running second-moment accumulators, keyed like the parameter dict."""

    learning_rate: float = 0.01
    decay: float = 0.9
    epsilon: float = 1e-7
    second_moment: dict = field(default_factory=dict)


def rmsprop_step(state: RMSpropState, params, grads):
    """One in-place RMSprop update.

    v <- decay * v + (1 - decay) * g^2
    p <- p - lr * g / (sqrt(v) + eps)

    Raises TrainingDivergedError on any non-finite gradient; the step is
    aborted before touching the parameters.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise TrainingDivergedError(f"non-finite gradient in {name!r}")
    for name, g in grads.items():
        p = params[name]
        v = state.second_moment.get(name)
        if v is None:
            v = np.zeros_like(p)
            state.second_moment[name] = v
        v *= state.decay
        v += (1.0 - state.decay) * (g * g)
        p -= state.learning_rate * g / (np.sqrt(v) + state.epsilon)
    return params


def one_hot_rows(idx, width, dtype=np.float32):
    """Row-wise one-hot encoding of an index vector."""
    idx = np.asarray(idx)
    out = np.zeros((idx.shape[0], width), dtype=dtype)
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out


def argmax_one_hot(values, dtype=np.float32):
    """Discretize rows to one-hot at the argmax; ties go to the lowest index."""
    v = np.atleast_2d(values)
    return one_hot_rows(v.argmax(axis=1), v.shape[1], dtype=dtype)
