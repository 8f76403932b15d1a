"""Dense float64 tensors with a define-by-run tape for reverse-mode gradients.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :meth:`Tape.backward` replays them in reverse exactly once. Outside a
tape, the same functions evaluate eagerly without recording anything, which
is what inference code uses.

Broadcasting is deliberately narrow: elementwise binary ops accept operands
of identical shape or a scalar against a tensor. Bias vectors go through
:func:`add_bias`.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import kernels


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf.

    ``index`` is the position of the first offending element of the result,
    or None when unknown.
    """

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        super().__init__(message)
        self.index = index


class TapeError(RuntimeError):
    """Misuse of a tape: replaying it twice, or a loss that is not on it."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        flat = int(np.flatnonzero(~np.isfinite(arr))[0])
        index = np.unravel_index(flat, arr.shape) if arr.ndim else ()
        index = tuple(int(i) for i in index)
        raise NonFiniteError(f"{what} produced a non-finite value at {index}", index)


class Tensor:
    """An immutable float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; operations on tensors that require gradients
    are recorded while the tape is active on the current thread.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed")
        _active.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.stack.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of scalar ``loss`` with respect to every leaf that requires them.

        Each leaf's ``.grad`` is also set. The tape cannot be replayed afterwards.
        """
        if self._consumed:
            raise TapeError("tape already consumed; rebuild the computation")
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        if not any(rec[0] is loss for rec in reversed(self._records)):
            raise TapeError("loss was not produced on this tape")
        self._consumed = True

        produced = {id(rec[0]) for rec in self._records}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, fn(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        self._records.clear()

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = np.array(grads[key])
            _check_finite(g, f"gradient of {leaf.name or 'leaf'}")
            leaf.grad = g
            result[leaf] = g
        return result


class _ActiveTapes(threading.local):
    def __init__(self):
        self.stack: list[Tape] = []


_active = _ActiveTapes()


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _emit(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], fn: Backward) -> Tensor:
    if not isinstance(arr, np.ndarray):
        arr = np.asarray(arr, dtype=np.float64)
    _check_finite(arr, op)
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad)
    if requires_grad and _active.stack:
        _active.stack[-1]._records.append((out, inputs, fn))
    return out


# -- elementwise -------------------------------------------------------------


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum())


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    with np.errstate(over="ignore", invalid="ignore"):
        out = a.data * b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    return _emit("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing axes of ``x``."""
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not trail {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))
    return _emit("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead)))


# -- reductions and normalisation --------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        return _emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))
    ax = axis % x.ndim
    return _emit(
        "sum",
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), x.shape),),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0:
        raise ShapeError("softmax needs at least one axis")
    if x.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis of shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), fn)


# -- linear algebra and layout -----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is 2-D or has the same batch axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ for {a.shape} and {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ for {a.shape} and {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.matmul(a.data, b.data)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul", out, (a, b), fn)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as err:
        raise ShapeError(f"cannot reshape {x.shape} to {tuple(shape)}") from err
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = tuple(xs)
    if not xs:
        raise ShapeError("concat of nothing")
    ax = axis % xs[0].ndim
    rest = [t.shape[:ax] + t.shape[ax + 1:] for t in xs]
    if any(r != rest[0] for r in rest):
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in xs]}")
    bounds = np.cumsum([t.shape[ax] for t in xs])[:-1]
    return _emit(
        "concat",
        np.concatenate([t.data for t in xs], axis=ax),
        xs,
        lambda g: tuple(np.split(g, bounds, axis=ax)),
    )


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    if not xs or any(t.shape != xs[0].shape for t in xs):
        raise ShapeError(f"stack: shapes differ {[t.shape for t in xs]}")
    ax = axis % (xs[0].ndim + 1)
    return _emit(
        "stack",
        np.stack([t.data for t in xs], axis=ax),
        xs,
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(xs))),
    )


# -- graph ops ---------------------------------------------------------------


def take_rows(x: Tensor, index) -> Tensor:
    """Gather rows ``x[index]`` of a 2-D tensor."""
    idx = np.ascontiguousarray(index, dtype=np.int64)
    if x.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"row index out of range for {x.shape[0]} rows")
    n = x.shape[0]
    return _emit(
        "take_rows",
        x.data[idx],
        (x,),
        lambda g: (kernels.scatter_add_rows(idx, np.ascontiguousarray(g), n),),
    )


def segment_sum(x: Tensor, indptr: np.ndarray, indices: np.ndarray,
                t_indptr: np.ndarray, t_indices: np.ndarray,
                row_scale: np.ndarray | None = None) -> Tensor:
    """Neighbor aggregation ``out[r] = scale[r] * sum_{p in row r} x[indices[p]]``.

    ``(t_indptr, t_indices)`` is the transposed adjacency, used for the
    backward pass. ``row_scale`` (optional, one value per output row) turns
    the sum into a weighted sum such as a mean.
    """
    if x.ndim != 2:
        raise ShapeError(f"segment_sum needs a matrix, got {x.shape}")
    if t_indptr.shape[0] - 1 != x.shape[0]:
        raise ShapeError(
            f"segment_sum: adjacency addresses {t_indptr.shape[0] - 1} rows, input has {x.shape[0]}"
        )
    xd = np.ascontiguousarray(x.data)
    out = kernels.segment_sum(indptr, indices, xd)
    if row_scale is not None:
        out *= row_scale[:, None]

    def fn(g):
        if row_scale is not None:
            g = g * row_scale[:, None]
        return (kernels.segment_sum(t_indptr, t_indices, np.ascontiguousarray(g)),)

    return _emit("segment_sum", out, (x,), fn)


def sum_squares(xs: Iterable[Tensor]) -> Tensor:
    """Sum of squared entries over several tensors (squared Frobenius norm)."""
    xs = tuple(xs)
    total = np.asarray(float(np.sum([np.vdot(t.data, t.data) for t in xs])))
    return _emit("sum_squares", total, xs, lambda g: tuple(2.0 * g * t.data for t in xs))
