"""Reverse-mode automatic differentiation over dense numpy arrays.

The operator set is deliberately small: exactly the dense arithmetic, matrix
products, shape juggling and reductions that the rectification network needs.
Differentiable ops record themselves on an explicit :class:`GradTape`;
replaying the tape in reverse execution order populates ``.grad`` on every
reachable tensor that requires gradients.

Shape discipline is strict: binary ops demand identical shapes (bias addition
goes through :func:`bias_add` with an explicit axis) and every mismatch is a
hard :class:`ShapeError`. Silent broadcasting is how wiring bugs hide.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "ConfigError",
    "NonFiniteGradError",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "neg",
    "bias_add",
    "matmul",
    "reshape",
    "transpose",
    "concat",
    "split",
    "tsum",
    "tmean",
    "tabs",
    "record_op",
    "active_tape",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Raised when tensor extents do not satisfy an op's contract."""


class ConfigError(ValueError):
    """Raised when a structural hyperparameter is inconsistent."""


class NonFiniteGradError(RuntimeError):
    """Raised by checked backward passes when a gradient turns non-finite."""


_STATE = threading.local()


def active_tape() -> Optional["GradTape"]:
    return getattr(_STATE, "tape", None)


class Tensor:
    """Dense real array with optional gradient accumulation.

    ``data`` is always a float32 or float64 numpy array. ``grad`` is either
    ``None`` or an array of identical shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        # Always copy on first accumulation: backward fns may hand out views.
        if g.shape != self.data.shape:
            raise ShapeError(f"grad shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # ergonomic operators -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def abs(self) -> "Tensor":
        return tabs(self)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad}{tag})"


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, name: Optional[str] = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


class _Node:
    __slots__ = ("op", "out", "inputs", "backward")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.backward = backward


class GradTape:
    """Ordered record of executed differentiable ops.

    Used as a context manager; ops executed inside the ``with`` block whose
    inputs require gradients append one node each. ``backward`` walks the
    record in reverse execution order (a valid reverse topological order,
    since every tensor is produced exactly once).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        if active_tape() is not None:
            raise RuntimeError("a GradTape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def backward(self, loss: Tensor, seed: float = 1.0, check_finite: bool = False) -> None:
        """Populate ``.grad`` for every tensor reachable from ``loss``.

        ``seed`` scales the initial gradient; accumulating several scalar
        losses with seed ``1/n`` realizes a mean without a shared graph.
        """
        if loss.data.size != 1:
            raise ShapeError("backward requires a scalar loss")
        loss.accumulate_grad(np.full_like(loss.data, seed))
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)
            if check_finite:
                for t in node.inputs:
                    if t.grad is not None and not np.all(np.isfinite(t.grad)):
                        raise NonFiniteGradError(f"non-finite gradient flowing into op {node.op!r}")


def record_op(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    """Wrap an op result; register its backward fn if a tape is recording.

    ``backward`` receives the output gradient and must accumulate into the
    inputs via ``Tensor.accumulate_grad``. It may hand out views; the
    accumulator copies.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(op, out, inputs, backward))
    return out


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    _check_same_dtype(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return record_op("add", a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    _check_same_dtype(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return record_op("sub", a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Union[Tensor, float, int]) -> Tensor:
    if isinstance(b, Tensor):
        _check_same_shape(a, b, "mul")
        _check_same_dtype(a, b, "mul")

        def backward(g):
            if a.requires_grad:
                a.accumulate_grad(g * b.data)
            if b.requires_grad:
                b.accumulate_grad(g * a.data)

        return record_op("mul", a.data * b.data, (a, b), backward)

    s = float(b)

    def backward_scalar(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return record_op("mul_scalar", a.data * s, (a,), backward_scalar)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(-g)

    return record_op("neg", -a.data, (a,), backward)


def bias_add(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a rank-1 bias along one axis of ``x``.

    The lone sanctioned broadcast. Everything else must match shapes exactly.
    """
    if b.ndim != 1:
        raise ShapeError(f"bias_add: bias must be rank 1, got {b.shape}")
    ax = axis % x.ndim
    if x.shape[ax] != b.shape[0]:
        raise ShapeError(f"bias_add: axis {axis} extent {x.shape[ax]} != bias extent {b.shape[0]}")
    _check_same_dtype(x, b, "bias_add")
    bshape = [1] * x.ndim
    bshape[ax] = b.shape[0]
    sum_axes = tuple(i for i in range(x.ndim) if i != ax)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g.sum(axis=sum_axes))

    return record_op("bias_add", x.data + b.data.reshape(bshape), (x, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; 2-d inputs or equal-rank stacks with matching batch."""
    _check_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise ShapeError(f"matmul: ranks {a.ndim} and {b.ndim} unsupported")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape[-1]} vs {b.shape[-2]}")

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, b.data.swapaxes(-1, -2)))
        if b.requires_grad:
            b.accumulate_grad(np.matmul(a.data.swapaxes(-1, -2), g))

    return record_op("matmul", np.matmul(a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    in_shape = a.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(in_shape))

    return record_op("reshape", a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return record_op("transpose", a.data.transpose(axes), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    ax = axis % tensors[0].ndim
    ref = tensors[0]
    for t in tensors[1:]:
        if t.ndim != ref.ndim:
            raise ShapeError("concat: rank mismatch")
        for i in range(ref.ndim):
            if i != ax and t.shape[i] != ref.shape[i]:
                raise ShapeError(f"concat: shape mismatch {t.shape} vs {ref.shape} outside axis {ax}")
        _check_same_dtype(ref, t, "concat")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(int(lo), int(hi))
                t.accumulate_grad(g[tuple(idx)])

    return record_op("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), backward)


def split(a: Tensor, sections: Union[int, Sequence[int]], axis: int) -> list[Tensor]:
    """Split along an axis into equal parts (int) or given extents (list)."""
    ax = axis % a.ndim
    total = a.shape[ax]
    if isinstance(sections, int):
        if sections <= 0 or total % sections != 0:
            raise ShapeError(f"split: {total} not divisible into {sections} parts")
        sizes = [total // sections] * sections
    else:
        sizes = [int(s) for s in sections]
        if sum(sizes) != total:
            raise ShapeError(f"split: sizes {sizes} do not sum to extent {total}")
    offsets = np.cumsum([0] + sizes)
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(int(lo), int(hi))
        idx = tuple(idx)

        def backward(g, idx=idx):
            if a.requires_grad:
                full = np.zeros_like(a.data)
                full[idx] = g
                a.accumulate_grad(full)

        outs.append(record_op("split", a.data[idx].copy(), (a,), backward))
    return outs


# ---------------------------------------------------------------------------
# reductions and pointwise


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g.reshape(())))

    return record_op("sum", np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g.reshape(()) / n))

    return record_op("mean", np.asarray(a.data.mean(), dtype=a.data.dtype), (a,), backward)


def tabs(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * np.sign(a.data))

    return record_op("abs", np.abs(a.data), (a,), backward)
