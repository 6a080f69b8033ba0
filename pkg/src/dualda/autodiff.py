"""Minimal reverse-mode autodiff over dense float64 tensors.

A ``Tape`` records every primitive as it executes (define-by-run), so the
record list is already topologically ordered; ``backward`` replays it in
exact reverse order and accumulates gradients by summation in that fixed
order, which makes gradients bit-for-bit reproducible.

The op set is deliberately small: dense matmul (with an optional
transpose-b mode for linear layers), broadcast add, sub, scalar_mul, relu,
row-wise softmax / log_softmax, full reductions mean / sum, abs,
concat_rows, per-row select_columns, and the gradient-reversal pseudo-op
``grad_reverse`` whose forward is the identity and whose backward scales
the upstream gradient by -lambda.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError


class Tensor:
    """A node in a tape: float64 data plus an optional gradient."""

    __slots__ = ("data", "grad", "node_id", "tape")

    def __init__(self, data: np.ndarray, node_id: int, tape: "Tape"):
        self.data = data
        self.grad: Optional[np.ndarray] = None
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(id={self.node_id}, shape={list(self.shape)})"

    # operator sugar over the module-level primitives
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scalar_mul(self, c)

    __rmul__ = __mul__

    def __neg__(self) -> "Tensor":
        return scalar_mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return relu(self)

    def softmax(self) -> "Tensor":
        return softmax(self)

    def log_softmax(self) -> "Tensor":
        return log_softmax(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def abs(self) -> "Tensor":
        return tensor_abs(self)


class _Record:
    """One executed op: kind, wiring, and the closure that runs its backward."""

    __slots__ = ("kind", "input_ids", "output_id", "backward_fn")

    def __init__(self, kind: str, input_ids: List[int], output_id: int,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.kind = kind
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered op records built during one forward pass.

    A tape and its tensors are confined to a single thread for the
    duration of a forward+backward pass; independent tapes may run on
    independent threads.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._tensors: List[Tensor] = []

    def leaf(self, data) -> Tensor:
        """Wrap an array (or nested lists) as a graph input node."""
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractError("leaf: input contains NaN or Inf")
        return self._new_tensor(arr)

    def _new_tensor(self, data: np.ndarray) -> Tensor:
        t = Tensor(data, len(self._tensors), self)
        self._tensors.append(t)
        return t

    def _emit(self, kind: str, inputs: Sequence[Tensor], out_data: np.ndarray,
              backward_fn) -> Tensor:
        out = self._new_tensor(out_data)
        self.records.append(
            _Record(kind, [t.node_id for t in inputs], out.node_id, backward_fn))
        return out

    def tensor(self, node_id: int) -> Tensor:
        return self._tensors[node_id]

    @property
    def num_nodes(self) -> int:
        return len(self._tensors)


def _same_tape(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ContractError("operands belong to different tapes")
    return tape


def matmul(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """2-D matrix product a @ b, or a @ b.T when transpose_b is set."""
    tape = _same_tape(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul: expected 2-D operands, got {list(a.shape)} and {list(b.shape)}")
    inner_b = b.shape[1] if transpose_b else b.shape[0]
    if a.shape[1] != inner_b:
        raise DimensionError(
            f"matmul: inner dimensions differ for shapes {list(a.shape)} and "
            f"{list(b.shape)}" + (" (transpose_b)" if transpose_b else ""))
    ad, bd = a.data, b.data
    out = ad @ bd.T if transpose_b else ad @ bd

    if transpose_b:
        def backward_fn(g):
            return g @ bd, g.T @ ad
    else:
        def backward_fn(g):
            return g @ bd.T, ad.T @ g

    return tape._emit("matmul", [a, b], out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be 1-D and broadcast over a's leading batch dim."""
    tape = _same_tape(a, b)
    if a.shape == b.shape:
        def backward_fn(g):
            return g, g
    elif a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]:
        def backward_fn(g):
            return g, g.sum(axis=0)
    else:
        raise DimensionError(
            f"add: shapes {list(a.shape)} and {list(b.shape)} do not conform")
    return tape._emit("add", [a, b], a.data + b.data, backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise DimensionError(
            f"sub: shapes {list(a.shape)} and {list(b.shape)} differ")

    def backward_fn(g):
        return g, -g

    return tape._emit("sub", [a, b], a.data - b.data, backward_fn)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward_fn(g):
        return (c * g,)

    return a.tape._emit("scalar_mul", [a], c * a.data, backward_fn)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0 by convention

    def backward_fn(g):
        return (g * mask,)

    return a.tape._emit("relu", [a], np.where(mask, a.data, 0.0), backward_fn)


def _check_rows(a: Tensor, op: str) -> None:
    if a.data.ndim != 2:
        raise DimensionError(f"{op}: expected a 2-D tensor, got {list(a.shape)}")
    if a.shape[1] == 0:
        raise DomainError(f"{op}: rows are empty (shape {list(a.shape)})")


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax, numerically stabilized by the row max."""
    _check_rows(a, "softmax")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        dot = (g * s).sum(axis=1, keepdims=True)
        return (s * (g - dot),)

    return a.tape._emit("softmax", [a], s, backward_fn)


def log_softmax(a: Tensor) -> Tensor:
    _check_rows(a, "log_softmax")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward_fn(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return a.tape._emit("log_softmax", [a], out, backward_fn)


def mean(a: Tensor) -> Tensor:
    """Mean over every entry, as a shape-[1] tensor."""
    n = a.size
    shape = a.shape

    def backward_fn(g):
        return (np.full(shape, g[0] / n),)

    return a.tape._emit("mean", [a], np.array([a.data.mean()]), backward_fn)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum over every entry, as a shape-[1] tensor."""
    shape = a.shape

    def backward_fn(g):
        return (np.full(shape, g[0]),)

    return a.tape._emit("sum", [a], np.array([a.data.sum()]), backward_fn)


def tensor_abs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)  # sign(0) == 0: abs subgradient at 0 is 0

    def backward_fn(g):
        return (g * sign,)

    return a.tape._emit("abs", [a], np.abs(a.data), backward_fn)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 2-D tensors along the row axis."""
    if len(tensors) < 2:
        raise ContractError("concat_rows: need at least two tensors")
    tape = _same_tape(*tensors)
    first = tensors[0]
    for t in tensors[1:]:
        if t.data.ndim != first.data.ndim or t.shape[1:] != first.shape[1:]:
            raise DimensionError(
                f"concat_rows: shapes {list(first.shape)} and {list(t.shape)} "
                f"differ beyond the row axis")
    sizes = [t.shape[0] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return tape._emit("concat_rows", list(tensors),
                      np.concatenate([t.data for t in tensors], axis=0),
                      backward_fn)


def select_columns(a: Tensor, indices) -> Tensor:
    """Pick one entry per row by a constant index vector; output [rows, 1]."""
    _check_rows(a, "select_columns")
    idx = np.asarray(indices)
    if idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise DimensionError(
            f"select_columns: index vector length {list(idx.shape)} does not "
            f"match {a.shape[0]} rows")
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("select_columns: indices must be integers")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise ContractError(
            f"select_columns: index out of range [0, {a.shape[1]})")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward_fn(g):
        out = np.zeros(shape)
        out[rows, idx] = g[:, 0]
        return (out,)

    return a.tape._emit("select_columns", [a],
                        a.data[rows, idx][:, None], backward_fn)


def grad_reverse(a: Tensor, lam: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by -lam."""
    lam = float(lam)
    if lam < 0:
        raise ContractError(f"grad_reverse: lambda must be >= 0, got {lam}")

    def backward_fn(g):
        return ((-lam) * g,)

    return a.tape._emit("grad_reverse", [a], a.data.copy(), backward_fn)


_BINARY = {"matmul": matmul, "add": add, "sub": sub}
_UNARY = {"relu": relu, "softmax": softmax, "log_softmax": log_softmax,
          "mean": mean, "sum": tensor_sum, "abs": tensor_abs}

OP_KINDS = ("matmul", "add", "sub", "scalar_mul", "relu", "softmax",
            "log_softmax", "mean", "sum", "abs", "concat_rows",
            "select_columns")


def primitive_forward(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch a primitive by kind name; records the op on the tape."""
    if kind in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{kind}: expected 2 inputs, got {len(inputs)}")
        return _BINARY[kind](inputs[0], inputs[1], **kwargs)
    if kind in _UNARY:
        if len(inputs) != 1:
            raise ContractError(f"{kind}: expected 1 input, got {len(inputs)}")
        return _UNARY[kind](inputs[0], **kwargs)
    if kind == "scalar_mul":
        return scalar_mul(inputs[0], kwargs["scalar"])
    if kind == "concat_rows":
        return concat_rows(list(inputs))
    if kind == "select_columns":
        return select_columns(inputs[0], kwargs["indices"])
    raise ContractError(f"unknown op kind {kind!r} (valid: {', '.join(OP_KINDS)})")


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss node.

    Returns a map node_id -> gradient array (zeros for nodes the loss does
    not reach) and fills each tensor's .grad in place.
    """
    if loss.tape is not tape:
        raise ContractError("backward: loss tensor is not on this tape")
    if loss.size != 1:
        raise ContractError(
            f"backward: loss must be scalar, got shape {list(loss.shape)}")
    grads: List[Optional[np.ndarray]] = [None] * tape.num_nodes
    grads[loss.node_id] = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g_out = grads[rec.output_id]
        if g_out is None:
            continue
        for iid, g_in in zip(rec.input_ids, rec.backward_fn(g_out)):
            if g_in is None:
                continue
            if grads[iid] is None:
                grads[iid] = np.array(g_in, dtype=np.float64, copy=True)
            else:
                grads[iid] += g_in
    result: Dict[int, np.ndarray] = {}
    for t in tape._tensors:
        g = grads[t.node_id]
        if g is None:
            g = np.zeros_like(t.data)
        t.grad = g
        result[t.node_id] = g
    return result
