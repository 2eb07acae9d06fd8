"""Dense f64 tensors with a define-by-run reverse-mode gradient tape.

The tape is rebuilt on every forward pass: inside a ``with GradientTape() as
tape:`` block, each primitive that touches at least one tape-attached tensor
records one node (parent indices plus a local vector-Jacobian rule).
``tape.backward(root)`` then sweeps the nodes once, in reverse recording
order, and writes parameter gradients into their owning stores.

Tensors wrapping frozen stores or raw arrays act as constants: operations on
constants record nothing, so e.g. a frozen teacher network never appears on
the tape at all.

Broadcasting is deliberately limited to trailing-dimension expansion (one
operand's shape is a suffix of the other's); anything else is a shape error.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "ShapeMismatch",
    "NonFiniteValues",
    "add",
    "subtract",
    "multiply",
    "scale",
    "matmul",
    "tsum",
    "tmean",
    "sum_sq",
    "relu",
    "silu",
    "tsin",
    "tcos",
    "concat",
    "slice_axis",
    "embedding",
]


class ShapeMismatch(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteValues(ArithmeticError):
    """A primitive produced NaN or Inf."""


_ACTIVE: Optional["GradientTape"] = None


def active_tape() -> Optional["GradientTape"]:
    return _ACTIVE


class Tensor:
    """Immutable-by-convention f64 array, optionally attached to a tape node.

    ``param_ref`` is set by ParamStore for trainable parameters: it lets the
    backward pass route the leaf adjoint into the right gradient accumulator.
    """

    __slots__ = ("data", "tape", "node", "param_ref")

    def __init__(self, data, *, param_ref=None, _skip_check=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _skip_check and not np.all(np.isfinite(arr)):
            raise NonFiniteValues("tensor created with non-finite values")
        self.data = arr
        self.tape = None
        self.node = None
        self.param_ref = param_ref

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.ndim != 0:
            raise ShapeMismatch(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data)

    # operator sugar over the primitives below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, on_tape={self.node is not None})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "parents", "vjp", "param_ref")

    def __init__(self, op: str, parents: tuple, vjp, param_ref=None):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.param_ref = param_ref


class GradientTape:
    """Append-only record of primitives; context manager activates recording."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.values: list[Tensor] = []
        self.last_backward_visits = 0
        self._outer = None

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        global _ACTIVE
        self._outer = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE
        _ACTIVE = self._outer
        self._outer = None
        return False

    def _attach_leaf(self, t: Tensor) -> int:
        node_id = len(self.nodes)
        self.nodes.append(_Node("leaf", (), None, param_ref=t.param_ref))
        self.values.append(t)
        t.tape = self
        t.node = node_id
        return node_id

    def _parent_id(self, t: Tensor) -> Optional[int]:
        if t.tape is self:
            return t.node
        if t.param_ref is not None and not t.param_ref[0].frozen:
            return self._attach_leaf(t)
        return None  # constant

    def _record(self, op: str, out: Tensor, parents: Sequence[Tensor], vjp) -> Tensor:
        ids = tuple(self._parent_id(p) for p in parents)
        if all(i is None for i in ids):
            return out  # pure-constant computation, nothing to record
        node_id = len(self.nodes)
        self.nodes.append(_Node(op, ids, vjp))
        self.values.append(out)
        out.tape = self
        out.node = node_id
        return out

    def backward(self, root) -> None:
        """Accumulate d(root)/d(param) into every visited parameter's store.

        ``root`` is a scalar tensor on this tape (or its node id). Each node is
        visited exactly once, in reverse recording order; repeated calls keep
        accumulating (callers zero the stores explicitly).
        """
        if isinstance(root, Tensor):
            if root.tape is not self:
                raise ValueError("root tensor is not recorded on this tape")
            root_id = root.node
        else:
            root_id = int(root)
        root_val = self.values[root_id]
        if root_val.data.ndim != 0:
            raise ShapeMismatch(
                f"backward root must be scalar, got shape {root_val.shape}"
            )
        adjoints: list[Optional[np.ndarray]] = [None] * len(self.nodes)
        # a vjp may hand the same array to several parents, so only mutate
        # buffers this sweep has allocated itself
        owned = [False] * len(self.nodes)
        adjoints[root_id] = np.ones(())
        visits = 0
        for i in range(len(self.nodes) - 1, -1, -1):
            visits += 1
            g = adjoints[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:  # leaf
                if node.param_ref is not None:
                    store, name = node.param_ref
                    store.accumulate_grad(name, g)
                continue
            parent_grads = node.vjp(g)
            for pid, pg in zip(node.parents, parent_grads):
                if pid is None or pg is None:
                    continue
                if adjoints[pid] is None:
                    adjoints[pid] = pg
                elif owned[pid]:
                    adjoints[pid] += pg
                else:
                    adjoints[pid] = adjoints[pid] + pg
                    owned[pid] = True
        self.last_backward_visits = visits


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValues(f"non-finite values in result of '{op}'")


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data, _skip_check=True)
    tape = _ACTIVE
    if tape is None:
        return out
    return tape._record(op, out, parents, vjp)


def _conform_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeMismatch(f"'{op}' operands {sa} and {sb} do not conform "
                        "(equal or trailing-suffix shapes required)")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient over the leading axes introduced by trailing broadcast."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _conform_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_reduce_to(g, sa), _reduce_to(g, sb))

    return _emit("add", a.data + b.data, (a, b), vjp)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _conform_elementwise(a, b, "subtract")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_reduce_to(g, sa), _reduce_to(-g, sb))

    return _emit("subtract", a.data - b.data, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _conform_elementwise(a, b, "multiply")
    sa, sb = a.shape, b.shape
    ad, bd = a.data, b.data

    def vjp(g):
        return (_reduce_to(g * bd, sa), _reduce_to(g * ad, sb))

    return _emit("multiply", ad * bd, (a, b), vjp)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _emit("scale", a.data * s, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul requires 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T, ad.T @ g)

    return _emit("matmul", ad @ bd, (a, b), vjp)


def tsum(a: Tensor) -> Tensor:
    sa = a.shape

    def vjp(g):
        return (np.broadcast_to(g, sa),)

    return _emit("sum", np.sum(a.data), (a,), vjp)


def tmean(a: Tensor) -> Tensor:
    sa = a.shape
    n = a.size

    def vjp(g):
        return (np.broadcast_to(g / n, sa),)

    return _emit("mean", np.mean(a.data), (a,), vjp)


def sum_sq(a: Tensor) -> Tensor:
    """Squared L2 norm of the whole tensor."""
    ad = a.data

    def vjp(g):
        return (2.0 * g * ad,)

    return _emit("sum_sq", np.sum(ad * ad), (a,), vjp)


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0

    def vjp(g):
        return (g * mask,)

    return _emit("relu", np.where(mask, ad, 0.0), (a,), vjp)


def silu(a: Tensor) -> Tensor:
    ad = a.data
    # numerically stable sigmoid: never exponentiates a positive magnitude
    sig = np.empty_like(ad)
    pos = ad >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    e = np.exp(ad[~pos])
    sig[~pos] = e / (1.0 + e)

    def vjp(g):
        return (g * (sig * (1.0 + ad * (1.0 - sig))),)

    return _emit("silu", ad * sig, (a,), vjp)


def tsin(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (g * np.cos(ad),)

    return _emit("sin", np.sin(ad), (a,), vjp)


def tcos(a: Tensor) -> Tensor:
    ad = a.data

    def vjp(g):
        return (-g * np.sin(ad),)

    return _emit("cos", np.cos(ad), (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat of zero tensors")
    nd = parts[0].ndim
    for p in parts[1:]:
        if p.ndim != nd:
            raise ShapeMismatch(
                f"concat rank mismatch: {parts[0].shape} vs {p.shape}")
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _emit("concat", np.concatenate([p.data for p in parts], axis=axis),
                 tuple(parts), vjp)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    n = a.shape[axis]
    if not (0 <= start <= stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for axis "
                            f"{axis} of shape {a.shape}")
    sa = a.shape
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(sa)
        full[idx] = g
        return (full,)

    return _emit("slice", a.data[idx].copy(), (a,), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table [N, D] gathered by integer ids [B] -> [B, D]."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding table must be 2-D, got {table.shape}")
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding ids must be a 1-D integer array")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding ids out of range [0, {n})")
    shape = table.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _emit("embedding", table.data[ids], (table,), vjp)
