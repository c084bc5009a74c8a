"""Dense float64 arrays with a reverse-mode automatic-differentiation tape.

The engine records a define-by-run tape: every primitive op appends one node
holding references to its operands and a closure that turns the output
gradient into operand gradients.  A tape lives for one optimization step and
is rebuilt from scratch on the next one.

Broadcasting follows numpy's trailing-axis alignment rules; gradients of
broadcast operands are reduced (summed) back to the operand shape.  All
values are float64.

Concurrency: a Tape is single-writer.  Arrays are immutable once recorded,
so read-only sharing across threads (e.g. parallel evaluation runs on
separate tapes) is safe.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Array",
    "Tape",
    "Parameter",
    "DiffError",
    "ShapeError",
    "DomainError",
    "ContractError",
    "IndexRangeError",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "tanh",
    "softplus",
    "sigmoid",
    "square",
    "array_sum",
    "array_mean",
    "broadcast_to",
    "reshape",
    "concat",
    "gather_rows",
]


class DiffError(Exception):
    """Base class for diffcore errors."""


class ShapeError(DiffError):
    """Incompatible operand shapes for an operation."""

    def __init__(self, op: str, shape_a, shape_b):
        super().__init__(f"{op}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}")
        self.op = op
        self.shapes = (tuple(shape_a), tuple(shape_b))


class DomainError(DiffError):
    """Operand outside an operation's mathematical domain."""


class ContractError(DiffError):
    """An operation's calling contract was violated."""


class IndexRangeError(DiffError):
    """A gather index fell outside the first-axis bounds."""

    def __init__(self, index: int, extent: int):
        super().__init__(f"gather_rows: index {index} out of bounds for first axis of extent {extent}")
        self.index = index
        self.extent = extent


class Parameter:
    """A named, trainable array with a gradient slot of identical shape."""

    __slots__ = ("id", "value", "grad", "row_sparse")

    def __init__(self, pid: str, value, row_sparse: bool = False):
        self.id = pid
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        # Row-sparse parameters (encoding stores) are updated per visited row.
        self.row_sparse = row_sparse

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape})"


class Array:
    """Immutable float64 ndarray, optionally recorded on a tape."""

    __slots__ = ("data", "tape", "node")

    def __init__(self, data, tape: "Tape | None" = None, node: int = -1):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return int(self.data.size)

    def __repr__(self):
        return f"Array(shape={self.data.shape}, tape={'yes' if self.tape else 'no'})"

    # operator sugar; scalars and ndarrays are promoted to constants
    def __add__(self, other):
        return add(self, _as_array(other))

    def __radd__(self, other):
        return add(_as_array(other), self)

    def __sub__(self, other):
        return sub(self, _as_array(other))

    def __rsub__(self, other):
        return sub(_as_array(other), self)

    def __mul__(self, other):
        return mul(self, _as_array(other))

    def __rmul__(self, other):
        return mul(_as_array(other), self)

    def __truediv__(self, other):
        return div(self, _as_array(other))

    def __rtruediv__(self, other):
        return div(_as_array(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_array(other))


def constant(data) -> Array:
    """Wrap raw data as an untracked Array."""
    return Array(data)


def _as_array(x) -> Array:
    if isinstance(x, Array):
        return x
    return Array(x)


class Tape:
    """Append-only record of primitive operations for one backward sweep.

    Node k stores the operand node indices (or -1 for untracked constants)
    and a vjp closure mapping the output gradient to operand gradients.
    Every node's operands precede it, so a single reverse iteration
    implements the chain rule.
    """

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list = []
        self._shapes: list[tuple[int, ...]] = []
        self._param_of_node: dict[int, Parameter] = {}
        self._node_of_param: dict[str, int] = {}

    def __len__(self):
        return len(self._vjps)

    def watch(self, param: Parameter) -> Array:
        """Enter a parameter as a tracked leaf; repeated watches share a node."""
        node = self._node_of_param.get(param.id)
        if node is None:
            node = self._push((), None, param.value.shape)
            self._param_of_node[node] = param
            self._node_of_param[param.id] = node
        return Array(param.value, self, node)

    def touched_params(self):
        """Parameters that were watched on this tape."""
        return list(self._param_of_node.values())

    def _push(self, parents, vjp, shape) -> int:
        self._parents.append(tuple(parents))
        self._vjps.append(vjp)
        self._shapes.append(tuple(shape))
        return len(self._vjps) - 1

    def record(self, out_data, parents: tuple[Array, ...], vjp) -> Array:
        node = self._push(tuple(p.node for p in parents), vjp, out_data.shape)
        return Array(out_data, self, node)

    def backward(self, output: Array) -> dict[str, np.ndarray]:
        """Backpropagate from a scalar output.

        Returns a map from parameter id to gradient for every parameter
        watched on this tape; parameters off the path from the output get
        exact zeros.
        """
        if output.tape is not self:
            raise ContractError("backward: output was not produced on this tape")
        if output.data.size != 1:
            raise ContractError(f"backward: output must be scalar, got shape {output.data.shape}")
        grads: list[np.ndarray | None] = [None] * len(self._vjps)
        grads[output.node] = np.ones_like(output.data)
        for node in range(output.node, -1, -1):
            g = grads[node]
            if g is None:
                continue
            vjp = self._vjps[node]
            if vjp is None:
                continue
            parent_grads = vjp(g)
            for parent, pg in zip(self._parents[node], parent_grads):
                if parent < 0 or pg is None:
                    continue
                # accumulation always allocates, so aliasing g or a view is safe
                if grads[parent] is None:
                    grads[parent] = pg
                else:
                    grads[parent] = grads[parent] + pg
        out: dict[str, np.ndarray] = {}
        for node, param in self._param_of_node.items():
            g = grads[node]
            out[param.id] = np.zeros_like(param.value) if g is None else np.asarray(g)
        return out


def _tape_of(*xs: Array) -> Tape | None:
    tape = None
    for x in xs:
        if x.tape is not None:
            if tape is None:
                tape = x.tape
            elif tape is not x.tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcastable(a: Array, b: Array, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(op, a.data.shape, b.data.shape) from None


def _record(tape, out, parents, vjp) -> Array:
    if tape is None:
        return Array(out)
    return tape.record(out, parents, vjp)


def add(a: Array, b: Array) -> Array:
    _broadcastable(a, b, "add")
    tape = _tape_of(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(tape, out, (a, b), vjp)


def sub(a: Array, b: Array) -> Array:
    _broadcastable(a, b, "sub")
    tape = _tape_of(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(tape, out, (a, b), vjp)


def mul(a: Array, b: Array) -> Array:
    _broadcastable(a, b, "mul")
    tape = _tape_of(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(tape, out, (a, b), vjp)


def div(a: Array, b: Array) -> Array:
    _broadcastable(a, b, "div")
    tape = _tape_of(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record(tape, out, (a, b), vjp)


def neg(a: Array) -> Array:
    tape = _tape_of(a)

    def vjp(g):
        return (-g,)

    return _record(tape, -a.data, (a,), vjp)


def matmul(a: Array, b: Array) -> Array:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)
    tape = _tape_of(a, b)
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(tape, out, (a, b), vjp)


def exp(a: Array) -> Array:
    tape = _tape_of(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(tape, out, (a,), vjp)


def log(a: Array) -> Array:
    if np.any(a.data <= 0.0):
        bad = float(a.data[a.data <= 0.0].flat[0])
        raise DomainError(f"log: non-positive operand value {bad}")
    tape = _tape_of(a)
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _record(tape, out, (a,), vjp)


def tanh(a: Array) -> Array:
    tape = _tape_of(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(tape, out, (a,), vjp)


def _softplus(x: np.ndarray) -> np.ndarray:
    # numerically stable: log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(a: Array) -> Array:
    tape = _tape_of(a)
    out = _softplus(a.data)
    sig = _sigmoid(a.data)

    def vjp(g):
        return (g * sig,)

    return _record(tape, out, (a,), vjp)


def sigmoid(a: Array) -> Array:
    tape = _tape_of(a)
    out = _sigmoid(a.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(tape, out, (a,), vjp)


def square(a: Array) -> Array:
    tape = _tape_of(a)
    ad = a.data

    def vjp(g):
        return (2.0 * g * ad,)

    return _record(tape, ad * ad, (a,), vjp)


def array_sum(a: Array, axis=None, keepdims: bool = False) -> Array:
    tape = _tape_of(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axis)
        return (np.broadcast_to(gg, shape).copy(),)

    return _record(tape, np.asarray(out, dtype=np.float64), (a,), vjp)


def array_mean(a: Array, axis=None, keepdims: bool = False) -> Array:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(array_sum(a, axis=axis, keepdims=keepdims), Array(1.0 / n))


def broadcast_to(a: Array, shape) -> Array:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", a.data.shape, shape) from None
    tape = _tape_of(a)
    src_shape = a.data.shape

    def vjp(g):
        return (_unbroadcast(g, src_shape),)

    return _record(tape, out.copy(), (a,), vjp)


def reshape(a: Array, shape) -> Array:
    shape = tuple(shape)
    tape = _tape_of(a)
    out = a.data.reshape(shape)
    src_shape = a.data.shape

    def vjp(g):
        return (g.reshape(src_shape),)

    return _record(tape, out, (a,), vjp)


def concat(arrays, axis: int = 0) -> Array:
    arrays = [_as_array(a) for a in arrays]
    if not arrays:
        raise ContractError("concat: needs at least one operand")
    tape = _tape_of(*arrays)
    try:
        out = np.concatenate([a.data for a in arrays], axis=axis)
    except ValueError:
        raise ShapeError("concat", arrays[0].data.shape, arrays[-1].data.shape) from None
    sizes = [a.data.shape[axis] for a in arrays]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(tape, out, tuple(arrays), vjp)


def gather_rows(a: Array, indices) -> Array:
    """Select rows of the first axis; duplicates allowed, backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    extent = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= extent):
        bad = int(idx[(idx < 0) | (idx >= extent)][0])
        raise IndexRangeError(bad, extent)
    tape = _tape_of(a)
    out = a.data[idx]
    src_shape = a.data.shape

    def vjp(g):
        grad = np.zeros(src_shape, dtype=np.float64)
        np.add.at(grad, idx, g)
        return (grad,)

    return _record(tape, out, (a,), vjp)
