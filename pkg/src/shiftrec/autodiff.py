"""Dense float64 tensors with tape-recorded reverse-mode differentiation.

Every model expression in this package is a composition of the primitives
below.  Each primitive computes its forward value eagerly with numpy and,
while a :class:`Tape` is active, records a backward rule whenever any input
is tracked.  ``Tape.backward`` walks the recorded entries in reverse
(execution order is a topological order, so its reverse is valid for
backpropagation) and returns a map from tracked leaf tensors to gradient
arrays.

Tapes are created per forward pass and discarded; there is no persistent
graph.  Values are float64 throughout: models here are desk-scale and the
test suite checks every backward rule against central finite differences.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "matmul",
    "dot",
    "tanh",
    "sigmoid",
    "relu",
    "sqrt",
    "embedding_lookup",
    "softmax",
    "log_softmax",
    "layer_norm",
    "dropout",
    "tsum",
    "tmean",
    "mask_fill",
    "concat",
    "stack",
    "reshape",
    "transpose",
    "index_select",
    "gather",
]


class ShapeMismatch(ValueError):
    """Operand shapes are incompatible for a primitive."""


class Tensor:
    """A dense float64 array, optionally tracked for differentiation.

    ``requires_grad`` marks a leaf whose gradient should be reported by
    ``Tape.backward``; outputs of recorded primitives are tracked
    automatically.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


# Active tapes form a stack so nested scopes behave; in practice one tape
# is open per training step.
_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self._entries.append((out, inputs, backward))

    def backward(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate gradients of a scalar ``root`` w.r.t. every tracked tensor.

        Returns a map from leaf tensors (those marked ``requires_grad`` by the
        caller) to their gradient arrays.
        """
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        produced = {id(out) for out, _, _ in self._entries}
        if id(root) not in produced and not root.requires_grad:
            raise ValueError("backward root is not recorded on this tape")

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        holders: dict[int, Tensor] = {id(root): root}
        for out, inputs, backward_fn in reversed(self._entries):
            gout = grads.pop(id(out), None)
            holders.pop(id(out), None)
            if gout is None:
                continue
            for inp, gin in zip(inputs, backward_fn(gout)):
                if gin is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
                    holders[key] = inp
        return {holders[k]: g for k, g in grads.items() if holders[k].requires_grad}


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _tracked(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    tape = _active_tape()
    if tape is not None and _tracked(*inputs):
        out = Tensor(data, requires_grad=True)
        tape._record(out, inputs, backward)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("div", a, b)
    data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _emit(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    data = a.data * c

    def backward(g):
        return (g * c,)

    return _emit(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be >=2-d, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ for {a.shape} and {b.shape}")

    if a.ndim > 2 and b.ndim == 2:
        # stacked left operand against one matrix: a single flattened GEMM
        # beats a loop of small batched ones
        k, n = b.shape
        flat = a.data.reshape(-1, k)
        data = (flat @ b.data).reshape(*a.shape[:-1], n)

        def backward(g):
            gflat = g.reshape(-1, n)
            ga = (gflat @ b.data.T).reshape(a.shape)
            gb = flat.T @ gflat
            return ga, gb

        return _emit(data, (a, b), backward)

    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(data, (a, b), backward)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatch(f"dot: need equal-length vectors, got {a.shape} and {b.shape}")
    data = np.dot(a.data, b.data)

    def backward(g):
        return g * b.data, g * a.data

    return _emit(data, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return _emit(y, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * y * (1.0 - y),)

    return _emit(y, (x,), backward)


def relu(x: Tensor) -> Tensor:
    y = np.maximum(x.data, 0.0)

    def backward(g):
        return (g * (x.data > 0.0),)

    return _emit(y, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / y,)

    return _emit(y, (x,), backward)


# ---------------------------------------------------------------------------
# lookups and normalizations


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of ``table`` selected by an integer index array."""
    if table.ndim != 2:
        raise ShapeMismatch(f"embedding_lookup: table must be 2-d, got {table.shape}")
    idx = np.asarray(indices)
    data = table.data[idx]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit(data, (table,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((g - (g * y).sum(axis=axis, keepdims=True)) * y,)

    return _emit(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit(y, (x,), backward)


LAYER_NORM_EPS = 1e-8


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Standardize over the last axis, then apply a learned affine map.

    The epsilon sits inside the square root, so a constant input maps to
    ``bias`` exactly.
    """
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gh = g * gain.data
        gx = inv * (
            gh
            - gh.mean(axis=-1, keepdims=True)
            - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggain, gbias

    return _emit(data, (x, gain, bias), backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout: active only in training; evaluation is the identity."""
    if not train or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    data = x.data * mask

    def backward(g):
        return (g * mask,)

    return _emit(data, (x,), backward)


# ---------------------------------------------------------------------------
# reductions, masking, reshaping


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        count = x.shape[axis]
    data = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _emit(data, (x,), backward)


def mask_fill(x: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true with ``value`` (no gradient there)."""
    m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    data = np.where(m, value, x.data)

    def backward(g):
        return (np.where(m, 0.0, g),)

    return _emit(data, (x,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(data, tuple(tensors), backward)


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack of an empty list")
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ShapeMismatch(f"stack: shapes {first} and {t.shape} differ")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit(data, tuple(tensors), backward)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit(data, (x,), backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    data = x.data.transpose(axes)
    inverse = np.argsort(axes)

    def backward(g):
        return (g.transpose(inverse),)

    return _emit(data, (x,), backward)


def index_select(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Slices of ``x`` along ``axis`` selected by a 1-d integer array."""
    idx = np.asarray(indices)
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit(data, (x,), backward)


def gather(x: Tensor, indices) -> Tensor:
    """Per-row selection from a matrix: out[i, j] = x[i, indices[i, j]]."""
    if x.ndim != 2:
        raise ShapeMismatch(f"gather: input must be 2-d, got {x.shape}")
    idx = np.asarray(indices)
    if idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"gather: indices {idx.shape} incompatible with {x.shape}")
    rows = np.arange(x.shape[0])[:, None]
    data = x.data[rows, idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _emit(data, (x,), backward)
