"""Dense float64 tensors with a reverse-mode differentiation tape.

Operations record a backward rule on the innermost active :class:`Tape`
whenever at least one operand participates in gradient tracking. Outside a
tape every op is a plain numpy computation, which is what sampling uses.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_TAPES: list["Tape"] = []


class Tensor:
    """Row-major float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.is_leaf = True
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return swap_last(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; ops executed inside are recorded. ``backward``
    may run once per recording; call :meth:`reset` to record again.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self._outputs: dict[int, int] = {}
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        if self._consumed:
            raise ContractError("tape already consumed by backward(); call reset() first")
        self._outputs[id(output)] = len(self.nodes)
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def reset(self) -> None:
        self.nodes.clear()
        self._outputs.clear()
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _tracked(*inputs: Tensor) -> bool:
    return bool(_TAPES) and any(t.requires_grad for t in inputs)


def _make(out: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.name = None
    if _tracked(*inputs):
        result.requires_grad = True
        result.is_leaf = False
        _active_tape().record(inputs, result, backward)
    else:
        result.requires_grad = False
        result.is_leaf = True
    return result


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` of every leaf that requires grad and feeds ``loss``.

    Gradients add onto any existing ``.grad`` so a tensor used in several
    places (or several losses) accumulates its total derivative.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise ContractError("backward already ran on this tape; reset() before reuse")
    if id(loss) not in tape._outputs:
        raise ContractError("loss was not produced on this tape")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: tape._outputs[id(loss)] + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def reciprocal(a: Tensor) -> Tensor:
    r = 1.0 / a.data
    return _make(r, (a,), lambda g: (-g * r * r,))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def amax(a: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    return _select(a, axis, np.argmax(a.data, axis=axis))


def amin(a: Tensor, axis: int) -> Tensor:
    return _select(a, axis, np.argmin(a.data, axis=axis))


def _select(a: Tensor, axis: int, idx: np.ndarray) -> Tensor:
    axis = axis % a.ndim
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_k, axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx_k, np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise DimensionError(f"reshape: {a.shape} -> {shape}")
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the two trailing axes."""
    if a.ndim < 2:
        raise DimensionError(f"swap_last needs rank >= 2, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def getitem(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, index, g)
        return (ga,)

    return _make(np.array(out, dtype=np.float64), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tensors, bw)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# ---------------------------------------------------------------------------
# linear algebra and attention


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: batch dims of {a.shape} and {b.shape} differ") from None
    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), bw)
    out = a.data @ b.data

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (None if ga is None else _unbroadcast(ga, a.shape),
                None if gb is None else _unbroadcast(gb, b.shape))

    return _make(out, (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax received non-finite input")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)
    return _make(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (or of the last axis of a batch)."""
    if x.ndim < 2:
        raise DimensionError(f"softmax_rows needs a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """``softmax(q kᵀ / sqrt(d)) v``; returns ``(out, weights)``."""
    if q.shape[-1] != k.shape[-1] or q.shape[-1] < 1:
        raise DimensionError(f"attention: query {q.shape} and key {k.shape} widths differ")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    d = q.shape[-1]
    weights = softmax_rows(mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(d)))
    return matmul(weights, v), weights


def patches3x3(x: Tensor) -> Tensor:
    """Zero-padded 3x3 neighbourhoods: ``(B, H, W, d) -> (B, H*W, 9*d)``.

    Feeding the result through a ``(9*d, e)`` matrix is a same-size 3x3
    convolution.
    """
    if x.ndim != 4:
        raise DimensionError(f"patches3x3 expects (B, H, W, d), got {x.shape}")
    B, H, W, d = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # (B, H, W, d, 3, 3) view -> (B, H, W, 3, 3, d) copy
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = np.ascontiguousarray(np.moveaxis(win, 3, 5))

    def bw(g):
        g = g.reshape(B, H, W, 9, d)
        gp = np.zeros((B, H + 2, W + 2, d))
        for k in range(9):
            dy, dx = divmod(k, 3)
            gp[:, dy:dy + H, dx:dx + W, :] += g[:, :, :, k, :]
        return (gp[:, 1:-1, 1:-1, :].copy(),)

    return _make(cols.reshape(B, H * W, 9 * d), (x,), bw)


# ---------------------------------------------------------------------------
# losses


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------------------
# gradient oracle


def check_gradients(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative gap between tape gradients and central differences.

    The relative error per coordinate is ``|auto - fd| / max(1, |fd|)``.
    ``f`` must be deterministic; that is not checked.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    probe = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(probe)
    tape.backward(out)
    auto = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    base = x.data.copy()
    flat = base.reshape(-1)
    fd = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f(Tensor(base.copy())).item()
        flat[i] = orig - step
        down = f(Tensor(base.copy())).item()
        flat[i] = orig
        fd[i] = (up - down) / (2.0 * step)
    err = np.abs(auto.reshape(-1) - fd) / np.maximum(1.0, np.abs(fd))
    return float(err.max()) if err.size else 0.0


def parameters_checksum(tensors: Iterable[Tensor]) -> str:
    import hashlib

    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        h.update(str(t.shape).encode())
    return h.hexdigest()
