"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op that touches a tensor with ``requires_grad`` appends a node to the
calling thread's tape.  ``backward`` walks the tape in reverse, deposits
gradients on leaf tensors, and clears the tape; a loss whose tape has been
consumed cannot be differentiated again.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class NumericError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class _Tape:
    def __init__(self) -> None:
        self.nodes: list[tuple] = []
        self.generation = 0
        self.enabled = True

    def clear(self) -> None:
        self.nodes.clear()
        self.generation += 1


_local = threading.local()


def _tape() -> _Tape:
    t = getattr(_local, "tape", None)
    if t is None:
        t = _local.tape = _Tape()
    return t


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in this thread (inference, rollouts)."""
    tape = _tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def reset_tape() -> None:
    """Drop any recorded nodes, e.g. after an aborted forward pass."""
    _tape().clear()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_gen", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._gen = -1
        self._node = False

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check(op: str, out: np.ndarray, inputs: Sequence[Tensor]) -> None:
    if not kernels.K.all_finite(out.reshape(-1)):
        shapes = ", ".join(str(t.shape) for t in inputs)
        raise NumericError(f"{op}: non-finite output for inputs of shape {shapes}")


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op result, validate it, and record it on the tape if needed."""
    _check(op, out, inputs)
    res = Tensor(out)
    tape = _tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res._node = True
        res._gen = tape.generation
        tape.nodes.append((res, tuple(inputs), backward))
    return res


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _tape()
    if not loss._node or loss._gen != tape.generation or not tape.nodes:
        raise RuntimeError("backward: no live tape for this loss (already differentiated, or not recorded)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            if t._node:
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
            else:
                gi = np.asarray(gi, dtype=np.float64).reshape(t.shape)
                t.grad = gi.copy() if t.grad is None else t.grad + gi
    tape.clear()


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    sa, sb = a.shape, b.shape
    return _emit("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch dims {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), bwd)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError(f"log: non-positive input of shape {a.shape}")
    ad = a.data
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shape = a.shape
    y = kernels.K.softmax_fwd(_rows(a.data))
    return _emit("softmax", y.reshape(shape), (a,), lambda g: (kernels.K.softmax_bwd(y, _rows(g)).reshape(shape),))


def causal_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis of (..., T, T) scores with keys after the query masked out."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"causal_softmax: expected (..., T, T) scores, got {a.shape}")
    shape, t = a.shape, a.shape[-1]
    y = kernels.K.causal_softmax_fwd(_rows(a.data), t)
    return _emit(
        "softmax", y.reshape(shape), (a,), lambda g: (kernels.K.causal_softmax_bwd(y, _rows(g), t).reshape(shape),)
    )


def log_softmax(a: Tensor) -> Tensor:
    shape = a.shape
    y = kernels.K.log_softmax_fwd(_rows(a.data))
    return _emit(
        "log_softmax", y.reshape(shape), (a,), lambda g: (kernels.K.log_softmax_bwd(y, _rows(g)).reshape(shape),)
    )


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-8) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match last dim {d}")
    shape = x.shape
    y, xhat, rstd = kernels.K.layer_norm_fwd(_rows(x.data), gamma.data, beta.data, eps)

    def bwd(g):
        dx, dg, db = kernels.K.layer_norm_bwd(_rows(g), xhat, rstd, gamma.data)
        return dx.reshape(shape), dg, db

    return _emit("layer_norm", y.reshape(shape), (x, gamma, beta), bwd)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    flat = a.data.reshape(-1)
    out = kernels.K.gelu_fwd(flat).reshape(a.shape)
    return _emit("gelu", out, (a,), lambda g: (kernels.K.gelu_bwd(flat, np.ascontiguousarray(g).reshape(-1)).reshape(a.shape),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table of {table.shape[0]} rows")
    out = table.data[ids]

    def bwd(g):
        flat = ids.reshape(-1)
        onehot = np.zeros((table.shape[0], flat.size))
        onehot[flat, np.arange(flat.size)] = 1.0
        return (onehot @ g.reshape(-1, table.shape[1]),)

    return _emit("embedding_lookup", out, (table,), bwd)


def gather(a: Tensor, index) -> Tensor:
    """Pick ``a[..., index[...]]`` along the last axis; ``index`` has shape ``a.shape[:-1]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != a.shape[:-1]:
        raise ShapeError(f"gather: index shape {index.shape} does not match {a.shape[:-1]}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[-1]):
        raise ShapeError(f"gather: index out of range for last dim {a.shape[-1]}")
    out = np.take_along_axis(a.data, index[..., None], axis=-1)[..., 0]

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, index[..., None], g[..., None], axis=-1)
        return (ga,)

    return _emit("gather", out, (a,), bwd)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean negative log-likelihood over rows of ``logits`` (N, C)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N, C), got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} != ({n},)")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ShapeError(f"cross_entropy: target index out of range [0, {c})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    lsm = kernels.K.log_softmax_fwd(np.ascontiguousarray(logits.data))
    nll = -lsm[np.arange(n), targets]
    out = np.array((w * nll).sum() / total)

    def bwd(g):
        p = np.exp(lsm)
        p[np.arange(n), targets] -= 1.0
        return (p * (w / total)[:, None] * g,)

    return _emit("cross_entropy", out, (logits,), bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def slice_(a: Tensor, index) -> Tensor:
    out = np.ascontiguousarray(a.data[index])

    def bwd(g):
        ga = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(ga, index, g)
        else:
            ga[index] = g
        return (ga,)

    return _emit("slice", out, (a,), bwd)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _emit("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", out, (a,), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum_(a, axis), 1.0 / n)


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    # d/dx log(sigmoid(x)) = 1 - sigmoid(x) = sigmoid(-x)
    sig_neg = np.exp(-np.logaddexp(0.0, x))
    return _emit("log_sigmoid", out, (a,), lambda g: (g * sig_neg,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)
    return _emit(
        "minimum",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * ad * g,))
