"""Dense float tensors with reverse-mode automatic differentiation.

The engine is a tape. While a ``Graph`` is active (``with Graph() as g:``),
every differentiable op appends a record holding its inputs, its output and
a closure that turns the output adjoint into input adjoints.
``Graph.backward`` walks the records in reverse order, which visits each
recorded op exactly once and deposits gradients into the ``grad`` buffers
of tensors created with ``requires_grad=True``.

Every op checks its output for NaN/Inf and raises ``NonFiniteError`` naming
the op, so a diverging training step fails loudly instead of silently.

Shapes follow numpy. Ops accept leading batch dimensions and broadcast like
numpy does; adjoints of broadcast operands are summed back to the operand
shape. Only float32/float64 data is supported; integer arguments (token
ids, boolean masks) are passed as plain numpy arrays, not tensors.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "NonFiniteError",
    "add",
    "mul",
    "scale",
    "matmul",
    "concat",
    "slice_axis",
    "transpose",
    "reshape",
    "embedding",
    "gelu",
    "sum_all",
    "masked_softmax",
    "layer_norm",
    "dropout",
    "cross_entropy",
]

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf; the message names the op."""


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in output of op '{name}'")


class Tensor:
    """A dense float array with an optional same-shape gradient buffer.

    ``grad`` exists iff ``requires_grad`` is set; it accumulates across
    backward passes until ``zero_grad`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._tape: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Small amount of sugar so model code reads like the math.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(data: np.ndarray) -> Tensor:
    t = object.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.grad = None
    t._tape = None
    return t


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


_TLS = threading.local()


def _active_tape() -> "Graph | None":
    return getattr(_TLS, "tape", None)


class Graph:
    """Ordered record of executed ops, replayed in reverse for adjoints.

    Ops record themselves while the graph is entered as a context manager.
    Records are appended in execution order, so inputs always precede the
    ops that consume them; ``backward`` walks them once, in reverse.
    A graph and the tensors recorded on it belong to one thread.
    """

    def __init__(self):
        self._records: list[tuple[str, tuple[Tensor, ...], Tensor, Callable]] = []

    def __enter__(self) -> "Graph":
        if _active_tape() is not None:
            raise RuntimeError("another Graph is already recording on this thread")
        _TLS.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TLS.tape = None

    def __len__(self) -> int:
        return len(self._records)

    def op_names(self) -> list[str]:
        return [rec[0] for rec in self._records]

    def backward(self, loss: Tensor) -> None:
        """Propagate adjoints from a scalar loss back to leaf gradients."""
        if loss.data.size != 1:
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced while this Graph was recording")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for name, inputs, out, bwd in reversed(self._records):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            grads = bwd(g)
            for t, gt in zip(inputs, grads):
                if gt is None:
                    continue
                if t._tape is self:
                    prev = adjoint.get(id(t))
                    adjoint[id(t)] = gt if prev is None else prev + gt
                elif t.requires_grad:
                    t.grad += gt


def _record(name: str, inputs: tuple[Tensor, ...], out_data: np.ndarray,
            backward: Callable[[np.ndarray], tuple]) -> Tensor:
    _check_finite(name, out_data)
    out = _wrap(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad or t._tape is tape for t in inputs):
        out._tape = tape
        tape._records.append((name, inputs, out, backward))
    return out


def _sum_to_shape(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast adjoint back to the operand's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _record("add", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (_sum_to_shape(g * b.data, a.shape),
                _sum_to_shape(g * a.data, b.shape))

    return _record("mul", (a, b), out, bwd)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching; adjoints dA = dC·Bᵀ, dB = Aᵀ·dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2
    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd

    def bwd(g):
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape)
            gb = ad.reshape(-1, ad.shape[-1]).T @ g2
        else:
            ga = _sum_to_shape(g @ np.swapaxes(bd, -1, -2), ad.shape)
            gb = _sum_to_shape(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", (a, b), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat of an empty tensor list")
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _record("concat", ts, out, bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]

    def bwd(g):
        ga = np.zeros_like(a.data)
        ga[index] = g
        return (ga,)

    return _record("slice", (a,), out, bwd)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (np.transpose(g, inverse),)

    return _record("transpose", (a,), out, bwd)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(tuple(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record("reshape", (a,), out, bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]`` with a scatter-add adjoint into the table."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if table.ndim != 2:
        raise ValueError(f"embedding table must be rank 2, got {table.shape}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise ValueError(f"token id {bad} out of range for table of {n} entries")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _record("embedding", (table,), out, bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * du),)

    return _record("gelu", (a,), out, bwd)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def bwd(g):
        return (np.full(a.shape, float(g), dtype=a.dtype),)

    return _record("sum_all", (a,), out, bwd)


# ---------------------------------------------------------------------------
# neural-net specific ops


def masked_softmax(logits, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis restricted to unmasked positions.

    ``mask`` is a boolean array broadcastable to ``logits`` where True marks
    positions that may receive attention. Masked positions come out exactly
    0; each row must keep at least one unmasked position. Uses the usual
    max-subtraction for stability.
    """
    logits = _as_tensor(logits)
    x = logits.data
    if mask is None:
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("masked_softmax: a row has every position masked")
        neg = np.where(mask, x, -np.inf)
        shifted = neg - neg.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - inner),)

    return _record("masked_softmax", (logits,), y, bwd)


def layer_norm(x, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale + shift.

    Uses the biased (population) variance.
    """
    x = _as_tensor(x)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gamma/beta must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def bwd(g):
        dxhat = g * gamma.data
        dgamma = _sum_to_shape(g * xhat, gamma.shape)
        dbeta = _sum_to_shape(g, beta.shape)
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, bwd)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    Identity (the same tensor object) in eval mode or at p == 0.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = rng.random(x.shape) >= p
    factor = 1.0 / (1.0 - p)
    out = x.data * keep * factor

    def bwd(g):
        return (g * keep * factor,)

    return _record("dropout", (x,), out, bwd)


def cross_entropy(logits, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean of -log softmax(logits)[target] over non-pad positions.

    ``logits`` has shape (..., V) and ``targets`` the matching (...) integer
    shape; positions whose target equals ``pad_id`` are excluded from both
    the sum and the count.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(
            f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    nonpad = targets != pad_id
    count = int(nonpad.sum())
    if count == 0:
        raise ValueError("cross_entropy: every position is padding")
    live = targets[nonpad]
    if live.min() < 0 or live.max() >= vocab:
        bad = int(live.min()) if live.min() < 0 else int(live.max())
        raise ValueError(f"token id {bad} out of range for vocabulary of {vocab}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    safe = np.where(nonpad, targets, 0)
    picked = np.take_along_axis(x, safe[..., None], axis=-1)[..., 0]
    losses = (lse[..., 0] - picked) * nonpad
    # accumulate the scalar in float64 so padding layout cannot perturb it
    out = np.asarray(losses.sum(dtype=np.float64) / count)

    def bwd(g):
        p = np.exp(x - lse)
        p[~nonpad] = 0.0
        p[(*np.nonzero(nonpad), live)] -= 1.0
        return (p * (float(g) / count),)

    return _record("cross_entropy", (logits,), out, bwd)
