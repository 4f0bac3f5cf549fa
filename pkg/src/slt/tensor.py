"""Dense tensors with reverse-mode automatic differentiation.

The engine is eager: every operation computes its value immediately (numpy
does the array arithmetic) and, when any input participates in gradients,
records how to push gradients back to its inputs. Calling
``backward(loss)`` replays those records in reverse topological order.

Tensors default to float32; building them from float64 arrays keeps float64
throughout, which the gradient-check tests rely on. A graph and its tensors
belong to one thread; independent graphs may run concurrently.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the operation (log, div)."""


class TapeConsumedError(RuntimeError):
    """backward() was called again on an already-consumed graph."""


class NonScalarLossError(ValueError):
    """backward() requires a single-element loss tensor."""


_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None and isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
        dtype = data.dtype
    arr = np.asarray(data, dtype=dtype or np.float32)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float array, optionally tracked for gradients.

    ``data`` is a row-major numpy array (float32 by default, float64 for
    verification runs). After ``backward()`` every reachable tensor with
    ``requires_grad`` holds the derivative of the loss in ``grad``, with
    contributions from multiple uses summed. Gradients accumulate across
    backward passes until ``zero_grad()`` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable[[np.ndarray], tuple]] = None
        self._consumed = False
        self.name = name

    # -- introspection ----------------------------------------------------

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        backward(self)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    """Wrap an op result, recording parents/vjp only when gradients flow."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- computation tape ------------------------------------------------------


class ComputationTape:
    """Topologically ordered record of the ops that produced a tensor.

    ``trace`` walks the graph from the result; entry *i* always appears
    after every entry producing one of its inputs. A tape supports exactly
    one backward pass: running it consumes the recorded closures, so a
    second pass raises TapeConsumedError.
    """

    def __init__(self, entries: list):
        self.entries = entries
        self._done = False

    @classmethod
    def trace(cls, result: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(result, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            if node._consumed:
                raise TapeConsumedError("graph contains ops consumed by an earlier backward pass")
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, root: Tensor) -> None:
        if self._done or root._consumed:
            raise TapeConsumedError("backward already ran on this graph; rebuild it to differentiate again")
        self._done = True
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.entries):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, contrib in zip(node._parents, node._vjp(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                held = grads.get(id(parent))
                grads[id(parent)] = contrib if held is None else held + contrib
            node._consumed = True
            node._vjp = None
        root._consumed = True


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar loss.

    Populates ``grad`` on every reachable tensor with ``requires_grad``;
    a tensor consumed by several ops receives the sum of all branch
    gradients. The traced tape is single-use.
    """
    if loss.size != 1:
        raise NonScalarLossError(f"loss must be a single element, got shape {loss.shape}")
    ComputationTape.trace(loss).backward(loss)


# -- arithmetic ------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    if np.any(b.data == 0):
        raise DomainError("division by zero")
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(out, (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics on leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatchError(f"matmul: incompatible shapes {a.shape} x {b.shape}") from exc

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return _make(out, (a,), lambda g: (g.transpose(inverse),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(out, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / np.maximum(out, np.finfo(out.dtype).tiny),))


# -- neural-network ops ----------------------------------------------------


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (a.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximation GELU: x/2 * (1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(out, (a,), vjp)


def softmax(a: Tensor, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Normalized exponentials along ``axis``, stabilized by max-subtraction.

    ``mask`` is a boolean keep-mask broadcastable to the input: masked
    positions get probability exactly 0 (equivalent to a -inf pre-softmax
    bias). A slice with nothing to keep yields all zeros rather than NaN.
    """
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeMismatchError(f"softmax: axis {axis} invalid for shape {a.shape}")
    x = a.data
    if mask is not None:
        keep = np.broadcast_to(mask, x.shape)
        neg = np.finfo(x.dtype).min
        x = np.where(keep, x, neg)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(keep, e, 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make(out, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not (-a.ndim <= axis < a.ndim):
        raise ShapeMismatchError(f"log_softmax: axis {axis} invalid for shape {a.shape}")
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), vjp)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeMismatchError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last axis ({dim},)"
        )
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (a, gain, bias), vjp)


def dropout(a: Tensor, p: float, mode: str, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: train mode zeroes with probability p and rescales
    survivors by 1/(1-p); eval mode is the identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or p == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    scale = np.asarray(1.0 / (1.0 - p), dtype=a.data.dtype)
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) * scale
    out = a.data * keep
    return _make(out, (a,), lambda g: (g * keep,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into a (vocab, dim) table; gradients scatter-add by id."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, (table,), vjp)


def gather_last(a: Tensor, idx: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(idx)
    if idx.shape != a.shape[:-1]:
        raise ShapeMismatchError(f"gather_last: index shape {idx.shape} must equal {a.shape[:-1]}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[-1]):
        raise IndexError(f"index out of range for last axis of size {a.shape[-1]}")
    expanded = idx[..., None]
    out = np.take_along_axis(a.data, expanded, axis=-1)[..., 0]

    def vjp(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, expanded, g[..., None], axis=-1)
        return (ga,)

    return _make(out, (a,), vjp)
