"""Dense tensors with reverse-mode automatic differentiation on numpy.

Covers exactly what the pipeline needs: 1-D/2-D float arrays, matmul,
softmax, layer norm, GELU, concatenation/slicing, and a replayable tape
whose gradients are validated against central finite differences.
Gradient accumulation replays the tape in a fixed topological order, so
repeated runs are bit-identical.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "Tensor",
    "no_grad",
    "concat",
    "softmax",
    "layer_norm",
    "gelu",
    "multi_head_attention",
    "gradients",
    "finite_difference",
    "set_alloc_hook",
]

_grad_enabled = True

# Optional allocation meter; the bench module installs a callable(nbytes)
# to account live pipeline state without touching the allocator.
_alloc_hook: Optional[Callable[[int], None]] = None


def set_alloc_hook(hook: Optional[Callable[[int], None]]) -> None:
    global _alloc_hook
    _alloc_hook = hook


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference/bench paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A dense float array plus the closure needed to replay its adjoint."""

    __slots__ = ("data", "grad", "_backward", "_prev")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("non-finite tensor values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self._backward: Optional[Callable[[], None]] = None
        self._prev: Tuple["Tensor", ...] = ()
        if _alloc_hook is not None:
            _alloc_hook(arr.nbytes)

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, prev: Tuple["Tensor", ...],
              backward: Callable[["Tensor"], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._backward = None
        out._prev = ()
        if _alloc_hook is not None:
            _alloc_hook(data.nbytes)
        if _grad_enabled:
            out._prev = prev
            out._backward = lambda: backward(out)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accum(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += _unbroadcast(np.asarray(grad), self.data.shape)

    # -- arithmetic -----------------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        other = Tensor._wrap(other)

        def backward(out):
            self._accum(out.grad)
            other._accum(out.grad)

        return Tensor._make(self.data + other.data, (self, other), backward)

    __radd__ = __add__

    def __neg__(self):
        def backward(out):
            self._accum(-out.grad)

        return Tensor._make(-self.data, (self,), backward)

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)

        def backward(out):
            self._accum(out.grad * other.data)
            other._accum(out.grad * self.data)

        return Tensor._make(self.data * other.data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / float(other))

    def __pow__(self, exponent: float):
        exponent = float(exponent)

        def backward(out):
            self._accum(out.grad * exponent * self.data ** (exponent - 1.0))

        return Tensor._make(self.data ** exponent, (self,), backward)

    def __matmul__(self, other):
        other = Tensor._wrap(other)

        def backward(out):
            self._accum(out.grad @ other.data.T)
            other._accum(self.data.T @ out.grad)

        return Tensor._make(self.data @ other.data, (self, other), backward)

    @property
    def T(self) -> "Tensor":
        def backward(out):
            self._accum(out.grad.T)

        return Tensor._make(self.data.T, (self,), backward)

    def __getitem__(self, idx):
        def backward(out):
            grad = np.zeros_like(self.data)
            grad[idx] = out.grad
            self._accum(grad)

        return Tensor._make(self.data[idx], (self,), backward)

    # -- reductions and elementwise functions ---------------------------------

    def sum(self, axis=None, keepdims=False):
        def backward(out):
            grad = out.grad
            if axis is not None and not keepdims:
                grad = np.expand_dims(grad, axis)
            self._accum(np.broadcast_to(grad, self.data.shape))

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def exp(self):
        value = np.exp(self.data)

        def backward(out):
            self._accum(out.grad * value)

        return Tensor._make(value, (self,), backward)

    def log(self):
        def backward(out):
            self._accum(out.grad / self.data)

        return Tensor._make(np.log(self.data), (self,), backward)

    def tanh(self):
        value = np.tanh(self.data)

        def backward(out):
            self._accum(out.grad * (1.0 - value * value))

        return Tensor._make(value, (self,), backward)

    def item(self) -> float:
        return float(self.data.reshape(()))

    # -- backward pass --------------------------------------------------------

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("loss must be a scalar")
        order: List[Tensor] = []
        seen = set()

        def visit(node: "Tensor") -> None:
            stack = [(node, iter(node._prev))]
            seen.add(id(node))
            while stack:
                current, children = stack[-1]
                advanced = False
                for child in children:
                    if id(child) not in seen:
                        seen.add(id(child))
                        stack.append((child, iter(child._prev)))
                        advanced = True
                        break
                if not advanced:
                    order.append(current)
                    stack.pop()

        visit(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


# -- composite operations -----------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("empty concat")
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + extents)

    def backward(out):
        for tensor, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * out.grad.ndim
            index[axis] = slice(start, stop)
            tensor._accum(out.grad[tuple(index)])

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tuple(tensors), backward)


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    if t.data.size == 0 or t.data.shape[axis] == 0:
        raise ValueError("empty softmax")
    shift = t.data.max(axis=axis, keepdims=True)  # constant; no gradient flows
    e = (t - Tensor(shift)).exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(t: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; eps sits inside the square root."""
    mu = t.mean(axis=-1, keepdims=True)
    centered = t - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered * (var + eps) ** -0.5 * gain + bias


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(t: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    inner = (t + t * t * t * 0.044715) * _GELU_C
    return t * 0.5 * (inner.tanh() + 1.0)


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor,
                         wq: Optional[Tensor], wk: Optional[Tensor],
                         wv: Optional[Tensor], wo: Optional[Tensor],
                         heads: int, return_weights: bool = False):
    """Scaled dot-product attention over ``heads`` feature slices.

    ``None`` projections mean identity; ``wo=None`` skips the output
    combiner (the literal single-projection form, only sensible for a
    single head).
    """
    d = query.data.shape[-1]
    if heads < 1 or d % heads != 0:
        raise ValueError("hidden size not divisible by heads")
    if key.data.shape[0] == 0:
        raise ValueError("empty key set")
    q = query if wq is None else query @ wq
    k = key if wk is None else key @ wk
    v = value if wv is None else value @ wv
    dk = d // heads
    scale = 1.0 / math.sqrt(dk)
    outs = []
    weights = []
    for h in range(heads):
        cols = slice(h * dk, (h + 1) * dk)
        att = softmax(q[:, cols] @ k[:, cols].T * scale, axis=-1)
        weights.append(att)
        outs.append(att @ v[:, cols])
    out = outs[0] if heads == 1 else concat(outs, axis=1)
    if wo is not None:
        out = out @ wo
    if return_weights:
        return out, weights
    return out


def gradients(loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
    """Run the backward pass and return one gradient per parameter."""
    if loss.data.size != 1:
        raise ValueError("loss must be a scalar")
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


def finite_difference(f: Callable[[np.ndarray], float], x: np.ndarray,
                      eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, per coordinate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    base = x.reshape(-1)
    for i in range(base.size):
        bumped = base.copy()
        bumped[i] = base[i] + eps
        hi = f(bumped.reshape(x.shape))
        bumped[i] = base[i] - eps
        lo = f(bumped.reshape(x.shape))
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad
