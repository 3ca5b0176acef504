"""Reverse-mode automatic differentiation over dense float32 arrays.

A `Tensor` wraps a numpy array and doubles as a tape node: every operation
records its parents and a backward closure, so the graph built during a
forward pass is acyclic and already topologically ordered by construction.
Calling `backward` on a scalar result accumulates gradients into the leaves.
Gradient recording is skipped entirely inside `no_grad()` or when no input
requires a gradient, which makes the same forward code usable for inference.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_f32(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float32)
    return arr


class Tensor:
    """Dense float32 array plus the differentiation record that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "op", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), op: str = "leaf"):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = parents
        self.op = op
        self._backward = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return narrow(self, key)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def abs(self):
        return absolute(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swap_axes(self, axis0: int = -2, axis1: int = -1):
        return swap_axes(self, axis0, axis1)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, rng: np.random.Generator | None = None) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: tuple, op: str, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, parents=parents, op=op)
        out._backward = backward_fn
        return out
    return Tensor(data, requires_grad=False, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), "add", bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), "mul", bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), "div", bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(a, _unbroadcast(ga, a.data.shape))
        _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), "matmul", bwd)


# -- shape manipulation ------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), "reshape", bwd)


def swap_axes(a, axis0: int = -2, axis1: int = -1) -> Tensor:
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, axis0, axis1)

    def bwd(g):
        _accum(a, np.swapaxes(g, axis0, axis1))

    return _make(np.ascontiguousarray(out_data), (a,), "swap_axes", bwd)


def narrow(a, key) -> Tensor:
    """Basic slicing; backward scatters into a zero tensor of the input shape."""
    a = as_tensor(a)
    out_data = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] = g
        _accum(a, full)

    return _make(np.ascontiguousarray(out_data), (a,), "narrow", bwd)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(idx)])
            offset += n

    return _make(out_data, tuple(parts), "concat", bwd)


# -- reductions --------------------------------------------------------


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bwd(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape))
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return _make(out_data, (a,), "sum", bwd)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    elif isinstance(axis, int):
        count = a.data.shape[axis]
    else:
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- pointwise ---------------------------------------------------------


def absolute(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.abs(a.data)

    def bwd(g):
        _accum(a, g * np.sign(a.data))

    return _make(out_data, (a,), "abs", bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out_data))

    return _make(out_data, (a,), "sqrt", bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), "log", bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), "exp", bwd)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bwd(g):
        _accum(a, g * (sig * (1.0 + a.data * (1.0 - sig))))

    return _make(out_data, (a,), "silu", bwd)


def softmax(a) -> Tensor:
    """Softmax along the last axis."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), "softmax", bwd)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (pre-affine)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def bwd(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        _accum(a, inv * (g - gm - y * gy))

    return _make(y.astype(np.float32), (a,), "layer_norm", bwd)


# -- lookup and quantization -------------------------------------------


def embedding(table, indices: np.ndarray) -> Tensor:
    """Row lookup `table[indices]`; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    out_data = table.data[idx]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        _accum(table, gt)

    return _make(out_data, (table,), "embedding", bwd)


def ste_quantize(x, quantized: np.ndarray) -> Tensor:
    """Forward returns `quantized`; backward passes the gradient to `x` unchanged.

    The code lookup between projection and reconstruction is treated as the
    identity map, which is the straight-through approximation the residual
    quantizer relies on.
    """
    x = as_tensor(x)
    q = _as_f32(quantized)
    if q.shape != x.data.shape:
        raise ValueError(f"ste_quantize shape mismatch: {x.data.shape} vs {q.shape}")

    def bwd(g):
        _accum(x, g)

    return _make(q, (x,), "ste_quantize", bwd)


def frame_signal(x, frame: int, hop: int) -> Tensor:
    """Slice (..., T) into overlapping windows (..., F, frame); backward overlap-adds."""
    x = as_tensor(x)
    t = x.data.shape[-1]
    if t < frame:
        raise ValueError(f"signal length {t} shorter than frame {frame}")
    count = 1 + (t - frame) // hop
    idx = hop * np.arange(count)[:, None] + np.arange(frame)[None, :]
    out_data = x.data[..., idx]

    def bwd(g):
        gx = np.zeros_like(x.data)
        flat = gx.reshape(-1, t)
        gflat = g.reshape(-1, count, frame)
        for row in range(flat.shape[0]):
            np.add.at(flat[row], idx.reshape(-1), gflat[row].reshape(-1))
        _accum(x, gx.reshape(x.data.shape))

    return _make(out_data, (x,), "frame_signal", bwd)


# -- backward pass -----------------------------------------------------


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` for every leaf that requires it."""
    if loss.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor with no recorded graph")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def assert_finite(x, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {what}")
