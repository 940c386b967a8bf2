"""Dense tensors with tape-based reverse-mode differentiation.

A ``Tensor`` wraps a numpy array; while a ``Graph`` is active (``with
record() as g``), every primitive applied to a gradient-requiring tensor
appends one node to the tape. ``Graph.backward`` sweeps the tape once in
reverse, accumulating vector-Jacobian products into ``Tensor.grad``.

The tape is rebuilt per forward pass and owned by one logical thread;
independent graphs (one per sample or per quadrature step) can run in
parallel threads because the active-graph stack is thread-local.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

Array = np.ndarray


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an operation."""


class Tensor:
    """A dense real array that can participate in a recorded graph.

    Values are immutable by convention once created; only ``grad`` is
    mutated (by accumulation during backward sweeps).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None

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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, no gradient flow through the result."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; every dunder routes through a recorded primitive
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self.dtype))


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node(NamedTuple):
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[Array], Sequence[Array | None]]


class Graph:
    """Ordered tape of recorded operations, topological by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, output: Tensor, retain: Iterable[Tensor] = ()) -> None:
        """Accumulate gradients of a scalar ``output`` into leaf tensors.

        Leaves with ``requires_grad`` receive (or add to) ``.grad``; tensors
        listed in ``retain`` also get their intermediate gradient attached.
        Calling backward twice without clearing grads accumulates additively.
        """
        if output.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        retain_ids = {id(t) for t in retain}
        flowing: dict[int, Array] = {id(output): np.ones_like(output.data)}
        holders: dict[int, Tensor] = {id(output): output}

        for node in reversed(self.nodes):
            gout = flowing.pop(id(node.output), None)
            if gout is None:
                continue
            if id(node.output) in retain_ids:
                _accumulate(node.output, gout)
            for tensor, gin in zip(node.inputs, node.vjp(gout)):
                if gin is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in flowing:
                    flowing[key] = flowing[key] + gin
                else:
                    flowing[key] = gin
                    holders[key] = tensor

        for key, grad in flowing.items():
            tensor = holders[key]
            if tensor.requires_grad or key in retain_ids:
                _accumulate(tensor, grad)


def _accumulate(tensor: Tensor, grad: Array) -> None:
    grad = np.asarray(grad, dtype=tensor.dtype)
    if grad.shape != tensor.shape:
        grad = grad.reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


_local = threading.local()


def _stack() -> list[Graph]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


@contextmanager
def record(graph: Graph | None = None):
    """Activate a tape; primitives executed inside are recorded onto it."""
    g = graph if graph is not None else Graph()
    _stack().append(g)
    try:
        yield g
    finally:
        _stack().pop()


def _emit(inputs: tuple[Tensor, ...], out_data: Array, vjp) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    stack = _stack()
    if stack and out.requires_grad:
        stack[-1].nodes.append(_Node(inputs, out, vjp))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        (a, b),
        a.data - b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        (a, b),
        a.data * b.data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return _emit((a, b), out, vjp)


def neg(a: Tensor) -> Tensor:
    return _emit((a,), -a.data, lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit((a,), out, lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _emit((a,), np.log(a.data), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _emit((a,), np.abs(a.data), lambda g: (g * np.sign(a.data),))


def relu(a: Tensor) -> Tensor:
    return _emit((a,), np.maximum(a.data, 0.0), lambda g: (g * (a.data > 0),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _emit((a,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: Array) -> Array:
    # split by sign to avoid overflow in exp
    pos = x >= 0
    out = np.empty_like(x)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape)
        return ga, gb

    return _emit((a, b), a.data @ b.data, vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return _emit((a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit((a,), a.data.transpose(axes), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty sequence")
    widths = [t.shape[axis] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), vjp)


def _norm_axis(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _emit((a,), a.data.sum(axis=axes, keepdims=keepdims), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _emit((a,), a.data.mean(axis=axes, keepdims=keepdims), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - inner),)

    return _emit((a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log of the softmax (never underflows to -inf)."""
    ax = axis % a.ndim
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - log_z

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _emit((a,), out, vjp)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes of a (C,H,W) or (N,C,H,W) map."""
    if a.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool expects 3-D or 4-D input, got {a.shape}")
    if a.shape[-1] < 1 or a.shape[-2] < 1:
        raise ShapeError(f"empty spatial extent in {a.shape}")
    return mean(a, axis=(-2, -1))


# ---------------------------------------------------------------------------
# convolution and resampling


def conv2d(x: Tensor, w: Tensor, padding: int = 0, stride: int = 1) -> Tensor:
    """2-D cross-correlation of (C,H,W) or (N,C,H,W) input with (Cout,Cin,k,k) kernel.

    With odd k and padding=(k-1)//2, stride 1 preserves spatial size.
    """
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    wd = w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects image {x.shape} and kernel {w.shape}")
    n, c_in, h, wdt = xd.shape
    c_out, c_k, k, k2 = wd.shape
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"kernel must be square with odd size, got {wd.shape}")
    if c_k != c_in:
        raise ShapeError(
            f"channel mismatch: input has {c_in} channels, kernel expects {c_k}"
        )
    if padding < 0 or stride < 1:
        raise ValueError(f"invalid padding={padding} or stride={stride}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wdt + 2 * padding - k) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"kernel {k} too large for padded input {x.shape}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(view.transpose(0, 2, 3, 1, 4, 5)).reshape(
        n * h_out * w_out, c_in * k * k
    )
    wmat = wd.reshape(c_out, c_in * k * k)
    out = (cols @ wmat.T).reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2)

    def vjp(g):
        g4 = g[None] if single else g
        gmat = np.ascontiguousarray(g4.transpose(0, 2, 3, 1)).reshape(
            n * h_out * w_out, c_out
        )
        gw = (gmat.T @ cols).reshape(wd.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, h_out, w_out, c_in, k, k)
            gcols = gcols.transpose(0, 3, 4, 5, 1, 2)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[
                        :,
                        :,
                        i : i + stride * h_out : stride,
                        j : j + stride * w_out : stride,
                    ] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + wdt]
            if single:
                gx = gx[0]
        return gx, gw

    return _emit((x, w), out[0] if single else out, vjp)


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int) -> Array:
    """Interpolation weights for 1-D bilinear resize, align-corners=false."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x: Tensor, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resample of the trailing two axes (align-corners=false)."""
    if x.ndim < 2:
        raise ShapeError(f"resize needs at least 2 axes, got {x.shape}")
    h_out, w_out = out_hw
    h_in, w_in = x.shape[-2:]
    rh = _resize_matrix(h_in, h_out).astype(x.dtype)
    rw = _resize_matrix(w_in, w_out).astype(x.dtype)
    out = np.einsum("oh,pw,...hw->...op", rh, rw, x.data, optimize=True)

    def vjp(g):
        return (np.einsum("oh,pw,...op->...hw", rh, rw, g, optimize=True),)

    return _emit((x,), out, vjp)


def detach(a: Tensor) -> Tensor:
    """Identical values with gradient flow blocked (stop-gradient)."""
    return a.detach()


# ---------------------------------------------------------------------------
# numerical oracle


def finite_difference_gradient(
    f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3
) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step must be positive, got h={h}")
    base = np.asarray(x.data, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        bump = flat.copy()
        bump[i] += h
        f_plus = float(f(Tensor(bump.reshape(base.shape))).data)
        bump[i] -= 2 * h
        f_minus = float(f(Tensor(bump.reshape(base.shape))).data)
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return Tensor(grad)
