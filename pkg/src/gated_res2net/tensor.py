"""Minimal reverse-mode automatic differentiation over NumPy arrays.

A :class:`Tensor` wraps an ``ndarray``.  Operations on tensors that require
gradients record their inputs and a backward rule; :meth:`Tensor.backward`
orders the recorded graph topologically, replays the rules from the loss
towards the leaves, and then releases the graph.

Feature maps use the layout ``(N, C, D, T)``: batch, channel, spectrum, time.
Channel operations act on axis ``-3`` so an unbatched ``(C, D, T)`` map works
too.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

_default_dtype = np.dtype(np.float32)
_state = threading.local()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype)


def get_default_dtype() -> np.dtype:
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None and not (isinstance(data, np.ndarray) and data.dtype.kind == "f"):
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self, grad=None) -> None:
        """Populate ``.grad`` on every tensor that requires it and feeds this one.

        Gradients accumulate into existing ``.grad`` arrays.  The recorded
        graph is released afterwards, so a second call only re-seeds the root.
        """
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")
        tape = _topological_order(self)
        owned: set[int] = set()
        _accumulate(self, grad, owned)
        for node in reversed(tape):
            fn = node._backward
            if fn is None or node.grad is None:
                continue
            for parent, pg in zip(node._parents, fn(node.grad)):
                if pg is not None and parent.requires_grad:
                    _accumulate(parent, pg, owned)
            node._parents = ()
            node._backward = None


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype))


def _accumulate(t: Tensor, g: np.ndarray, owned: set) -> None:
    # arrays handed out by backward rules may be shared between parents,
    # so only arrays allocated here are ever updated in place
    if isinstance(g, _SliceGrad):
        if t.grad is None:
            t.grad = np.zeros(t.shape, dtype=t.dtype)
            owned.add(id(t))
        elif id(t) not in owned:
            t.grad = t.grad.copy()
            owned.add(id(t))
        t.grad[g.index] += g.value
        return
    if t.grad is None:
        t.grad = g
    elif id(t) in owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        owned.add(id(t))


class _SliceGrad:
    """Gradient that is nonzero only on ``index`` of the parent."""

    __slots__ = ("index", "value")

    def __init__(self, index, value):
        self.index = index
        self.value = value


def _topological_order(root: Tensor) -> list:
    order: list = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {b.shape} against {a.shape}") from exc


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return _result(out, (x,), lambda g: (np.where(out > 0, g, 0),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    out = np.where(v >= 0, 1 / (1 + e), e / (1 + e)).astype(v.dtype, copy=False)
    # saturated values would round to exactly 0 or 1
    lo = np.nextafter(v.dtype.type(0), v.dtype.type(1))
    hi = np.nextafter(v.dtype.type(1), v.dtype.type(0))
    return np.clip(out, lo, hi)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _result(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


# ---------------------------------------------------------------- reductions


def mean_over(x: Tensor, axes: Iterable[int] = ()) -> Tensor:
    """Arithmetic mean over ``axes``; an empty tuple returns ``x`` unchanged."""
    axes = tuple(sorted(a % x.ndim for a in axes))
    if not axes:
        return x
    count = int(np.prod([x.shape[a] for a in axes]))
    if count == 0:
        raise DimensionError("mean over an empty extent")
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes) / count, shape),)

    return _result(x.data.mean(axis=axes), (x,), backward)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.broadcast_to(g, shape),))


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------- channels


def channel_mul(y: Tensor, a: Tensor) -> Tensor:
    """Scale each channel of ``y`` (..., C, D, T) by ``a`` (..., C)."""
    if y.ndim < 3 or y.shape[:-2] != a.shape:
        raise DimensionError(f"gate of shape {a.shape} does not match feature map {y.shape}")
    scale = a.data[..., None, None]

    def backward(g):
        gy = g * scale if y.requires_grad else None
        ga = (g * y.data).sum(axis=(-2, -1)) if a.requires_grad else None
        return gy, ga

    return _result(y.data * scale, (y, a), backward)


def concat_channels(parts: Sequence[Tensor], axis: int = -3) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("nothing to concatenate")
    axis = axis % parts[0].ndim
    try:
        data = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def backward(g):
        index = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            out.append(g[tuple(index)])
        return tuple(out)

    return _result(data, parts, backward)


def take_channels(x: Tensor, start: int, stop: int, axis: int = -3) -> Tensor:
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    return _result(x.data[index], (x,), lambda g: (_SliceGrad(index, g),))


def split_channels(x: Tensor, s: int, axis: int = -3) -> list:
    """Split ``x`` into ``s`` equal channel groups."""
    if x.ndim < 1:
        raise DimensionError("cannot split a scalar")
    c = x.shape[axis]
    if s < 1 or c % s:
        raise DimensionError(f"{c} channels cannot be split into {s} equal groups")
    width = c // s
    return [take_channels(x, i * width, (i + 1) * width, axis) for i in range(s)]


# ---------------------------------------------------------------- linear maps


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Compute ``Wᵀx (+ b)`` for ``x`` (..., in) and ``w`` (in, out)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"input of width {x.shape[-1]} does not fit weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"bias {b.shape} does not fit weight {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, w.shape[1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, backward)


matvec = dense


def _pair(v) -> tuple:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: Tensor, kernels_: Tensor, stride=1, padding=None) -> Tensor:
    """Cross-correlation of ``x`` (N, C, H, W) with ``kernels_`` (O, C, kh, kw).

    ``padding=None`` pads by ``k // 2`` so odd kernels at stride 1 keep the
    spatial size.  An unbatched (C, H, W) input gives an unbatched output.
    """
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), kernels_, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or kernels_.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernels, got {x.shape} and {kernels_.shape}")
    if x.shape[1] != kernels_.shape[1]:
        raise DimensionError(f"input has {x.shape[1]} channels but kernels expect {kernels_.shape[1]}")
    kh, kw = kernels_.shape[2:]
    stride = _pair(stride)
    padding = (kh // 2, kw // 2) if padding is None else _pair(padding)
    if x.shape[2] + 2 * padding[0] < kh or x.shape[3] + 2 * padding[1] < kw:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {x.shape[2:]}")
    out = kernels.conv2d_forward(x.data, kernels_.data, stride, padding)
    x_shape, w_shape = x.shape, kernels_.shape

    def backward(g):
        gx = kernels.conv2d_backward_input(g, kernels_.data, x_shape, stride, padding) if x.requires_grad else None
        gw = kernels.conv2d_backward_weight(g, x.data, w_shape, stride, padding) if kernels_.requires_grad else None
        return gx, gw

    return _result(out, (x, kernels_), backward)


# ---------------------------------------------------------------- normalisation


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, relu: bool = False):
    """Normalise each channel of ``x`` (N, C, H, W) with batch statistics.

    With ``relu=True`` the ReLU is fused into the same pass.  Returns the
    output tensor plus the batch mean and biased variance (float64).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm got input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    out, mean, var, inv = kernels.batch_norm_forward(x.data, gamma.data, beta.data, eps, relu)

    def backward(g):
        return kernels.batch_norm_backward(g, x.data, out, mean, inv, gamma.data, relu, x.requires_grad)

    return _result(out, (x, gamma, beta), backward), mean, var


def batch_norm_eval(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
                    eps: float = 1e-5, relu: bool = False):
    """Affine map ``(x - mean) / sqrt(var + eps) * gamma + beta`` with fixed statistics."""
    inv = 1 / np.sqrt(np.asarray(var, dtype=np.float64) + eps)
    mean = np.asarray(mean, dtype=np.float64)
    scale = gamma.data * inv
    shift = beta.data - mean * scale
    out = kernels.batch_norm_apply(x.data, scale, shift, relu)

    def backward(g):
        if relu:
            g = np.where(out > 0, g, 0)
        xhat = (x.data - mean[None, :, None, None]) * inv[None, :, None, None]
        gx = (g * scale[None, :, None, None]).astype(x.dtype) if x.requires_grad else None
        dtype = x.dtype
        return gx, (g * xhat).sum(axis=(0, 2, 3)).astype(dtype), g.sum(axis=(0, 2, 3)).astype(dtype)

    return _result(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[..., Tensor], x, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of a scalar ``f`` with central differences.

    ``x`` is a tensor or a sequence of tensors; ``f`` is called with them as
    positional arguments.  Differences are taken by swapping each tensor's
    ``data`` for a perturbed copy, so ``f`` may also close over modules whose
    parameters are among ``x``.  Returns the largest
    ``|g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|)`` over all coordinates.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad) for t in xs]
    for t in xs:
        t.requires_grad = True
        t.grad = None
    try:
        loss = f(*xs)
        if loss.size != 1:
            raise DimensionError("grad_check needs a scalar-valued function")
        loss.backward()
        worst = 0.0
        for t in xs:
            g_ad = np.zeros(t.shape) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
            base = t.data
            g_fd = np.zeros(t.shape)
            for idx in np.ndindex(*t.shape):
                vals = []
                for step in (eps, -eps):
                    bumped = base.copy()
                    bumped[idx] += step
                    t.data = bumped
                    with no_grad():
                        vals.append(float(f(*xs).data))
                g_fd[idx] = (vals[0] - vals[1]) / (2 * eps)
            t.data = base
            err = np.abs(g_ad - g_fd) / np.maximum(1e-12, np.abs(g_ad) + np.abs(g_fd))
            if err.size:
                worst = max(worst, float(err.max()))
        return worst
    finally:
        for t, (rg, g) in zip(xs, saved):
            t.requires_grad = rg
            t.grad = g
