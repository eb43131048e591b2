"""Convolution kernels with a compiled fast path.

The compiled ``_conv_ext`` module is used when it imports; otherwise the
NumPy loops in ``_conv_py`` take over.  Set ``GATED_RES2NET_BACKEND=python``
to force the fallback.  Both backends share the padding, allocation and 1x1
handling below, so they differ only in the inner loops.
"""

import os

import numpy as np

from . import _conv_py

BACKEND = "python"
_impl = _conv_py
if os.environ.get("GATED_RES2NET_BACKEND", "").lower() != "python":
    try:
        from . import _conv_ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _conv_py


def available_backends():
    names = ["python"]
    try:
        from . import _conv_ext  # noqa: F401

        names.append("cython")
    except ImportError:  # pragma: no cover
        pass
    return names


# With many channels each tap is a sizeable matrix product and BLAS beats
# the direct loops; the automatic choice routes such convolutions to NumPy.
BLAS_MIN_CHANNEL_PRODUCT = 128


def _module(backend, channels=0):
    if backend is None:
        if channels >= BLAS_MIN_CHANNEL_PRODUCT:
            return _conv_py
        return _impl
    if backend == "python":
        return _conv_py
    if backend == "cython":
        from . import _conv_ext

        return _conv_ext
    raise ValueError(f"unknown backend {backend!r}")


def output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d_forward(x, w, stride=(1, 1), padding=(0, 0), backend=None):
    """Cross-correlate ``x`` (N, C, H, W) with ``w`` (O, C, kh, kw)."""
    sh, sw = stride
    ph, pw = padding
    n, _, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = output_size(h, kh, sh, ph), output_size(wd, kw, sw, pw)
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        xs = x[:, :, ::sh, ::sw].reshape(n, x.shape[1], ho * wo)
        return np.matmul(w.reshape(o, -1), xs).reshape(n, o, ho, wo)
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    _module(backend, o * x.shape[1]).conv_forward(_pad(x, ph, pw), np.ascontiguousarray(w), out, sh, sw)
    return out


def conv2d_backward_input(g, w, x_shape, stride=(1, 1), padding=(0, 0), backend=None):
    sh, sw = stride
    ph, pw = padding
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        ho, wo = g.shape[2:]
        gx = np.zeros(x_shape, dtype=g.dtype)
        gx[:, :, ::sh, ::sw] = np.matmul(w.reshape(o, c).T, g.reshape(n, o, ho * wo)).reshape(n, c, ho, wo)
        return gx
    gxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=g.dtype)
    _module(backend, o * c).conv_backward_input(np.ascontiguousarray(g), np.ascontiguousarray(w), gxp, sh, sw)
    return gxp[:, :, ph : ph + h, pw : pw + wd]


def conv2d_backward_weight(g, x, w_shape, stride=(1, 1), padding=(0, 0), backend=None):
    sh, sw = stride
    ph, pw = padding
    o, c, kh, kw = w_shape
    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        n, _, ho, wo = g.shape
        xs = x[:, :, ::sh, ::sw].reshape(n, c, ho * wo)
        gw = np.tensordot(g.reshape(n, o, ho * wo), xs, axes=([0, 2], [0, 2]))
        return gw.reshape(w_shape)
    gw = np.zeros(w_shape, dtype=g.dtype)
    _module(backend, o * c).conv_backward_weight(_pad(x, ph, pw), np.ascontiguousarray(g), gw, sh, sw)
    return gw


def _flat(a):
    return np.ascontiguousarray(a).reshape(a.shape[0], a.shape[1], -1)


def batch_norm_forward(x, gamma, beta, eps, relu=False, backend=None):
    """Train-mode batch norm of (N, C, H, W); returns out, mean, biased var, 1/std."""
    impl = _module(backend)
    xf = _flat(x)
    c = x.shape[1]
    mean = np.empty(c)
    var = np.empty(c)
    impl.bn_stats(xf, mean, var)
    inv = 1.0 / np.sqrt(var + eps)
    scale = (gamma * inv).astype(x.dtype)
    shift = (beta - mean * gamma * inv).astype(x.dtype)
    out = np.empty_like(xf)
    impl.bn_apply(xf, scale, shift, out, bool(relu))
    return out.reshape(x.shape), mean, var, inv


def batch_norm_apply(x, scale, shift, relu=False, backend=None):
    xf = _flat(x)
    out = np.empty_like(xf)
    _module(backend).bn_apply(xf, scale.astype(x.dtype), shift.astype(x.dtype), out, bool(relu))
    return out.reshape(x.shape)


def batch_norm_backward(g, x, out, mean, inv, gamma, relu=False, need_gx=True, backend=None):
    """Gradients (gx, dgamma, dbeta) of train-mode batch norm, ReLU mask from ``out``."""
    c = x.shape[1]
    gsum = np.empty(c)
    gxhat = np.empty(c)
    gx = np.empty(_flat(x).shape, dtype=x.dtype) if need_gx else np.empty((0, 0, 0), dtype=x.dtype)
    _module(backend).bn_backward(
        _flat(g), _flat(x), _flat(out), mean, inv, np.ascontiguousarray(gamma), gx, gsum, gxhat, bool(relu), bool(need_gx)
    )
    dtype = x.dtype
    return (gx.reshape(x.shape) if need_gx else None), gxhat.astype(dtype), gsum.astype(dtype)
