"""NumPy implementation of the direct-convolution loops.

Mirrors the signatures of the compiled ``_conv_ext`` module: every routine
takes a padded input, strides ``(sh, sw)``, and accumulates into an output
array supplied by the caller.  Each kernel tap becomes one strided view and
one small tensor contraction.
"""

import numpy as np


def _tap(a, i, j, ho, wo, sh, sw):
    return a[:, :, i : i + (ho - 1) * sh + 1 : sh, j : j + (wo - 1) * sw + 1 : sw]


def conv_forward(xp, w, out, sh, sw):
    _, _, ho, wo = out.shape
    kh, kw = w.shape[2:]
    for i in range(kh):
        for j in range(kw):
            out += np.einsum("nchw,oc->nohw", _tap(xp, i, j, ho, wo, sh, sw), w[:, :, i, j], optimize=True)


def conv_backward_input(g, w, gxp, sh, sw):
    _, _, ho, wo = g.shape
    kh, kw = w.shape[2:]
    for i in range(kh):
        for j in range(kw):
            view = _tap(gxp, i, j, ho, wo, sh, sw)
            view += np.einsum("nohw,oc->nchw", g, w[:, :, i, j], optimize=True)


def conv_backward_weight(xp, g, gw, sh, sw):
    _, _, ho, wo = g.shape
    kh, kw = gw.shape[2:]
    for i in range(kh):
        for j in range(kw):
            gw[:, :, i, j] += np.tensordot(g, _tap(xp, i, j, ho, wo, sh, sw), axes=([0, 2, 3], [0, 2, 3]))


def bn_stats(x, mean, var):
    mean[:] = x.mean(axis=(0, 2), dtype=np.float64)
    centred = x - mean[None, :, None]
    var[:] = (centred * centred).mean(axis=(0, 2))


def bn_apply(x, scale, shift, out, relu):
    np.multiply(x, scale[None, :, None], out=out)
    out += shift[None, :, None]
    if relu:
        np.maximum(out, 0, out=out)


def bn_backward(g, x, out, mean, inv, gamma, gx, gsum, gxhat, relu, need_gx):
    if relu:
        g = np.where(out > 0, g, 0)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    gsum[:] = g.sum(axis=(0, 2), dtype=np.float64)
    gxhat[:] = (g * xhat).sum(axis=(0, 2), dtype=np.float64)
    if need_gx:
        m = x.shape[0] * x.shape[2]
        k = (gamma * inv / m)[None, :, None]
        gx[...] = k * (m * g - gsum[None, :, None] - xhat * gxhat[None, :, None])
