# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct-convolution loops.

All three routines work on a pre-padded input and accumulate into a
caller-allocated, zero-initialised output.  The innermost loop runs over the
contiguous width axis so that the compiler can vectorise it when the
horizontal stride is 1.
"""
import numpy as np

ctypedef fused real:
    float
    double


def conv_forward(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] w,
                 real[:, :, :, ::1] out, int sh, int sw):
    cdef Py_ssize_t N = out.shape[0], O = out.shape[1]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t n, o, c, i, j, y, x
    cdef real wv
    cdef real* orow
    cdef const real* irow
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for i in range(KH):
                    for j in range(KW):
                        wv = w[o, c, i, j]
                        for y in range(Ho):
                            orow = &out[n, o, y, 0]
                            irow = &xp[n, c, y * sh + i, j]
                            if sw == 1:
                                for x in range(Wo):
                                    orow[x] += wv * irow[x]
                            else:
                                for x in range(Wo):
                                    orow[x] += wv * irow[x * sw]


def conv_backward_input(const real[:, :, :, ::1] g, const real[:, :, :, ::1] w,
                        real[:, :, :, ::1] gxp, int sh, int sw):
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t C = w.shape[1], KH = w.shape[2], KW = w.shape[3]
    cdef Py_ssize_t n, o, c, i, j, y, x
    cdef real wv
    cdef const real* grow
    cdef real* irow
    for n in range(N):
        for c in range(C):
            for o in range(O):
                for i in range(KH):
                    for j in range(KW):
                        wv = w[o, c, i, j]
                        for y in range(Ho):
                            grow = &g[n, o, y, 0]
                            irow = &gxp[n, c, y * sh + i, j]
                            if sw == 1:
                                for x in range(Wo):
                                    irow[x] += wv * grow[x]
                            else:
                                for x in range(Wo):
                                    irow[x * sw] += wv * grow[x]


def conv_backward_weight(const real[:, :, :, ::1] xp, const real[:, :, :, ::1] g,
                         real[:, :, :, ::1] gw, int sh, int sw):
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t C = gw.shape[1], KH = gw.shape[2], KW = gw.shape[3]
    cdef Py_ssize_t T = KH * KW
    cdef Py_ssize_t n, o, c, i, j, t, y, x
    # one row buffer per tap: each gradient row is read once for all taps and
    # the hot loop stays elementwise; buffers are flushed to double per sample
    cdef real[::1] bufs = np.zeros(T * Wo, dtype=np.float32 if real is float else np.float64)
    cdef double[::1] acc = np.zeros(T, dtype=np.float64)
    cdef real* b
    cdef const real* grow
    cdef const real* irow
    for o in range(O):
        for c in range(C):
            acc[:] = 0
            for n in range(N):
                for x in range(T * Wo):
                    bufs[x] = 0
                for y in range(Ho):
                    grow = &g[n, o, y, 0]
                    for i in range(KH):
                        irow = &xp[n, c, y * sh + i, 0]
                        for j in range(KW):
                            b = &bufs[(i * KW + j) * Wo]
                            if sw == 1:
                                for x in range(Wo):
                                    b[x] += grow[x] * irow[j + x]
                            else:
                                for x in range(Wo):
                                    b[x] += grow[x] * irow[j + x * sw]
                for t in range(T):
                    for x in range(Wo):
                        acc[t] += bufs[t * Wo + x]
            for i in range(KH):
                for j in range(KW):
                    gw[o, c, i, j] += <real>acc[i * KW + j]


def bn_stats(const real[:, :, ::1] x, double[::1] mean, double[::1] var):
    """Two-pass per-channel mean and biased variance of x (N, C, L)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t n, c, k
    cdef double s, m
    cdef double count = N * L
    cdef real mr, d
    cdef real[::1] buf = np.zeros(L, dtype=np.float32 if real is float else np.float64)
    cdef real* b = &buf[0]
    cdef const real* xr
    for c in range(C):
        for k in range(L):
            b[k] = 0
        for n in range(N):
            xr = &x[n, c, 0]
            for k in range(L):
                b[k] += xr[k]
        s = 0.0
        for k in range(L):
            s += b[k]
        m = s / count
        mr = <real>m
        for k in range(L):
            b[k] = 0
        for n in range(N):
            xr = &x[n, c, 0]
            for k in range(L):
                d = xr[k] - mr
                b[k] += d * d
        s = 0.0
        for k in range(L):
            s += b[k]
        mean[c] = m
        var[c] = s / count


def bn_apply(const real[:, :, ::1] x, const real[::1] scale, const real[::1] shift,
             real[:, :, ::1] out, bint relu):
    """out = x * scale[c] + shift[c], optionally clamped at zero."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t n, c, k
    cdef real a, b, v
    cdef const real* xr
    cdef real* orow
    for n in range(N):
        for c in range(C):
            a = scale[c]
            b = shift[c]
            xr = &x[n, c, 0]
            orow = &out[n, c, 0]
            if relu:
                for k in range(L):
                    v = xr[k] * a + b
                    orow[k] = v if v > 0 else 0
            else:
                for k in range(L):
                    orow[k] = xr[k] * a + b


def bn_backward(const real[:, :, ::1] g, const real[:, :, ::1] x, const real[:, :, ::1] out,
                const double[::1] mean, const double[::1] inv, const real[::1] gamma,
                real[:, :, ::1] gx, double[::1] gsum, double[::1] gxhat, bint relu, bint need_gx):
    """Batch-norm backward with an optional ReLU mask taken from ``out > 0``."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], L = x.shape[2]
    cdef Py_ssize_t n, c, k
    cdef double s1, s2, count = N * L
    cdef real k1, k2, k3, mr, gv
    cdef real[::1] buf1 = np.zeros(L, dtype=np.float32 if real is float else np.float64)
    cdef real[::1] buf2 = np.zeros(L, dtype=np.float32 if real is float else np.float64)
    cdef real* b1 = &buf1[0]
    cdef real* b2 = &buf2[0]
    cdef const real* gr
    cdef const real* xr
    cdef const real* orow
    cdef real* gxr
    for c in range(C):
        mr = <real>mean[c]
        for k in range(L):
            b1[k] = 0
            b2[k] = 0
        for n in range(N):
            gr = &g[n, c, 0]
            xr = &x[n, c, 0]
            orow = &out[n, c, 0]
            if relu:
                for k in range(L):
                    gv = gr[k] if orow[k] > 0 else 0
                    b1[k] += gv
                    b2[k] += gv * (xr[k] - mr)
            else:
                for k in range(L):
                    b1[k] += gr[k]
                    b2[k] += gr[k] * (xr[k] - mr)
        s1 = 0.0
        s2 = 0.0
        for k in range(L):
            s1 += b1[k]
            s2 += b2[k]
        s2 *= inv[c]
        gsum[c] = s1
        gxhat[c] = s2
        if not need_gx:
            continue
        # gx = gamma*inv/M * (M*g - sum(g) - xhat*sum(g*xhat))
        k1 = <real>(gamma[c] * inv[c])
        k2 = <real>(gamma[c] * inv[c] * s1 / count)
        k3 = <real>(gamma[c] * inv[c] * inv[c] * s2 / count)
        for n in range(N):
            gr = &g[n, c, 0]
            xr = &x[n, c, 0]
            orow = &out[n, c, 0]
            gxr = &gx[n, c, 0]
            if relu:
                for k in range(L):
                    gv = gr[k] if orow[k] > 0 else 0
                    gxr[k] = k1 * gv - k2 - k3 * (xr[k] - mr)
            else:
                for k in range(L):
                    gxr[k] = k1 * gr[k] - k2 - k3 * (xr[k] - mr)
