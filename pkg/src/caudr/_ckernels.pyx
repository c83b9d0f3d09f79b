# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled packing kernels.

Same contracts as caudr._kernels_np; see that module for documentation.
Only data movement happens here, so results (and therefore everything
downstream) are bitwise identical to the numpy fallback.
"""

import numpy as np

cimport cython
cimport numpy as cnp

cnp.import_array()

NAME = "cython"

ctypedef fused real:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def _im2col_impl(real[:, :, :, ::1] x, int kh, int kw, int stride, int pad,
                 real[:, ::1] out):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t bi, oy, ox, ki, kj, ci, iy, ix, row, base
    for bi in range(n):
        for oy in range(oh):
            for ox in range(ow):
                row = (bi * oh + oy) * ow + ox
                for ki in range(kh):
                    iy = oy * stride + ki - pad
                    for kj in range(kw):
                        ix = ox * stride + kj - pad
                        base = (ki * kw + kj) * c
                        if iy < 0 or iy >= h or ix < 0 or ix >= w:
                            for ci in range(c):
                                out[row, base + ci] = 0
                        else:
                            # contiguous C-length run on both sides
                            for ci in range(c):
                                out[row, base + ci] = x[bi, iy, ix, ci]


def im2col(x, int kh, int kw, int stride, int pad):
    """Pack convolution windows of an NHWC tensor into (N*OH*OW, kh*kw*C)."""
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n * oh * ow, kh * kw * c), dtype=x.dtype)
    _im2col_impl(x, kh, kw, stride, pad, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def _col2im_impl(real[:, ::1] dcol, int kh, int kw, int stride, int pad,
                 real[:, :, :, ::1] dx):
    # (ki, kj)-major accumulation matches the numpy fallback's shifted
    # adds, keeping the floating-point result bitwise identical.
    cdef Py_ssize_t n = dx.shape[0], h = dx.shape[1], w = dx.shape[2], c = dx.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t bi, oy, ox, ki, kj, ci, iy, ix, row, base
    for ki in range(kh):
        for kj in range(kw):
            base = (ki * kw + kj) * c
            for bi in range(n):
                for oy in range(oh):
                    iy = oy * stride + ki - pad
                    if iy < 0 or iy >= h:
                        continue
                    for ox in range(ow):
                        ix = ox * stride + kj - pad
                        if ix < 0 or ix >= w:
                            continue
                        row = (bi * oh + oy) * ow + ox
                        for ci in range(c):
                            dx[bi, iy, ix, ci] += dcol[row, base + ci]


def col2im_add(dcol, int n, int h, int w, int c, int kh, int kw, int stride, int pad):
    """Scatter-add the inverse of im2col: (N*OH*OW, kh*kw*C) -> (N,H,W,C)."""
    dcol = np.ascontiguousarray(dcol)
    dx = np.zeros((n, h, w, c), dtype=dcol.dtype)
    _col2im_impl(dcol, kh, kw, stride, pad, dx)
    return dx


@cython.boundscheck(False)
@cython.wraparound(False)
def _sgd_impl(real[::1] p, real[::1] g, real[::1] v,
              real lr, real wd, real mom):
    # elementwise chain mirrors the numpy fallback op-for-op so results
    # stay bitwise identical (compiled with FP contraction disabled)
    cdef Py_ssize_t i, n = p.shape[0]
    cdef real t
    if wd != 0:
        for i in range(n):
            t = (mom * v[i] + g[i]) + wd * p[i]
            v[i] = t
            p[i] = p[i] - lr * t
    else:
        for i in range(n):
            t = mom * v[i] + g[i]
            v[i] = t
            p[i] = p[i] - lr * t


def sgd_update(p, g, v, double lr, double wd, double mom):
    """In-place v <- mom*v + g + wd*p; p <- p - lr*v (flat f32/f64 views)."""
    if p.dtype == np.float32:
        _sgd_impl[float](p.reshape(-1), np.ascontiguousarray(g, dtype=np.float32).reshape(-1),
                         v.reshape(-1), <float>lr, <float>wd, <float>mom)
    else:
        _sgd_impl[double](p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                          v.reshape(-1), lr, wd, mom)


@cython.boundscheck(False)
@cython.wraparound(False)
def _bn_fwd_impl(real[:, ::1] x, real[::1] mean, real[::1] inv_std,
                 real[::1] gamma, real[::1] beta,
                 real[:, ::1] xhat, real[:, ::1] out):
    cdef Py_ssize_t r, ci, rows = x.shape[0], c = x.shape[1]
    cdef real t
    for r in range(rows):
        for ci in range(c):
            t = (x[r, ci] - mean[ci]) * inv_std[ci]
            xhat[r, ci] = t
            out[r, ci] = gamma[ci] * t + beta[ci]


def bn_forward_map(x2, mean, inv_std, gamma, beta):
    """Fused (x - mean) * inv_std and gamma * xhat + beta over (rows, C)."""
    xhat = np.empty_like(x2)
    out = np.empty_like(x2)
    if x2.dtype == np.float32:
        _bn_fwd_impl[float](x2, mean, inv_std, gamma, beta, xhat, out)
    else:
        _bn_fwd_impl[double](x2, mean, inv_std, gamma, beta, xhat, out)
    return xhat, out


@cython.boundscheck(False)
@cython.wraparound(False)
def _bn_bwd_impl(real[:, ::1] g, real[:, ::1] xhat, real[::1] gamma,
                 real[::1] pre, real[::1] s1, real[::1] s2,
                 real m, real[:, ::1] dx):
    # dx = pre * (m * (g*gamma) - s1 - xhat * s2), matching the numpy
    # fallback's per-element operation order
    cdef Py_ssize_t r, ci, rows = g.shape[0], c = g.shape[1]
    cdef real t
    for r in range(rows):
        for ci in range(c):
            t = m * (g[r, ci] * gamma[ci]) - s1[ci]
            t = t - xhat[r, ci] * s2[ci]
            dx[r, ci] = pre[ci] * t


def bn_backward_map(g2, xhat2, gamma, pre, s1, s2, double m):
    dx = np.empty_like(g2)
    if g2.dtype == np.float32:
        _bn_bwd_impl[float](g2, xhat2, gamma, pre, s1, s2, <float>m, dx)
    else:
        _bn_bwd_impl[double](g2, xhat2, gamma, pre, s1, s2, m, dx)
    return dx


@cython.boundscheck(False)
@cython.wraparound(False)
def _block_split_impl(real[:, :, ::1] planes, int bs, real[:, :, :, ::1] out):
    cdef Py_ssize_t p = planes.shape[0], h = planes.shape[1], w = planes.shape[2]
    cdef Py_ssize_t hb = h // bs, wb = w // bs
    cdef Py_ssize_t pi, by, bx, yy, xx
    for pi in range(p):
        for by in range(hb):
            for bx in range(wb):
                for yy in range(bs):
                    for xx in range(bs):
                        out[pi, by * wb + bx, yy, xx] = planes[pi, by * bs + yy, bx * bs + xx]


def block_split(planes, int bs=8):
    """(P, H, W) -> (P, (H//bs)*(W//bs), bs, bs), blocks in row-major order."""
    planes = np.ascontiguousarray(planes)
    p, h, w = planes.shape
    out = np.empty((p, (h // bs) * (w // bs), bs, bs), dtype=planes.dtype)
    _block_split_impl(planes, bs, out)
    return out


@cython.boundscheck(False)
@cython.wraparound(False)
def _block_merge_impl(real[:, :, :, ::1] blocks, int bs, real[:, :, ::1] out):
    cdef Py_ssize_t p = out.shape[0], h = out.shape[1], w = out.shape[2]
    cdef Py_ssize_t hb = h // bs, wb = w // bs
    cdef Py_ssize_t pi, by, bx, yy, xx
    for pi in range(p):
        for by in range(hb):
            for bx in range(wb):
                for yy in range(bs):
                    for xx in range(bs):
                        out[pi, by * bs + yy, bx * bs + xx] = blocks[pi, by * wb + bx, yy, xx]


def block_merge(blocks, int h, int w, int bs=8):
    """Inverse of block_split: (P, nb, bs, bs) -> (P, H, W)."""
    blocks = np.ascontiguousarray(blocks)
    p = blocks.shape[0]
    out = np.empty((p, h, w), dtype=blocks.dtype)
    _block_merge_impl(blocks, bs, out)
    return out
