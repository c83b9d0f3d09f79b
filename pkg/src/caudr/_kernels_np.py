"""Pure-numpy packing kernels.

Fallback implementations of the data-movement kernels that the compiled
extension (caudr._ckernels) accelerates. Both backends move bytes only;
all floating-point arithmetic (the gemms) happens in the caller through
BLAS, so the two backends produce bitwise-identical results.

Convolution activations use NHWC layout: windows pack into
(N*OH*OW, kh*kw*C) so that both the pack and the scatter stream over
contiguous C-length runs, and the matmuls run in their fast tall-matrix
orientation.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

NAME = "numpy"


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Pack convolution windows of an NHWC tensor into (N*OH*OW, kh*kw*C)."""
    n, h, w, c = x.shape
    if pad > 0:
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad : pad + h, pad : pad + w, :] = x
    else:
        xp = np.ascontiguousarray(x)
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    sn, sh, sw, sc = xp.strides
    windows = as_strided(
        xp,
        shape=(n, oh, ow, kh, kw, c),
        strides=(sn, sh * stride, sw * stride, sh, sw, sc),
    )
    return np.ascontiguousarray(windows).reshape(n * oh * ow, kh * kw * c)


def col2im_add(
    dcol: np.ndarray,
    n: int,
    h: int,
    w: int,
    c: int,
    kh: int,
    kw: int,
    stride: int,
    pad: int,
) -> np.ndarray:
    """Scatter-add the inverse of im2col: (N*OH*OW, kh*kw*C) -> (N,H,W,C)."""
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=dcol.dtype)
    dwin = dcol.reshape(n, oh, ow, kh, kw, c)
    # Overlapping windows accumulate; kh*kw shifted adds keep this fully
    # vectorized without np.add.at. The (ki, kj)-major order fixes the
    # floating-point accumulation order (mirrored by the compiled kernel).
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, ki : ki + oh * stride : stride, kj : kj + ow * stride : stride, :] += (
                dwin[:, :, :, ki, kj, :]
            )
    if pad > 0:
        return np.ascontiguousarray(dxp[:, pad : pad + h, pad : pad + w, :])
    return dxp


def sgd_update(p: np.ndarray, g: np.ndarray, v: np.ndarray,
               lr: float, wd: float, mom: float) -> None:
    """In-place v <- mom*v + g + wd*p; p <- p - lr*v (flat f32/f64 views)."""
    np.multiply(v, mom, out=v)
    v += g
    if wd != 0.0:
        v += wd * p
    p -= lr * v


def bn_forward_map(x2, mean, inv_std, gamma, beta):
    """Fused (x - mean) * inv_std and gamma * xhat + beta over (rows, C)."""
    xhat = (x2 - mean) * inv_std
    out = gamma * xhat + beta
    return xhat, out


def bn_backward_map(g2, xhat2, gamma, pre, s1, s2, m):
    """pre * (m * (g*gamma) - s1 - xhat * s2) over (rows, C)."""
    return pre * (m * (g2 * gamma) - s1 - xhat2 * s2)


def block_split(planes: np.ndarray, bs: int = 8) -> np.ndarray:
    """(P, H, W) -> (P, (H//bs)*(W//bs), bs, bs), blocks in row-major order."""
    p, h, w = planes.shape
    hb, wb = h // bs, w // bs
    out = planes.reshape(p, hb, bs, wb, bs).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(out).reshape(p, hb * wb, bs, bs)


def block_merge(blocks: np.ndarray, h: int, w: int, bs: int = 8) -> np.ndarray:
    """Inverse of block_split: (P, nb, bs, bs) -> (P, H, W)."""
    p = blocks.shape[0]
    hb, wb = h // bs, w // bs
    out = blocks.reshape(p, hb, wb, bs, bs).transpose(0, 1, 3, 2, 4)
    return np.ascontiguousarray(out).reshape(p, h, w)
