"""Blockwise 8x8 frequency decomposition of RGB images.

An image of shape (H, W, 3) with H, W multiples of 8 maps to 192 spectral
channels: for each color plane, each 8x8 block is transformed with the
orthonormal 2-D DCT-II, and coefficient (u, v) of every block is stored at
that block's position in channel color*64 + zigzag(u, v). Low channel
index therefore means low spatial frequency within each color group.

The transform is computed on decoded pixels (not parsed from compressed
bitstreams), which keeps it exact, format independent, and free of
chroma-subsampling artifacts.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
import struct

import numpy as np

from caudr import backend

N_FREQ = 64
N_CHANNELS = 192
BLOCK = 8

CACHE_MAGIC = b"CDCT1"
CACHE_VERSION = 1


class BlockSizeError(ValueError):
    """Image dimensions are not multiples of the 8-pixel block size."""


class SpectrumFormatError(IOError):
    """Malformed or truncated spectrum cache file."""


# -- zigzag scan ---------------------------------------------------------------


def _zigzag_table() -> np.ndarray:
    """uv_of[k] = (u, v) for the standard zigzag scan of an 8x8 block."""
    order = []
    for s in range(2 * BLOCK - 1):
        # within each anti-diagonal the scan alternates direction
        rng = range(min(s, BLOCK - 1), max(0, s - BLOCK + 1) - 1, -1) if s % 2 == 0 else range(
            max(0, s - BLOCK + 1), min(s, BLOCK - 1) + 1
        )
        for u in rng:
            order.append((u, s - u))
    return np.asarray(order, dtype=np.int64)


_UV_OF_K = _zigzag_table()  # (64, 2)
_K_OF_UV = np.empty((BLOCK, BLOCK), dtype=np.int64)
for _k, (_u, _v) in enumerate(_UV_OF_K):
    _K_OF_UV[_u, _v] = _k
_UVFLAT_OF_K = _UV_OF_K[:, 0] * BLOCK + _UV_OF_K[:, 1]


def zigzag(u: int, v: int) -> int:
    """Map frequency pair (u, v) to its zigzag scan index."""
    if not (0 <= u < BLOCK and 0 <= v < BLOCK):
        raise ValueError(f"zigzag indices must be in [0, 7], got ({u}, {v})")
    return int(_K_OF_UV[u, v])


def inverse_zigzag(k: int) -> tuple[int, int]:
    """Map zigzag scan index back to its frequency pair (u, v)."""
    if not 0 <= k < N_FREQ:
        raise ValueError(f"zigzag index must be in [0, 63], got {k}")
    u, v = _UV_OF_K[k]
    return int(u), int(v)


# -- orthonormal 8x8 DCT-II ----------------------------------------------------


def _basis(dtype) -> np.ndarray:
    n = np.arange(BLOCK)
    k = n[:, None]
    mat = np.cos((2 * n[None, :] + 1) * k * np.pi / (2 * BLOCK))
    mat[0, :] *= np.sqrt(1.0 / BLOCK)
    mat[1:, :] *= np.sqrt(2.0 / BLOCK)
    return mat.astype(dtype)


_BASIS = {np.dtype(np.float32): _basis(np.float32), np.dtype(np.float64): _basis(np.float64)}


def _blockwise(blocks: np.ndarray, mat: np.ndarray) -> np.ndarray:
    """Apply y = mat @ b @ mat.T to every 8x8 block in (M, 8, 8)."""
    m = blocks.shape[0]
    t1 = (blocks.reshape(m * BLOCK, BLOCK) @ mat.T).reshape(m, BLOCK, BLOCK)
    t1 = np.ascontiguousarray(t1.transpose(0, 2, 1))
    t2 = (t1.reshape(m * BLOCK, BLOCK) @ mat.T).reshape(m, BLOCK, BLOCK)
    return np.ascontiguousarray(t2.transpose(0, 2, 1))


def _forward_planes(planes: np.ndarray) -> np.ndarray:
    """(P, H, W) pixel planes -> (P, 64, H/8, W/8) zigzag-ordered channels."""
    p, h, w = planes.shape
    hb, wb = h // BLOCK, w // BLOCK
    mat = _BASIS[planes.dtype]
    blocks = backend.block_split(planes)  # (P, nb, 8, 8)
    coeffs = _blockwise(blocks.reshape(-1, BLOCK, BLOCK), mat)
    flat = coeffs.reshape(p, hb * wb, N_FREQ)[:, :, _UVFLAT_OF_K]
    return np.ascontiguousarray(flat.transpose(0, 2, 1)).reshape(p, N_FREQ, hb, wb)


def _inverse_planes(chans: np.ndarray, h: int, w: int) -> np.ndarray:
    """(P, 64, H/8, W/8) zigzag-ordered channels -> (P, H, W) pixel planes."""
    p = chans.shape[0]
    hb, wb = h // BLOCK, w // BLOCK
    mat = _BASIS[chans.dtype]
    flat = np.ascontiguousarray(
        chans.reshape(p, N_FREQ, hb * wb).transpose(0, 2, 1)
    )
    coeffs = np.empty_like(flat)
    coeffs[:, :, _UVFLAT_OF_K] = flat
    blocks = _blockwise_inverse(coeffs.reshape(-1, BLOCK, BLOCK), mat)
    return backend.block_merge(blocks.reshape(p, hb * wb, BLOCK, BLOCK), h, w)


def _blockwise_inverse(blocks: np.ndarray, mat: np.ndarray) -> np.ndarray:
    m = blocks.shape[0]
    t1 = (blocks.reshape(m * BLOCK, BLOCK) @ mat).reshape(m, BLOCK, BLOCK)
    t1 = np.ascontiguousarray(t1.transpose(0, 2, 1))
    t2 = (t1.reshape(m * BLOCK, BLOCK) @ mat).reshape(m, BLOCK, BLOCK)
    return np.ascontiguousarray(t2.transpose(0, 2, 1))


# -- domain types --------------------------------------------------------------


@dataclass
class ImageTensor:
    """RGB image, float pixels, dimensions multiples of 8.

    Dataset images live in [0, 1]; reconstructions after channel surgery
    may leave that range and are not clamped here.
    """

    data: np.ndarray  # (H, W, 3)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) image, got {self.data.shape}")
        h, w = self.data.shape[:2]
        if h % BLOCK or w % BLOCK:
            raise BlockSizeError(
                f"image dimensions must be multiples of {BLOCK}, got {h}x{w}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("image contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class SpectralTensor:
    """192-channel blockwise frequency representation of one image."""

    data: np.ndarray  # (192, H/8, W/8)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != N_CHANNELS:
            raise ValueError(
                f"expected ({N_CHANNELS}, blocks, blocks) spectrum, got {self.data.shape}"
            )

    @property
    def block_rows(self) -> int:
        return self.data.shape[1]

    @property
    def block_cols(self) -> int:
        return self.data.shape[2]

    @property
    def channels(self) -> int:
        return N_CHANNELS


# -- public transforms ---------------------------------------------------------


def dct_decompose_batch(images: np.ndarray, layout: str = "nchw") -> np.ndarray:
    """(B, H, W, 3) images -> (B, 192, H/8, W/8) spectra.

    layout="nhwc" returns (B, H/8, W/8, 192) instead (the training-loop
    layout); channel semantics are identical.
    """
    b, h, w, c = images.shape
    if c != 3:
        raise ValueError(f"expected RGB images, got {c} channels")
    if h % BLOCK or w % BLOCK:
        raise BlockSizeError(
            f"image dimensions must be multiples of {BLOCK}, got {h}x{w}"
        )
    hb, wb = h // BLOCK, w // BLOCK
    planes = np.ascontiguousarray(images.transpose(0, 3, 1, 2)).reshape(b * 3, h, w)
    chans = _forward_planes(planes)  # (B*3, 64, hb, wb)
    if layout == "nchw":
        return chans.reshape(b, 3 * N_FREQ, hb, wb)
    nhwc = chans.reshape(b, 3 * N_FREQ, hb * wb).transpose(0, 2, 1)
    return np.ascontiguousarray(nhwc).reshape(b, hb, wb, 3 * N_FREQ)


def idct_reconstruct_batch(spectra: np.ndarray, clamp: bool = False) -> np.ndarray:
    """(B, 192, H/8, W/8) spectra -> (B, H, W, 3) images."""
    b, c, hb, wb = spectra.shape
    if c != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels, got {c}")
    h, w = hb * BLOCK, wb * BLOCK
    planes = _inverse_planes(spectra.reshape(b * 3, N_FREQ, hb, wb), h, w)
    images = np.ascontiguousarray(
        planes.reshape(b, 3, h, w).transpose(0, 2, 3, 1)
    )
    if clamp:
        np.clip(images, 0.0, 1.0, out=images)
    return images


def dct_decompose(image: ImageTensor) -> SpectralTensor:
    """Decompose one image into its 192 spectral channels."""
    return SpectralTensor(dct_decompose_batch(image.data[None])[0])


def idct_reconstruct(spec: SpectralTensor, clamp: bool = False) -> ImageTensor:
    """Exact inverse of dct_decompose up to float rounding; unclamped by default."""
    return ImageTensor(idct_reconstruct_batch(spec.data[None], clamp=clamp)[0])


def band_reconstruct(spec: SpectralTensor, lo: int, hi: int, clamp: bool = False) -> ImageTensor:
    """Reconstruct keeping only zigzag frequencies lo..hi (same band per color)."""
    if lo > hi:
        raise ValueError(f"band bounds must satisfy lo <= hi, got {lo} > {hi}")
    if not (0 <= lo < N_FREQ and 0 <= hi < N_FREQ):
        raise ValueError(f"band bounds must be in [0, 63], got {lo}:{hi}")
    kept = np.zeros_like(spec.data)
    freq = np.arange(N_CHANNELS) % N_FREQ
    sel = (freq >= lo) & (freq <= hi)
    kept[sel] = spec.data[sel]
    return idct_reconstruct(SpectralTensor(kept), clamp=clamp)


def spectral_hflip(spectra: np.ndarray) -> np.ndarray:
    """Horizontal image flip expressed directly on (..., 192, Hb, Wb) spectra.

    Mirroring pixel columns mirrors the block columns and negates the
    coefficients of odd horizontal frequencies, so flipping commutes with
    decomposition exactly.
    """
    flipped = spectra[..., ::-1].copy()
    odd_v = np.asarray([(_UV_OF_K[k % N_FREQ, 1] % 2) == 1 for k in range(N_CHANNELS)])
    flipped[..., odd_v, :, :] *= -1
    return flipped


# -- offline cache ---------------------------------------------------------------


def cache_write(spec: SpectralTensor, path) -> None:
    """Write a spectrum to disk for fast reload during training."""
    data = np.ascontiguousarray(spec.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(
            struct.pack(
                "<IIII", CACHE_VERSION, spec.block_rows, spec.block_cols, N_CHANNELS
            )
        )
        fh.write(data.tobytes())


def cache_read(path) -> SpectralTensor:
    path = Path(path)
    blob = path.read_bytes()
    header = len(CACHE_MAGIC) + 16
    if len(blob) < header or blob[: len(CACHE_MAGIC)] != CACHE_MAGIC:
        raise SpectrumFormatError(f"{path}: not a spectrum cache file (bad magic)")
    version, hb, wb, nch = struct.unpack_from("<IIII", blob, len(CACHE_MAGIC))
    if version != CACHE_VERSION:
        raise SpectrumFormatError(f"{path}: unsupported version {version}")
    if nch != N_CHANNELS:
        raise SpectrumFormatError(f"{path}: expected {N_CHANNELS} channels, got {nch}")
    count = nch * hb * wb
    if len(blob) != header + 4 * count:
        raise SpectrumFormatError(
            f"{path}: payload length {len(blob) - header} does not match "
            f"{nch}x{hb}x{wb} float32 ({4 * count} bytes)"
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=header)
    return SpectralTensor(data.reshape(nch, hb, wb).copy())
