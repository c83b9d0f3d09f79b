"""Kernel backend selection.

The hot packing kernels (im2col / col2im and 8x8 block gather/scatter)
exist twice: compiled Cython loops in caudr._ckernels and a pure-numpy
fallback in caudr._kernels_np. Selection happens once at import:

    CAUDR_BACKEND=auto    compiled if importable, else numpy (default)
    CAUDR_BACKEND=cython  compiled, error if the extension is missing
    CAUDR_BACKEND=numpy   fallback, even when the extension exists

Both backends are pure data movement; the arithmetic lives in the caller
(BLAS matmuls), so results are bitwise identical across backends.
"""

from __future__ import annotations

import os

from caudr import _kernels_np

_choice = os.environ.get("CAUDR_BACKEND", "auto").lower()

if _choice not in ("auto", "cython", "numpy"):
    raise ValueError(f"CAUDR_BACKEND must be auto|cython|numpy, got {_choice!r}")

if _choice == "numpy":
    kernels = _kernels_np
else:
    try:
        from caudr import _ckernels as kernels  # type: ignore[no-redef]
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "CAUDR_BACKEND=cython requested but the compiled extension is "
                "not available; build it with `pip install -e .` or switch to "
                "CAUDR_BACKEND=numpy"
            )
        kernels = _kernels_np

BACKEND_NAME: str = kernels.NAME

im2col = kernels.im2col
col2im_add = kernels.col2im_add
block_split = kernels.block_split
block_merge = kernels.block_merge
sgd_update = kernels.sgd_update
bn_forward_map = kernels.bn_forward_map
bn_backward_map = kernels.bn_backward_map


def _tune_allocator() -> None:
    """Raise glibc's mmap/trim thresholds so the multi-megabyte arrays a
    training step churns through are recycled in the arena instead of
    being returned to the kernel (page faults on every reuse otherwise).
    Best effort: silently skipped off glibc."""
    import ctypes

    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        m_mmap_threshold = -3
        m_trim_threshold = -1
        libc.mallopt(m_mmap_threshold, 1 << 30)
        libc.mallopt(m_trim_threshold, 1 << 30)
    except OSError:
        pass


_tune_allocator()
