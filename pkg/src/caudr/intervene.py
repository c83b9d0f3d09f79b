"""Batch-level channel surgery.

Two ways to re-randomize the device-dependent channels of a sample while
keeping its label-relevant channels intact:

    exchange  a partner's channel content replaces the sample's own
              content on the replaced channels, wholesale
    match     the sample's channel keeps its shape but is re-standardized
              to the partner's per-channel mean and standard deviation

Partners come from a random derangement of the batch, so every sample is
actually intervened. Each intervened sample keeps its own label and
domain id. Both operations are differentiable: gradients reach both
donors and, through the blend weights, the gate.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from caudr import tensor as T

MATCH_EPS = 1e-5


@dataclass
class Pairing:
    """A partner permutation: derangement for batches of two or more."""

    perm: np.ndarray

    def __post_init__(self):
        self.perm = np.asarray(self.perm, dtype=np.int64)
        b = self.perm.size
        if sorted(self.perm.tolist()) != list(range(b)):
            raise ValueError("pairing must be a permutation of 0..B-1")
        if b >= 2 and np.any(self.perm == np.arange(b)):
            raise ValueError("pairing must have no fixed points for B >= 2")

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.perm.size)
        return inv


def make_pairing(batch_size: int, rng: np.random.Generator) -> Pairing:
    """Uniform random derangement (identity for a single-sample batch)."""
    if batch_size < 1:
        raise ValueError(f"batch size must be positive, got {batch_size}")
    if batch_size == 1:
        return Pairing(np.zeros(1, dtype=np.int64))
    idx = np.arange(batch_size)
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == idx):
            return Pairing(perm)


def _wexpand(w: np.ndarray, data_format: str) -> np.ndarray:
    """Reshape (C,) or (B, C) weights for broadcast over a 4-D batch."""
    if data_format == "nchw":
        return w.reshape((1,) * (2 - w.ndim) + w.shape + (1, 1))
    if w.ndim == 1:
        return w.reshape(1, 1, 1, -1)
    return w.reshape(w.shape[0], 1, 1, w.shape[1])


def _blend(x: T.Tensor, partner: T.Tensor, weights: T.Tensor, data_format: str) -> T.Tensor:
    """w*x + (1-w)*partner over channels, exact select for binary w.

    weights is (C,) shared or (B, C) per sample, broadcast over space.
    """
    w = weights.data
    wfull = _wexpand(w, data_format)
    spatial_axes = (2, 3) if data_format == "nchw" else (1, 2)
    binary = np.all((w == 0.0) | (w == 1.0))
    if binary:
        out = np.where(wfull.astype(bool), x.data, partner.data)
    else:
        out = wfull * x.data + (1.0 - wfull) * partner.data

    def vjp_x(g: np.ndarray) -> np.ndarray:
        return g * wfull

    def vjp_partner(g: np.ndarray) -> np.ndarray:
        return g * (1.0 - wfull)

    def vjp_w(g: np.ndarray) -> np.ndarray:
        gw = (g * (x.data - partner.data)).sum(axis=spatial_axes)
        if w.ndim == 1:
            gw = gw.sum(axis=0)
        return gw.astype(w.dtype, copy=False)

    return T._make(out, [(x, vjp_x), (partner, vjp_partner), (weights, vjp_w)], "channel_blend")


def _check_batch(batch: T.Tensor, weights: T.Tensor, pairing: Pairing,
                 data_format: str) -> None:
    if batch.data.ndim != 4:
        raise ValueError(f"expected a 4-D spectral batch, got {batch.data.shape}")
    b = batch.data.shape[0]
    c = batch.data.shape[1 if data_format == "nchw" else 3]
    if b == 0:
        raise ValueError("empty batch")
    w = weights.data
    if w.shape not in ((c,), (b, c)):
        raise ValueError(
            f"channel weights must have shape ({c},) or ({b}, {c}), got {w.shape}"
        )
    if pairing.perm.size != b:
        raise ValueError(f"pairing size {pairing.perm.size} does not match batch {b}")


def exchange_do(batch: T.Tensor, weights: T.Tensor, pairing: Pairing,
                data_format: str = "nchw") -> T.Tensor:
    """Swap channel content with the partner wherever the weight is low."""
    _check_batch(batch, weights, pairing, data_format)
    if batch.data.shape[0] == 1:
        warnings.warn("exchange_do on a single-sample batch is a no-op")
        return batch
    partner = T.batch_permute(batch, pairing.perm)
    return _blend(batch, partner, weights, data_format)


def match_do(batch: T.Tensor, weights: T.Tensor, pairing: Pairing,
             eps: float = MATCH_EPS, data_format: str = "nchw") -> T.Tensor:
    """Re-standardize low-weight channels to the partner's mean/std."""
    _check_batch(batch, weights, pairing, data_format)
    spatial_axes = (2, 3) if data_format == "nchw" else (1, 2)
    mean = T.tmean(batch, axis=spatial_axes, keepdims=True)
    var = T.tmean(T.square(T.sub(batch, mean)), axis=spatial_axes, keepdims=True)
    std = T.sqrt(var)
    p_mean = T.batch_permute(mean, pairing.perm)
    p_std = T.batch_permute(std, pairing.perm)
    normalized = T.div(T.sub(batch, mean), T.add(std, np.asarray(eps, dtype=batch.dtype)))
    matched = T.add(T.mul(normalized, p_std), p_mean)
    return _blend(batch, matched, weights, data_format)


# -- ndarray variants (analysis, tests, image dumps) ---------------------------


def exchange_do_array(batch: np.ndarray, mask: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Forward-only exchange on raw arrays with a boolean keep-mask."""
    mask = np.asarray(mask, dtype=bool)
    b, c = batch.shape[:2]
    if mask.shape not in ((c,), (b, c)):
        raise ValueError(f"mask must have shape ({c},) or ({b}, {c}), got {mask.shape}")
    mfull = mask.reshape((1,) * (2 - mask.ndim) + mask.shape + (1, 1))
    return np.where(mfull, batch, batch[perm])


def match_do_array(batch: np.ndarray, mask: np.ndarray, perm: np.ndarray,
                   eps: float = MATCH_EPS) -> np.ndarray:
    """Forward-only moment matching on raw arrays with a boolean keep-mask."""
    mask = np.asarray(mask, dtype=bool)
    b, c = batch.shape[:2]
    if mask.shape not in ((c,), (b, c)):
        raise ValueError(f"mask must have shape ({c},) or ({b}, {c}), got {mask.shape}")
    mean = batch.mean(axis=(2, 3), keepdims=True)
    std = batch.std(axis=(2, 3), keepdims=True)
    matched = (batch - mean) / (std + eps) * std[perm] + mean[perm]
    mfull = mask.reshape((1,) * (2 - mask.ndim) + mask.shape + (1, 1))
    return np.where(mfull, batch, matched)
