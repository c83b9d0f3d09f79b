"""Channel-attention gate over the 192 spectral channels.

The gate scores every channel of a sample in (0, 1), where high scores
mark channels whose content carries label-relevant structure (kept
during interventions) and low scores mark channels treated as
device-dependent (replaced during interventions).

Four selection strategies turn per-sample scores into channel picks:

    oe   per-sample hard threshold of the scores
    boe  batch-mean scores used directly as soft blend weights
    bae  hard threshold of the batch-mean scores, shared by the batch
    fe   a fixed index set, scores ignored

Hard selections binarize in the forward pass and pass gradients through
unchanged, so the gate stays trainable through the intervention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from caudr import tensor as T
from caudr.spectrum import N_CHANNELS

STRATEGIES = ("oe", "boe", "bae", "fe")


class GateModule:
    """Spatial pooling, bottleneck perceptron, sigmoid scores per channel."""

    def __init__(self, rng: np.random.Generator, channels: int = N_CHANNELS,
                 bottleneck: int = 48, dtype=np.float32, name: str = "gate"):
        self.channels = channels
        std1 = np.sqrt(2.0 / channels)
        std2 = np.sqrt(2.0 / bottleneck)
        self.fc1_w = T.Parameter(rng.normal(0.0, std1, (bottleneck, channels)),
                                 f"{name}.fc1.weight", dtype=dtype)
        self.fc1_b = T.Parameter(np.zeros(bottleneck), f"{name}.fc1.bias", dtype=dtype)
        self.fc2_w = T.Parameter(rng.normal(0.0, std2, (channels, bottleneck)),
                                 f"{name}.fc2.weight", dtype=dtype)
        self.fc2_b = T.Parameter(np.zeros(channels), f"{name}.fc2.bias", dtype=dtype)

    def forward(self, spec: T.Tensor, data_format: str = "nchw") -> T.Tensor:
        """(B, C, h, w) spectra -> (B, C) sigmoid scores."""
        ch_axis = 1 if data_format == "nchw" else 3
        if spec.data.shape[ch_axis] != self.channels:
            raise T.ShapeMismatchError(
                f"gate expects {self.channels} channels, got {spec.data.shape[ch_axis]}"
            )
        pooled = T.global_avg_pool(spec, data_format)
        hidden = T.relu(T.linear(pooled, self.fc1_w, self.fc1_b))
        return T.sigmoid(T.linear(hidden, self.fc2_w, self.fc2_b))

    def parameters(self) -> list[T.Parameter]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


# -- pure selection math (ndarray in, ndarray out) ----------------------------


def bae_mask(gate_values: np.ndarray, mu: float) -> np.ndarray:
    """Shared hard mask: 1(column mean of the gate matrix > mu)."""
    gate_values = np.asarray(gate_values)
    if gate_values.ndim != 2 or gate_values.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, C) gate matrix, got {gate_values.shape}")
    return gate_values.mean(axis=0) > mu


def oe_masks(gate_values: np.ndarray, mu: float) -> np.ndarray:
    """Per-sample hard masks: 1(score > mu)."""
    gate_values = np.asarray(gate_values)
    if gate_values.ndim != 2 or gate_values.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, C) gate matrix, got {gate_values.shape}")
    return gate_values > mu


def default_fe_set(channels: int = N_CHANNELS, lowest: int = 24) -> np.ndarray:
    """Channel indices of the `lowest` zigzag frequencies in every color group."""
    per_color = np.arange(lowest)
    offsets = np.arange(channels // 64) * 64
    return np.concatenate([per_color + off for off in offsets])


def fe_mask(fixed_set, channels: int = N_CHANNELS) -> np.ndarray:
    idx = np.asarray(sorted(set(int(i) for i in fixed_set)), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= channels):
        raise ValueError(f"fixed set indices must be in [0, {channels}), got {idx.min()}..{idx.max()}")
    mask = np.zeros(channels, dtype=bool)
    mask[idx] = True
    return mask


# -- graph-level selection ------------------------------------------------------


@dataclass
class ChannelSelection:
    """Outcome of channel identification for one batch.

    weights is the in-graph tensor used by the interventions: binary with
    straight-through gradients for the hard strategies, the batch-mean
    scores themselves for boe. mask_bits is the hard mask (None for boe,
    which never thresholds).
    """

    strategy: str
    weights: T.Tensor  # (C,) shared or (B, C) per sample
    mask_bits: np.ndarray | None

    @property
    def popcount(self) -> int | None:
        if self.mask_bits is None:
            return None
        if self.mask_bits.ndim == 1:
            return int(self.mask_bits.sum())
        return int(round(self.mask_bits.sum(axis=1).mean()))


def identify_channels(
    gates: T.Tensor,
    strategy: str,
    mu: float,
    fixed_set=None,
) -> ChannelSelection:
    """Turn gate scores into the channel weights used by a do-operation."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}, expected one of {STRATEGIES}")
    if not 0.0 <= mu < 1.0:
        raise ValueError(f"mu must lie in [0, 1), got {mu}")
    if gates.data.ndim != 2 or gates.data.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, C) gate batch, got {gates.data.shape}")

    if strategy == "oe":
        weights = T.ste_threshold(gates, mu)
        return ChannelSelection("oe", weights, gates.data > mu)
    if strategy == "boe":
        weights = T.tmean(gates, axis=0)
        return ChannelSelection("boe", weights, None)
    if strategy == "bae":
        mean = T.tmean(gates, axis=0)
        weights = T.ste_threshold(mean, mu)
        return ChannelSelection("bae", weights, mean.data > mu)
    # fe
    if fixed_set is None:
        raise ValueError("strategy 'fe' requires a fixed channel set")
    mask = fe_mask(fixed_set, channels=gates.data.shape[1])
    weights = T.Tensor(mask.astype(gates.dtype))
    return ChannelSelection("fe", weights, mask)


def gate_loss(gates: T.Tensor, normalize: bool = True) -> T.Tensor:
    """Sum over channels of the batch-mean score, divided by the channel count.

    normalize=False returns the raw channel sum instead.
    """
    if gates.data.ndim != 2 or gates.data.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, C) gate batch, got {gates.data.shape}")
    channel_means = T.tmean(gates, axis=0)
    total = T.tsum(channel_means)
    if normalize:
        total = T.mul(total, np.asarray(1.0 / gates.data.shape[1], dtype=gates.dtype))
    return total
