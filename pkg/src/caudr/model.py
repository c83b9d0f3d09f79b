"""Task model and training objective.

A 1x1 fuse convolution mixes the 192 spectral channels down to 64, a
three-stage residual backbone (64 -> 64 -> 128 -> 256, stride 2 between
stages, two 3x3 convolutions per stage) extracts features, and a linear
head grades into 5 classes. The channel gate is attached and co-trained.

The objective is cross-entropy plus a weighted gate regularizer plus a
fuse-utilization hinge that keeps the first layer from silently dropping
channels the interventions need.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from caudr import tensor as T
from caudr.gate import GateModule, gate_loss
from caudr.spectrum import N_CHANNELS

N_CLASSES = 5
FUSE_WIDTH = 64
STAGE_WIDTHS = (64, 128, 256)
FUSE_EPS = 1e-12


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


class Conv2d:
    def __init__(self, rng, name, in_ch, out_ch, kernel, stride=1, padding=0, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        fan_in = in_ch * kernel * kernel
        self.weight = T.Parameter(
            _he(rng, (out_ch, in_ch, kernel, kernel), fan_in), f"{name}.weight", dtype=dtype
        )

    def forward(self, x: T.Tensor, data_format: str = "nchw") -> T.Tensor:
        return T.conv2d(x, self.weight, stride=self.stride, padding=self.padding,
                        data_format=data_format)

    def parameters(self):
        return [self.weight]


class BatchStatNorm:
    """Batch statistics during training, running averages at evaluation."""

    def __init__(self, name, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = T.Parameter(np.ones(channels), f"{name}.gamma", dtype=dtype)
        self.beta = T.Parameter(np.zeros(channels), f"{name}.beta", dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.name = name
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: T.Tensor, training: bool, data_format: str = "nchw") -> T.Tensor:
        return T.batch_stat_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
            data_format=data_format,
        )

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {
            f"{self.name}.running_mean": self.running_mean,
            f"{self.name}.running_var": self.running_var,
        }


class Linear:
    def __init__(self, rng, name, in_features, out_features, dtype=np.float32):
        self.weight = T.Parameter(
            _he(rng, (out_features, in_features), in_features), f"{name}.weight", dtype=dtype
        )
        self.bias = T.Parameter(np.zeros(out_features), f"{name}.bias", dtype=dtype)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self):
        return [self.weight, self.bias]


class ResidualStage:
    """conv-norm-relu-conv-norm plus (projected) skip, relu after the add."""

    def __init__(self, rng, name, in_ch, out_ch, stride, dtype=np.float32):
        self.conv1 = Conv2d(rng, f"{name}.conv1", in_ch, out_ch, 3, stride, 1, dtype)
        self.bn1 = BatchStatNorm(f"{name}.bn1", out_ch, dtype)
        self.conv2 = Conv2d(rng, f"{name}.conv2", out_ch, out_ch, 3, 1, 1, dtype)
        self.bn2 = BatchStatNorm(f"{name}.bn2", out_ch, dtype)
        self.proj = None
        self.proj_bn = None
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(rng, f"{name}.proj", in_ch, out_ch, 1, stride, 0, dtype)
            self.proj_bn = BatchStatNorm(f"{name}.proj_bn", out_ch, dtype)

    def forward(self, x: T.Tensor, training: bool, data_format: str = "nchw") -> T.Tensor:
        out = T.relu(self.bn1.forward(self.conv1.forward(x, data_format), training, data_format))
        out = self.bn2.forward(self.conv2.forward(out, data_format), training, data_format)
        skip = x
        if self.proj is not None:
            skip = self.proj_bn.forward(self.proj.forward(x, data_format), training, data_format)
        return T.relu(T.add(out, skip))

    def parameters(self):
        params = self.conv1.parameters() + self.bn1.parameters()
        params += self.conv2.parameters() + self.bn2.parameters()
        if self.proj is not None:
            params += self.proj.parameters() + self.proj_bn.parameters()
        return params

    def buffers(self):
        bufs = {}
        bufs.update(self.bn1.buffers())
        bufs.update(self.bn2.buffers())
        if self.proj_bn is not None:
            bufs.update(self.proj_bn.buffers())
        return bufs


class TaskModel:
    """Fuse layer, residual backbone, 5-way head, attached channel gate."""

    def __init__(self, rng: np.random.Generator, dtype=np.float32):
        self.dtype = dtype
        self.fuse = Conv2d(rng, "fuse", N_CHANNELS, FUSE_WIDTH, 1, 1, 0, dtype)
        self.fuse_bn = BatchStatNorm("fuse_bn", FUSE_WIDTH, dtype)
        widths = (FUSE_WIDTH,) + STAGE_WIDTHS
        self.stages = [
            ResidualStage(rng, f"stage{i + 1}", widths[i], widths[i + 1],
                          stride=1 if i == 0 else 2, dtype=dtype)
            for i in range(len(STAGE_WIDTHS))
        ]
        self.head = Linear(rng, "head", STAGE_WIDTHS[-1], N_CLASSES, dtype)
        self.gate = GateModule(rng, channels=N_CHANNELS, dtype=dtype)

    def forward(self, spec: T.Tensor, training: bool,
                data_format: str = "nchw") -> tuple[T.Tensor, T.Tensor]:
        """Spectra (B, 192, h, w) -> (logits (B, 5), penultimate features (B, 256)).

        data_format="nhwc" accepts (B, h, w, 192) and is the layout the
        training loop uses (it keeps every kernel on its fast path).
        """
        ch_axis = 1 if data_format == "nchw" else 3
        if spec.data.shape[ch_axis] != N_CHANNELS:
            raise T.ShapeMismatchError(
                f"task model expects {N_CHANNELS} input channels, got {spec.data.shape[ch_axis]}"
            )
        x = T.relu(self.fuse_bn.forward(self.fuse.forward(spec, data_format), training, data_format))
        for stage in self.stages:
            x = stage.forward(x, training, data_format)
        features = T.global_avg_pool(x, data_format)
        logits = self.head.forward(features)
        return logits, features

    def parameters(self) -> list[T.Parameter]:
        params = self.fuse.parameters() + self.fuse_bn.parameters()
        for stage in self.stages:
            params += stage.parameters()
        params += self.head.parameters() + self.gate.parameters()
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        bufs = {}
        bufs.update(self.fuse_bn.buffers())
        for stage in self.stages:
            bufs.update(stage.buffers())
        return bufs

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {p.name: p.data for p in self.parameters()}
        state.update(self.buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"checkpoint is missing entries: {missing[:4]}...")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {src.shape}, model {arr.shape}"
                )
            arr[...] = src


# -- losses ---------------------------------------------------------------------


@dataclass
class LossBreakdown:
    """Eq-style decomposition of the training objective."""

    l_ce: T.Tensor
    l_gate: T.Tensor
    l_fuse: T.Tensor
    total: T.Tensor
    lam: float

    def values(self) -> dict[str, float]:
        return {
            "l_ce": self.l_ce.item(),
            "l_gate": self.l_gate.item(),
            "l_fuse": self.l_fuse.item(),
            "total": self.total.item(),
        }


def fuse_loss(fuse_weight: T.Tensor, mode: str = "participation") -> T.Tensor:
    """Hinge that activates when under half of the input channels are used.

    participation: per-channel absolute mass a_c, utilization u_c
    proportional to a_c, effective channel fraction f = 1 / (C * sum u^2)
    (a normalized inverse participation ratio in [1/C, 1], scale
    invariant), loss max(0.5 - f, 0).

    mean_abs: the naive reading, max(0.5 - mean|W|, 0).
    """
    w = fuse_weight
    out_ch, in_ch = w.data.shape[0], w.data.shape[1]
    flat = T.reshape(w, (out_ch, in_ch))
    if mode == "mean_abs":
        return T.relu(T.sub(np.asarray(0.5, dtype=w.dtype), T.tmean(T.absolute(flat))))
    if mode != "participation":
        raise ValueError(f"unknown fuse loss mode {mode!r}")
    mass = T.tsum(T.absolute(flat), axis=0)  # (C,)
    total = T.tsum(mass)
    eps = np.asarray(FUSE_EPS, dtype=w.dtype)
    num = T.add(T.square(total), eps)
    den = T.add(T.mul(T.tsum(T.square(mass)), np.asarray(float(in_ch), dtype=w.dtype)),
                np.asarray(FUSE_EPS * in_ch, dtype=w.dtype))
    fraction = T.div(num, den)
    return T.relu(T.sub(np.asarray(0.5, dtype=w.dtype), fraction))


def total_loss(
    logits: T.Tensor,
    labels,
    gates: T.Tensor,
    fuse_weight: T.Tensor,
    lam: float,
    gate_loss_mode: str = "normalized",
    fuse_mode: str = "participation",
    fuse_enabled: bool = True,
) -> LossBreakdown:
    """Cross-entropy + lam * gate regularizer + fuse hinge."""
    l_ce = T.softmax_cross_entropy(logits, labels)
    l_gate = gate_loss(gates, normalize=(gate_loss_mode == "normalized"))
    if fuse_enabled:
        l_fuse = fuse_loss(fuse_weight, mode=fuse_mode)
    else:
        l_fuse = T.Tensor(np.asarray(0.0, dtype=logits.dtype))
    lam_c = np.asarray(lam, dtype=logits.dtype)
    total = T.add(T.add(l_ce, T.mul(l_gate, lam_c)), l_fuse)
    return LossBreakdown(l_ce=l_ce, l_gate=l_gate, l_fuse=l_fuse, total=total, lam=lam)
