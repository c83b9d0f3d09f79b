"""SGD with momentum and coupled weight decay."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from caudr.tensor import Parameter


def sgd_step(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    momentum: float = 0.0,
    _scratch: np.ndarray | None = None,
) -> None:
    """One in-place update: v <- momentum*v + (g + wd*w); w <- w - lr*v."""
    scratch = _scratch if _scratch is not None else np.empty_like(param)
    scratch = scratch[: param.size].reshape(param.shape) if scratch.ndim == 1 else scratch
    np.multiply(velocity, momentum, out=velocity)
    velocity += grad
    if weight_decay != 0.0:
        np.multiply(param, weight_decay, out=scratch)
        velocity += scratch
    np.multiply(velocity, lr, out=scratch)
    param -= scratch


class SGD:
    """Holds per-parameter velocity state; lr is supplied per step."""

    def __init__(
        self,
        params: Sequence[Parameter],
        weight_decay: float = 0.0,
        momentum: float = 0.0,
    ):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params]
        largest = max((p.data.size for p in self.params), default=1)
        self._scratch = np.empty(largest, dtype=self.params[0].dtype if self.params else np.float32)

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            sgd_step(p.data, p.grad, v, lr, self.weight_decay, self.momentum,
                     _scratch=self._scratch)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
