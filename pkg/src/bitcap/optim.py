"""Adam with the inverse-sqrt warmup schedule used for stage-1 training."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class LrSchedule:
    """Learning-rate policy: warmup ramp + inverse-sqrt decay, or constant.

    ``noam`` follows factor * width^-0.5 * min(step^-0.5, step * warmup^-1.5),
    rising linearly for ``warmup`` steps and decaying as step^-0.5 after.
    """

    kind: str = "noam"  # "noam" | "constant"
    base_lr: float = 1e-4  # used by "constant"
    factor: float = 1.0  # used by "noam"
    warmup: int = 2000
    model_width: int = 128

    def at(self, step: int) -> float:
        if step < 1:
            raise ValueError("schedule step starts at 1")
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "noam":
            return (
                self.factor
                * self.model_width**-0.5
                * min(step**-0.5, step * self.warmup**-1.5)
            )
        raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass
class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: LrSchedule = field(default_factory=LrSchedule)
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> float:
    """One Adam update over all params that hold a gradient; returns the lr used."""
    state.step += 1
    lr = state.schedule.at(state.step)
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype, copy=False)
    return lr


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
