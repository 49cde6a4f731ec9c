"""AdamW optimizer and cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import TrainingInstabilityError


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine decay from ``lr_max`` at step 0 to ``lr_min`` at ``total_steps``.

    An optional linear warmup ramps from 0 to ``lr_max`` first; with the
    default of zero warmup steps the schedule starts exactly at ``lr_max``.
    """

    lr_max: float
    total_steps: int
    lr_min: float = 0.0
    warmup_steps: int = 0

    def __call__(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr_max * (step + 1) / self.warmup_steps
        span = max(self.total_steps - self.warmup_steps, 1)
        frac = min(max(step - self.warmup_steps, 0) / span, 1.0)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Adam with decoupled weight decay.

    Parameters without a populated ``grad`` are still decayed, so a step with
    zero gradients only shrinks the weights by ``lr * weight_decay``.
    """

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
        schedule: CosineSchedule | None = None,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def current_lr(self) -> float:
        return self.schedule(self.step_count) if self.schedule else self.lr

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def check_finite(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                name = p.name or f"param[{i}]"
                raise TrainingInstabilityError(f"non-finite gradient in {name}", param_name=name)

    def step(self) -> None:
        self.check_finite()
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self._m, self._v):
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
