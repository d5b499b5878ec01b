from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError, Parameter


@dataclass
class AdaGrad:
    """AdaGrad: accumulate squared gradients, step by ``lr / sqrt(accum + eps)``."""

    params: list[Parameter]
    lr: float = 0.1
    eps: float = 1e-8
    step_count: int = 0
    accum: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        for p in self.params:
            self.accum.setdefault(p.name, np.zeros_like(p.data))

    def step(self) -> None:
        for p in self.params:
            if not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient in parameter {p.name!r}")
        for p in self.params:
            acc = self.accum[p.name]
            acc += p.grad * p.grad
            p.data -= self.lr * p.grad / np.sqrt(acc + self.eps)
            p.zero_grad()
        self.step_count += 1

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params: list[Parameter], state: AdaGrad) -> list[Parameter]:
    state.step()
    return params
