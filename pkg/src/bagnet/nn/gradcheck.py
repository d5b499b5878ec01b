from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Parameter, Tensor

# below this magnitude both gradients are treated as zero
ABS_FLOOR = 1e-7


def grad_check(forward: Callable[[], Tensor], params: Iterable[Parameter], h: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``forward`` must rebuild the graph from the current parameter values and
    return a scalar loss.  Every entry of every parameter is perturbed.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    forward().backward()
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = forward().item()
            flat[i] = old - h
            down = forward().item()
            flat[i] = old
            num = (up - down) / (2.0 * h)
            denom = max(abs(num), abs(gflat[i]), ABS_FLOOR)
            worst = max(worst, abs(num - gflat[i]) / denom)
    for p in params:
        p.zero_grad()
    return worst
