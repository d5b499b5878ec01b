from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .nn.optim import AdaGrad
from .nn.tensor import NumericalError, Parameter, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.1
    batch_size: int = 10
    max_epochs: int = 30
    patience: int = 3
    q_max: int = 50
    seed: int = 0


@dataclass
class History:
    losses: list[float] = field(default_factory=list)
    dev_scores: list[float] = field(default_factory=list)
    best_epoch: int = -1


def fit(params: list[Parameter], n_items: int, loss_fn: Callable[[np.ndarray], Tensor],
        cfg: TrainConfig, rng: np.random.Generator,
        dev_fn: Callable[[], float] | None = None) -> History:
    """Minibatch AdaGrad with early stopping on ``dev_fn`` (higher is better).

    Without ``dev_fn`` every epoch counts as an improvement.  The parameters
    of the best epoch are restored at the end.
    """
    opt = AdaGrad(params, lr=cfg.lr)
    hist = History()
    best = -math.inf
    best_state = [p.data.copy() for p in params]
    wait = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n_items)
        total = 0.0
        for start in range(0, n_items, cfg.batch_size):
            loss = loss_fn(order[start:start + cfg.batch_size])
            total += loss.item()
            loss.backward()
            opt.step()
        if not math.isfinite(total):
            raise NumericalError(f"training loss diverged at epoch {epoch}")
        hist.losses.append(total)
        score = dev_fn() if dev_fn is not None else float(epoch)
        hist.dev_scores.append(score)
        log.debug("epoch %d loss %.4f dev %.4f", epoch, total, score)
        if score > best:
            best, wait, hist.best_epoch = score, 0, epoch
            best_state = [p.data.copy() for p in params]
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    for p, v in zip(params, best_state):
        p.data[...] = v
    return hist
