"""Convolutional feature extractors shared by the typing and relation models."""

from __future__ import annotations

import numpy as np

from .nn import ops
from .nn.init import glorot
from .nn.tensor import Parameter, Tensor


def make_filters(rng, prefix: str, n: int, widths, d: int) -> list[Parameter]:
    return [glorot(rng, (n, w, d), f"{prefix}.H{w}", fan_in=w * d, fan_out=n) for w in widths]


def conv_pool(x: Tensor, filters: list[Parameter], k: int = 1) -> Tensor:
    """relu(narrow conv) then k-max pooling per filter, concatenated over widths.

    ``x`` is (B, s, d); output is (B, k * n * len(filters)).
    """
    feats = []
    for H in filters:
        fm = ops.relu(ops.conv1d(x, H))
        pooled = ops.kmax(fm, k, axis=1)  # (B, k, n)
        feats.append(ops.reshape(pooled, (x.shape[0], -1)))
    return feats[0] if len(feats) == 1 else ops.concat(feats, axis=1)


def lookup(vectors: np.ndarray, ids: np.ndarray) -> Tensor:
    """Frozen embedding lookup: the table never receives gradient."""
    return Tensor(vectors[ids])
