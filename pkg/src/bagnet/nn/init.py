from __future__ import annotations

import zlib

import numpy as np

from .tensor import Parameter


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (corpus, init, shuffle, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def glorot(rng: np.random.Generator, shape, name: str, fan_in=None, fan_out=None) -> Parameter:
    if fan_in is None or fan_out is None:
        fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Parameter(rng.uniform(-limit, limit, size=shape), name)


def zeros(shape, name: str) -> Parameter:
    return Parameter(np.zeros(shape), name)
