"""Counter-based, splittable random streams.

A stream is keyed by ``(seed, run, step)`` and backed by numpy's Philox
generator, so the draw for a given key never depends on how many other
draws happened before it or on which thread made them.
"""

from __future__ import annotations

import numpy as np

_MASK32 = (1 << 32) - 1
INIT_STEP = _MASK32  # reserved step slot for initial latents


def stream(seed: int, run: int = 0, step: int = 0) -> np.random.Generator:
    if seed < 0 or run < 0 or step < 0:
        raise ValueError("stream keys must be non-negative")
    key = np.array([seed & ((1 << 64) - 1), ((run & _MASK32) << 32) | (step & _MASK32)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def initial_latent(seed: int, shape, run: int = 0) -> np.ndarray:
    return stream(seed, run, INIT_STEP).standard_normal(shape)
