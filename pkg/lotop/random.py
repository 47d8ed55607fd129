"""Seeded random streams.

All randomness in lotop (phantom textures, noise, outliers, the randomized SVD
backend) is drawn from explicit streams, never from global random states, so that
identical seeds produce identical outputs in any process and thread.

The stream algorithm is fixed: the bit generator is PCG64 (64-bit output,
128-bit state, multiplier ``0x2360ED051FC65DA44385DF649FCCF645``, increment derived
from the seed) initialized by `numpy.random.SeedSequence` from the entropy tuple
``(seed, *keys)``. Normal variates come from NumPy's ziggurat sampler
(`numpy.random.Generator.standard_normal`).
"""

from typing import Sequence

import numpy as np
import torch


def _check_seed(seed: int) -> None:
    if not 0 <= seed < 2**63:
        raise ValueError(
            f'seed must be a non-negative 63-bit integer (the provided value: {seed}).'
        )


def generator(seed: int, *keys: int) -> np.random.Generator:
    """Create an independent PCG64 stream for ``(seed, *keys)``.

    Keys distinguish the streams that a single seed drives (e.g. the frame index for
    per-frame noise), so that adding a new consumer never shifts existing streams.

    Args:
        seed: the user seed. Must be a non-negative 63-bit integer.
        keys: additional non-negative integers identifying the consumer.
    Returns:
        generator

    Examples:
        .. testcode::

            a = lotop.random.generator(7, 0).standard_normal(3)
            b = lotop.random.generator(7, 0).standard_normal(3)
            c = lotop.random.generator(7, 1).standard_normal(3)
            assert (a == b).all() and not (a == c).all()
    """
    _check_seed(seed)
    for key in keys:
        _check_seed(key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, *keys))))


def standard_normal(shape: Sequence[int], seed: int, *keys: int) -> torch.Tensor:
    """Draw a float64 tensor of unit-variance normal variates from a seeded stream."""
    values = generator(seed, *keys).standard_normal(tuple(shape))
    return torch.from_numpy(values)


def uniform(shape: Sequence[int], seed: int, *keys: int) -> torch.Tensor:
    """Draw a float64 tensor of variates uniform on [0, 1) from a seeded stream."""
    values = generator(seed, *keys).random(tuple(shape))
    return torch.from_numpy(values)


def torch_generator(seed: int, *keys: int) -> torch.Generator:
    """Create a private `torch.Generator` seeded from ``(seed, *keys)``.

    The torch seed is the first 63 bits of the corresponding PCG64 stream.
    """
    gen = torch.Generator()
    gen.manual_seed(int(generator(seed, *keys).integers(0, 2**63 - 1)))
    return gen
