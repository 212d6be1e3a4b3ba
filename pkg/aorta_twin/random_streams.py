"""Counter-keyed Gaussian draws.

Every random value is addressed by (seed, stream, step, beta, member, entry):
one generator is derived per (seed, stream, step, beta) and a draw of shape
(members, entries) is filled row-major, so member i / entry j always receives
the same value no matter how the work is later split across workers.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Independent random streams."""
    PRIOR = 0
    PROCESS = 1
    MEASUREMENT = 2
    OBSERVATION = 3
    SENSORS = 4


def keyed_generator(seed: int, stream: Stream, step: int = 0, beta: int = 0) -> np.random.Generator:
    """Generator for one (seed, stream, step, beta) key."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(step), int(beta)]))


def keyed_normal(
    seed: int,
    stream: Stream,
    shape: tuple[int, ...],
    variance: float = 1.0,
    step: int = 0,
    beta: int = 0,
) -> np.ndarray:
    """Zero-mean Gaussian draws with the given variance, keyed as described above."""
    if variance == 0:
        return np.zeros(shape)
    draws = keyed_generator(seed, stream, step, beta).standard_normal(shape)
    return np.sqrt(variance) * draws
