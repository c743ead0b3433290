"""Deterministic named random streams on top of counter-based Philox keys.

A stream is identified by ``(seed, stream_id, a, b)`` packed into the 128-bit
Philox key, so distinct identifiers yield independent streams and the order in
which streams are created never matters.  This is what makes per-particle
propagation reproducible regardless of how it is scheduled across threads.
"""

from __future__ import annotations

import numpy as np

# stream identifiers; each combines with two 24-bit indices (a, b)
TRUTH = 1
OBSERVATION_NOISE = 2
OBSERVATION_MATRIX = 3
INITIAL_STATE = 4
PRIOR = 5
PARTICLE = 6
RESAMPLE = 7
DERIVE = 8

_MAX_SEED = 1 << 64
_MAX_ID = 1 << 16
_MAX_INDEX = 1 << 24


def stream(seed: int, stream_id: int, a: int = 0, b: int = 0) -> np.random.Generator:
    """Return the generator for stream ``(seed, stream_id, a, b)``.

    ``a`` and ``b`` are free sub-indices (e.g. observation step and particle
    index); both must be below 2**24.
    """
    if not 0 <= seed < _MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if not 0 <= stream_id < _MAX_ID:
        raise ValueError(f"stream id out of range: {stream_id}")
    if not (0 <= a < _MAX_INDEX and 0 <= b < _MAX_INDEX):
        raise ValueError(f"stream sub-indices out of range: ({a}, {b})")
    key = np.array([seed, (stream_id << 48) | (a << 24) | b], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def derive_seed(seed: int, a: int, b: int = 0) -> int:
    """Derive an independent child seed, e.g. one per benchmark repetition."""
    return int(stream(seed, DERIVE, a, b).integers(0, 1 << 63))
