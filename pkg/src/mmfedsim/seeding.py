"""Deterministic seed derivation.

One master seed drives the whole experiment. Every consumer (dataset
generation, model init, probe generation, per-round / per-client training)
gets its own stream derived with :func:`derive_seed`, so no two components
ever share an RNG stream and any component can be re-run in isolation.

The splitting rule: string labels are hashed with crc32, integers are used
as-is, and the resulting list ``[master, part0, part1, ...]`` feeds a
``numpy.random.SeedSequence``. The first generated 64-bit word is the
derived seed.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _as_entropy(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & _MASK64


def seed_sequence(*parts: int | str) -> np.random.SeedSequence:
    """SeedSequence for the stream identified by ``parts``."""
    if not parts:
        raise ValueError("at least one seed part is required")
    return np.random.SeedSequence([_as_entropy(p) for p in parts])


def derive_seed(*parts: int | str) -> int:
    """Derive a 64-bit integer seed from a master seed plus a label path."""
    return int(seed_sequence(*parts).generate_state(1, dtype=np.uint64)[0])


def rng_for(*parts: int | str) -> np.random.Generator:
    """Fresh Generator for the stream identified by ``parts``."""
    return np.random.default_rng(seed_sequence(*parts))
