"""Deterministic random-stream derivation.

Episode ``i`` of a run seeded with ``master_seed`` always draws from
``random.Random(mix64(master_seed, i))``, so results are independent of
wall clock, episode ordering, and worker scheduling. ``mix64`` is the
splitmix64 output permutation applied to ``master_seed + GOLDEN*(i+1)``;
the constants below are the published splitmix64 ones.
"""

from __future__ import annotations

import random

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB


def mix64(seed: int, index: int) -> int:
    """Mix a 64-bit master seed with a stream index into a fresh seed."""
    z = (seed + _GOLDEN * (index + 1)) & _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return z ^ (z >> 31)


def episode_rng(master_seed: int, index: int) -> random.Random:
    """Independent per-episode generator for (master_seed, index)."""
    return random.Random(mix64(master_seed, index))
