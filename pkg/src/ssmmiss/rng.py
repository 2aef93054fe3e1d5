"""Deterministic seed derivation.

Every stochastic stage of the study (simulation, masking, imputation chains)
draws from its own stream derived from (master_seed, *stage parts), so results
do not depend on execution order or parallelism degree.
"""
from __future__ import annotations

import zlib

import numpy as np


def _as_word(part) -> int:
    if isinstance(part, (bool, float, np.floating)):
        return zlib.crc32(repr(float(part)).encode())
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode())
    raise TypeError(f"cannot derive a seed word from {part!r}")


def seed_sequence(master_seed: int, *parts) -> np.random.SeedSequence:
    """Mix a master seed with stage-identifying parts into a SeedSequence."""
    return np.random.SeedSequence((int(master_seed),) + tuple(_as_word(p) for p in parts))


def derive_rng(master_seed: int, *parts) -> np.random.Generator:
    """Independent reproducible generator for one stage of the pipeline."""
    return np.random.default_rng(seed_sequence(master_seed, *parts))
