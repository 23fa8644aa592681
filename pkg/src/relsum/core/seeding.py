"""Seed splitting.

Every random stream is derived from the run's root seed with
``numpy.random.SeedSequence(root, spawn_key=(stage, *indices))`` where
``stage`` is the CRC-32 of a stage name. A rollout therefore draws from
``derive_rng(root, "grpo", example_index, rollout_index)`` regardless of how
many other streams were consumed before it.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_seed_sequence", "derive_rng"]


def _stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode("utf-8"))


def derive_seed_sequence(root: int, stage: str, *indices: int) -> np.random.SeedSequence:
    if root < 0 or any(index < 0 for index in indices):
        raise ValueError("seeds and indices must be non-negative")
    return np.random.SeedSequence(root, spawn_key=(_stage_key(stage), *indices))


def derive_rng(root: int, stage: str, *indices: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(root, stage, *indices))
