"""Deterministic random streams keyed by (base seed, trial, subsystem)."""

from __future__ import annotations

import zlib

import numpy as np

SUBSYSTEMS = ("truth", "filter", "planner", "oracle", "pilot")


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def stream(base_seed: int, trial_index: int, tag: str) -> np.random.Generator:
    """Independent generator for one subsystem of one trial.

    Changing ``trial_index`` or ``tag`` yields a disjoint stream; the same
    triple always reproduces the same draws.
    """
    if base_seed < 0 or trial_index < 0:
        raise ValueError("seeds and trial indices must be nonnegative")
    seq = np.random.SeedSequence(entropy=int(base_seed) & (2**64 - 1),
                                 spawn_key=(int(trial_index), _tag_key(tag)))
    return np.random.Generator(np.random.PCG64(seq))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Child generators for ``n`` workers, derived from ``rng`` deterministically."""
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]
