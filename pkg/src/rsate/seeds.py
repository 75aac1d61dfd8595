"""Named seed derivation.

Every random stream in the package is a child of one master seed, addressed
by an integer path.  ``rng_for(seed, STAGE_BOOT, arm)`` always yields the same
generator regardless of what other streams were consumed before it, which is
what makes sub-results reproducible in isolation and independent of worker
count.

A seed may itself be a path (a tuple of ints); this is how nested work such
as the CSB pipeline inside FRT draw ``b`` inherits ``(master, b)``.
"""

from __future__ import annotations

from typing import Sequence, Union

import numpy as np

SeedLike = Union[int, Sequence[int]]

STAGE_FOLDS = 1
STAGE_BOOT = 2
STAGE_FRT = 3
STAGE_DGP = 4
STAGE_MC = 5
STAGE_REP = 6


def as_path(seed: SeedLike) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    path = tuple(int(s) for s in seed)
    if not path:
        raise ValueError("empty seed path")
    return path


def child(seed: SeedLike, *path: int) -> tuple[int, ...]:
    return as_path(seed) + tuple(int(p) for p in path)


def seed_sequence(seed: SeedLike, *path: int) -> np.random.SeedSequence:
    full = child(seed, *path)
    if any(p < 0 for p in full):
        raise ValueError("seed path entries must be non-negative")
    return np.random.SeedSequence(full[0], spawn_key=full[1:])


def rng_for(seed: SeedLike, *path: int) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *path))
