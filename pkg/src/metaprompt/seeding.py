"""Deterministic RNG derivation.

Every random decision in the package draws from a generator derived from an
integer path, e.g. ``child_rng(seed, 3, task_index)``. Identical paths give
identical streams, and sibling paths are statistically independent, so any
stage can be recomputed in isolation without replaying the others.
"""

from __future__ import annotations

import zlib
from typing import Iterable

import numpy as np

SeedPath = int | str | Iterable["SeedPath"]


def _flatten(path: SeedPath) -> tuple[int, ...]:
    if isinstance(path, (int, np.integer)):
        return (int(path),)
    if isinstance(path, str):
        # stable across processes, unlike hash()
        return (zlib.crc32(path.encode("utf-8")),)
    out: list[int] = []
    for part in path:
        out.extend(_flatten(part))
    return tuple(out)


def child_seed(*path: SeedPath) -> tuple[int, ...]:
    """Flatten a seed path into the entropy tuple fed to ``default_rng``."""
    return _flatten(path)


def child_rng(*path: SeedPath) -> np.random.Generator:
    """Generator for the given seed path; same path, same stream."""
    return np.random.default_rng(child_seed(*path))
