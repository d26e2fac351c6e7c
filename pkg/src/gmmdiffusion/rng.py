"""Seeded, splittable random streams.

Every random draw in the package flows from a root seed through labeled
splits: the label string is hashed into a stream id, and the Philox
counter-based generator is keyed by (seed, stream id). Two stages with
different labels never share a stream, and adding a stage never perturbs
the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def label_key(label: str) -> int:
    """Stable 64-bit integer derived from a label string."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_rng(seed: int, *labels: str) -> np.random.Generator:
    """Generator for the stream named by ``labels`` under root ``seed``."""
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    spawn_key = tuple(label_key(lab) for lab in labels)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def as_rng(rng: np.random.Generator | int | None) -> np.random.Generator:
    """Accept a Generator or an integer seed; entropy defaults are refused."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None:
        raise ValueError("an explicit seed or Generator is required")
    return make_rng(int(rng))


def split(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split a generator into ``n`` independent children (one per chunk)."""
    return rng.spawn(n)
