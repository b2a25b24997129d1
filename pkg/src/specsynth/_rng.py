"""Seeded, splittable random number generation.

Every stochastic component in the package draws from a numpy Generator
backed by the counter-based Philox bit generator, derived from a single
run seed. Child streams are split off with ``spawn`` so that, e.g., each
sampling job gets an independent stream that is still reproducible from
the run seed alone.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "split_rng", "derive_seed"]


def make_rng(seed) -> np.random.Generator:
    """Build the root generator for a run. ``seed`` may be an int or None."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Split ``n`` independent child generators off ``rng``."""
    seeds = rng.bit_generator.seed_seq.spawn(n)
    return [np.random.Generator(np.random.Philox(s)) for s in seeds]


def derive_seed(seed: int, *words) -> int:
    """Derive a sub-seed from a run seed and a tuple of integer context words."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF] + [int(w) & 0xFFFFFFFF for w in words])
    return int(ss.generate_state(1, np.uint32)[0])
