"""Counter-based RNG substreams.

All randomness in a run derives from a single 64-bit seed. A substream is
addressed by (seed, purpose, particle, iteration) and built from a
``numpy.random.SeedSequence`` over those four integers, so any component can
recreate its stream independently of execution order or worker count. Purpose
tags are short strings ("init", "mh-proposal", ...) hashed to a stable 32-bit
integer.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["substream", "tag_id", "per_particle_normals", "per_particle_uniforms"]


def tag_id(purpose: str) -> int:
    """Stable 32-bit id for a purpose tag (CRC32 of the UTF-8 bytes)."""
    return zlib.crc32(purpose.encode("utf-8"))


def substream(
    seed: int, purpose: str, particle: int = 0, iteration: int = 0
) -> np.random.Generator:
    """Generator for the (seed, purpose, particle, iteration) substream.

    Distinct address tuples give independent streams; identical tuples give
    bitwise-identical streams regardless of how many other streams were used
    in between.
    """
    if particle < 0 or iteration < 0:
        raise ValueError("particle and iteration indices must be nonnegative")
    ss = np.random.SeedSequence(
        entropy=int(seed) & (2**64 - 1),
        spawn_key=(tag_id(purpose), int(particle), int(iteration)),
    )
    return np.random.Generator(np.random.PCG64(ss))


def per_particle_normals(rng, n: int, dim: int) -> np.ndarray:
    """(n, dim) standard normals; one substream row each if rng is a list."""
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal((n, dim))
    return np.stack([g.standard_normal(dim) for g in rng])


def per_particle_uniforms(rng, n: int) -> np.ndarray:
    if isinstance(rng, np.random.Generator):
        return rng.uniform(size=n)
    return np.array([g.uniform() for g in rng])
