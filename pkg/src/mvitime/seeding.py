"""Named random sub-streams derived from one root seed."""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for ``(seed, name, *keys)``, independent of call order."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream_key(name), *map(int, keys)]))


def subseed(seed: int, name: str, *keys: int) -> int:
    return int(substream(seed, name, *keys).integers(0, 2**62))
