"""Named random sub-streams derived from a single run seed.

Every stochastic component (data synthesis, weight init, latent noise,
batch shuffling) draws from its own stream so that changing one does not
perturb the others.  Stream derivation is stable across runs and
platforms: the stream name is folded in via CRC-32.
"""

import zlib

import numpy as np

STREAM_DATA = "data"
STREAM_INIT = "init"
STREAM_NOISE = "noise"
STREAM_SHUFFLE = "shuffle"


def substream(seed: int, name: str) -> np.random.Generator:
    """Return a generator for the named sub-stream of ``seed``."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([seed & 0xFFFFFFFFFFFF, tag])


def stream_seed(seed: int, name: str) -> int:
    """Deterministic integer seed for the named sub-stream."""
    return int(substream(seed, name).integers(0, 2**63 - 1))
