"""Named random substreams derived from a single root seed.

Every consumer of randomness asks for a stream by ``(name, *index)``.  The
stream is a Philox (counter-based) generator keyed by the root seed and a
stable hash of the name, so adding or removing one consumer never shifts
the draws seen by another.  This is what keeps world initialisation paired
across methods that consume different amounts of estimator or compressor
randomness.
"""

from __future__ import annotations

import zlib

import numpy as np

RngStream = np.random.Generator

WORLD_INIT = "world-init"
ESTIMATOR = "estimator"
COMPRESSOR = "compressor"
NEIGHBOR_DROPOUT = "neighbor-dropout"
NOISE = "noise"


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *index: int) -> RngStream:
    """Return the generator for substream ``name[index...]`` of ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (_name_key(name),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


def agent_streams(seed: int, name: str, n: int) -> list[RngStream]:
    """One independent stream per agent, ``name[0] .. name[n-1]``."""
    return [stream(seed, name, i) for i in range(n)]
