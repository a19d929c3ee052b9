"""Named random substreams derived from one experiment seed."""
import zlib

import numpy as np


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name`` (e.g. "weights", "shuffle", "synthesis")."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *[int(e) for e in extra]]
    return np.random.default_rng(np.random.SeedSequence(key))
