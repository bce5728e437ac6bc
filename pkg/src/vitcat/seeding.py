"""Named random streams derived from one run seed."""
import zlib

import numpy as np


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component ``name`` (e.g. "trace", "init", "batching")."""
    return np.random.default_rng([int(seed) & ((1 << 64) - 1), zlib.crc32(name.encode())])
