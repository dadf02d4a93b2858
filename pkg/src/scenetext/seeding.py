import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator derived from a run seed and a stream name.

    Streams with different names never share state, so e.g. changing how many
    synthetic images are drawn does not perturb model initialization.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])
