import zlib

import numpy as np


def random_stream(seed: int, name: str) -> np.random.Generator:
    """
    Return an independent generator for the named stream of a seed.

    Streams with different names never share state, so drawing more numbers
    from one (say "init") leaves every other stream ("data", "batches")
    untouched.
    """
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])
