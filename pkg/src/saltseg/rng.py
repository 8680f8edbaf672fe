import zlib

import numpy as np


def name_key(name):
    return zlib.crc32(name.encode("utf-8"))


def make_rng(*keys):
    """Counter-based (Philox) generator keyed by a tuple of ints or strings.

    Streams for distinct key tuples are independent, so parallel or reordered
    consumers stay deterministic.
    """
    ints = [name_key(k) if isinstance(k, str) else int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(ints)))
