import zlib

import numpy as np


def purpose_key(purpose: str) -> int:
    """Stable integer key for a named random stream."""
    return zlib.crc32(purpose.encode("utf-8"))


def rng_for(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """
    Return an independent generator for (seed, purpose, indices).

    Streams are split with numpy's SeedSequence spawn keys, so the generator for
    e.g. ("channels", region, user, sample) does not depend on how many other
    streams were created before it or on which worker creates it.
    """
    spawn_key = (purpose_key(purpose), *(int(i) for i in indices))
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(seq))
