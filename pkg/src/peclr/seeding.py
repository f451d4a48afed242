"""Named, counter-addressed random streams derived from one root seed."""
import zlib

import numpy as np

STREAMS = ("dataset", "augment", "init", "shuffle", "probe", "head")


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *counters)``.

    Identical arguments always give the same stream regardless of which
    thread or in which order streams are created.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(stream_key(name),) + tuple(int(c) for c in counters))
    return np.random.Generator(np.random.PCG64(ss))
