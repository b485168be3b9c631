"""Named, reproducible random streams derived from a single run seed."""

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(seed, *names) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *names)``.

    Streams with different names are statistically independent, and the
    same names always give the same stream, regardless of call order.
    A ``Generator`` passed as ``seed`` is returned unchanged.
    """
    if isinstance(seed, np.random.Generator):
        return seed
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return np.random.default_rng(ss)
