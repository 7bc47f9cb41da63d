"""Seed derivation.

Every random stream in a run is derived from the master seed and a tuple of
string/int keys, e.g. ``derive_rng(seed, "overlay", "edges")``.  Keys are
hashed with SHA-256 into a ``SeedSequence`` spawn key, so adding a new stream
never shifts the numbers drawn by an existing one.
"""
import hashlib

import numpy as np


def _key_words(keys):
    words = []
    for key in keys:
        digest = hashlib.sha256(repr(key).encode()).digest()
        words.append(int.from_bytes(digest[:4], "little"))
    return tuple(words)


def derive_seed(seed, *keys):
    """Return a 64-bit integer seed for the stream named by ``keys``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_key_words(keys))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


def derive_rng(seed, *keys):
    """Return an independent ``numpy.random.Generator`` for ``keys``."""
    return np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=_key_words(keys))
    )
