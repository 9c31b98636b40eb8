"""Keyed, counter-based random streams.

Every random draw in the simulator comes from a Philox stream whose key is
derived from the experiment seed plus a tuple of labels, so the same labels
always reproduce the same numbers regardless of call order.
"""
import zlib

import numpy as np


def _words(seed, keys):
    words = [int(seed) & 0xFFFFFFFF, (int(seed) >> 32) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            words.append(zlib.crc32(key.encode("utf-8")))
        else:
            key = int(key)
            if key < 0:
                raise ValueError(f"negative rng key {key}")
            words.extend([key & 0xFFFFFFFF, (key >> 32) & 0xFFFFFFFF])
    return words


def keyed_rng(seed, *keys):
    """Return a fresh generator keyed by ``(seed, *keys)``."""
    if int(seed) < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence(_words(seed, keys))
    return np.random.Generator(np.random.Philox(ss))
