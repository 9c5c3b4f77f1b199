"""Seed derivation and counter-based random streams.

Every random draw in the package comes from ``keyed_rng(seed, purpose, *counter)``.
The stream is a Philox generator whose key is derived from (seed, purpose) and
whose counter words hold the caller's coordinates (epoch, image index, repeat),
so a draw depends only on its coordinates and never on evaluation order or on
how work is split across threads.
"""

import hashlib

import numpy as np


def derive_seed(seed, *labels) -> int:
    """64-bit seed from a parent seed and a label path, e.g. ("poisons", "em")."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for label in labels:
        h.update(b"\x00" + str(label).encode())
    return int.from_bytes(h.digest(), "little")


def keyed_rng(seed, purpose, *counter) -> np.random.Generator:
    if len(counter) > 3:
        raise ValueError("at most 3 counter words")
    words = [0] + [int(c) & 0xFFFFFFFFFFFFFFFF for c in counter] + [0] * (3 - len(counter))
    key = derive_seed(seed, purpose)
    return np.random.Generator(np.random.Philox(counter=words, key=key))
