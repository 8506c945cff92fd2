"""Deterministic random streams.

Every stochastic operation in the library draws from a counter-based Philox
generator keyed by a seed derived from a master seed plus string/int labels.
Streams for distinct label paths are independent, so dataset builds and
training runs reproduce bit-for-bit regardless of task ordering or thread
count.
"""

import hashlib

import numpy as np


def derive_seed(seed, *labels):
    """Map (seed, labels...) to a 64-bit sub-seed via SHA-256."""
    text = str(int(seed)) + "".join("/" + str(x) for x in labels)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(seed, *labels):
    """Philox generator for the derived sub-seed."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *labels)))
