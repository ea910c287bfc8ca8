"""
Seed discipline: one master seed, child streams derived by stable hashing.
"""

import hashlib

import numpy as np

BROWNIAN_BLOCK = 1024


def derive_seed(master, component, index=0):
    digest = hashlib.sha256(f"{int(master)}:{component}:{int(index)}".encode("utf8")).digest()
    return int.from_bytes(digest[:8], "little")


def generator(master, component, index=0):
    """Counter-based (Philox) generator for the stream (master, component, index)."""
    return np.random.Generator(np.random.Philox(derive_seed(master, component, index)))
