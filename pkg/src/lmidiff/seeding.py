"""Split one 64-bit run seed into independent, labelled streams."""

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def derive_seed(seed, label, *extra):
    """Deterministic 63-bit seed for the purpose ``label`` (e.g. ``"train"``)."""
    words = [int(seed) & MASK64, zlib.crc32(label.encode())] + [int(e) for e in extra]
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return (int(state[0]) << 31 | int(state[1]) >> 1) & ((1 << 63) - 1)


def rng_for(seed, label, *extra):
    return np.random.default_rng(derive_seed(seed, label, *extra))
