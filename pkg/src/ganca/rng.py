"""Named random streams derived from one run seed.

Each consumer asks for ``stream(seed, label, *keys)``; streams with different
labels are statistically independent, so adding a consumer never shifts the
numbers another one sees. Keying by step index makes resumed runs replay
exactly.
"""

import zlib

import numpy as np


def stream(seed: int, label: str, *keys: int) -> np.random.Generator:
    tag = zlib.crc32(label.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, keys)]))
