import zlib

import numpy as np


def substream(seed: int, name: str) -> int:
    """Derive an independent 32-bit seed for a named consumer of ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1)[0])


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Sample a batch without replacement as a pure function of (seed, step)."""
    rng = np.random.default_rng([seed, step])
    return np.sort(rng.choice(n, size=min(batch_size, n), replace=False))
