"""Named deterministic random streams on a 64-bit counter-based generator.

Every stochastic operation takes a stream derived from (seed, *names), so any
piece of work — a corpus sample, a training step, a sampling run — owns an
independent generator and results are bitwise reproducible regardless of
execution order or worker count.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *names) -> np.random.Generator:
    """Philox generator keyed by a hash of the seed and the name parts."""
    tag = ("%d" % seed + "/" + "/".join(str(n) for n in names)).encode("utf-8")
    key = int.from_bytes(hashlib.blake2b(tag, digest_size=16).digest(), "little")
    return np.random.Generator(np.random.Philox(key=key))


def normal(seed: int, shape, *names, scale: float = 1.0) -> np.ndarray:
    return stream(seed, *names).normal(0.0, scale, size=shape)
