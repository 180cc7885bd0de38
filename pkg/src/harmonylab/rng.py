"""Counter-based, splittable random streams.

Every random draw in the package comes from a stream keyed by
``(seed, purpose, index)``. Streams are Philox generators seeded through a
``SeedSequence`` whose spawn key is derived from the purpose string with
BLAKE2b, so the key is stable across processes and platforms (Python's
builtin ``hash`` is salted per process and is never used).
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


def _purpose_word(purpose: str) -> int:
    digest = hashlib.blake2b(purpose.encode("utf-8"), digest_size=4).digest()
    return struct.unpack("<I", digest)[0]


def stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent generator for ``(seed, purpose, index)``."""
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_purpose_word(purpose), index))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(*parts: int | str) -> int:
    """Stable 63-bit seed from an ordered tuple of ints/strings.

    Used for instance sub-seeds: ``derive_seed(run_seed, input_id, instance)``.
    """
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        tag = b"s" if isinstance(p, str) else b"i"
        raw = p.encode("utf-8") if isinstance(p, str) else str(int(p)).encode("ascii")
        h.update(tag + struct.pack("<I", len(raw)) + raw)
    return struct.unpack("<Q", h.digest())[0] >> 1
