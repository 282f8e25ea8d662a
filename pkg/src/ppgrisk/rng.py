"""Counter-based, splittable random number generation.

Every stochastic component of the pipeline derives its randomness from a
Philox generator keyed by a hash of ``(master_seed, *stream_parts)``.  The
key, not the call order, determines the stream, so per-subject or
per-iteration work can run in any order (or in parallel) and still produce
bit-identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _stream_key(master_seed: int, parts: tuple) -> np.ndarray:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(int(master_seed)).encode())
    for part in parts:
        h.update(b"/")
        h.update(str(part).encode())
    return np.frombuffer(h.digest(), dtype=np.uint64)


def keyed_rng(master_seed: int, *stream) -> np.random.Generator:
    """Generator for the stream identified by (master_seed, *stream).

    Stream parts may be ints or strings; they are hashed, not concatenated,
    so ("a", 1) and ("a1",) give unrelated streams.
    """
    return np.random.Generator(np.random.Philox(key=_stream_key(master_seed, stream)))


def derive_seed(master_seed: int, *stream) -> int:
    """A 63-bit integer sub-seed for handing to components that take a seed."""
    key = _stream_key(master_seed, stream)
    return int(key[0] >> np.uint64(1))
