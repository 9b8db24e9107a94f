"""Counter-based random streams.

Every draw is addressed by ``(master_seed, stream, index)``.  The triple is
hashed into a Philox key through :class:`numpy.random.SeedSequence`, so a
stream's values never depend on how many draws other streams made before it.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor

_MASK64 = (1 << 64) - 1


def stream_key(stream: str | int) -> int:
    """Stable 64-bit integer for a stream name (``hash()`` is salted per process)."""
    if isinstance(stream, (int, np.integer)):
        return int(stream) & _MASK64
    digest = hashlib.blake2b(str(stream).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Master seed plus derivation of independent, addressable generators."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & _MASK64

    def generator(self, stream: str | int, index: int = 0) -> np.random.Generator:
        seq = np.random.SeedSequence(self.master_seed, spawn_key=(stream_key(stream), int(index) & _MASK64))
        return np.random.Generator(np.random.Philox(seq))

    def child(self, stream: str | int, index: int = 0) -> "Rng":
        """A new master seed derived from this one (for handing to a sub-stage)."""
        gen = self.generator(stream, index)
        return Rng(int(gen.integers(0, 2**63 - 1)))

    def __repr__(self) -> str:
        return f"Rng({self.master_seed})"


def gaussian(rng: Rng, stream: str | int, shape, index: int = 0, dtype=np.float32) -> Tensor:
    """I.i.d. standard normal tensor for draw ``index`` of ``stream``."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape:
        raise ValueError("gaussian: shape must be non-empty")
    return Tensor(rng.generator(stream, index).standard_normal(shape, dtype=dtype))
