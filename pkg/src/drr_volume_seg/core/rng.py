"""
Counter-based random streams.

All randomness in the package flows from a single user seed. Named sub-streams
are derived deterministically so that parallel Monte-Carlo samples, dataset
items and model initialisation draw from disjoint, reproducible sequences.
"""

import hashlib
from typing import Optional

import numpy as np

_U64 = (1 << 64) - 1


def _mix(counter: int, name: str) -> int:
    """Hash a parent counter and a stream name into a new 64-bit counter."""
    digest = hashlib.blake2b(f"{counter}/{name}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngState:
    """
    A (seed, stream counter) pair backed by a Philox generator.

    Philox is counter-based: the key ``(seed, counter)`` fully determines the
    draw sequence on every platform.

    Examples:
        >>> a = RngState(7).derive("dropout")
        >>> b = RngState(7).derive("dropout")
        >>> bool((a.normal((3,)) == b.normal((3,))).all())
        True
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _U64
        self.counter = int(counter) & _U64
        self._generator: Optional[np.random.Generator] = None

    @property
    def generator(self) -> np.random.Generator:
        """Lazily created generator; advancing it consumes this stream."""
        if self._generator is None:
            key = np.array([self.seed, self.counter], dtype=np.uint64)
            self._generator = np.random.Generator(np.random.Philox(key=key))
        return self._generator

    def derive(self, name: str) -> "RngState":
        """Return an independent named child stream (does not consume this one)."""
        return RngState(self.seed, _mix(self.counter, name))

    def spawn(self, index: int) -> "RngState":
        """Child stream for the ``index``-th parallel worker or sample."""
        return self.derive(f"#{index}")

    def child_seed(self, name: str) -> int:
        """A plain integer seed for a named child (used in manifests)."""
        return _mix(self.counter ^ self.seed, name) & 0x7FFFFFFF

    def uniform(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.random(shape, dtype=dtype)

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.standard_normal(shape, dtype=dtype)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def provenance(self) -> dict:
        return {"seed": self.seed, "counter": self.counter}

    def __repr__(self) -> str:
        return f"RngState(seed={self.seed}, counter={self.counter})"
