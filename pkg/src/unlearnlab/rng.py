"""Named, splittable random streams on top of numpy's counter-based Philox.

Every stochastic operation in this package takes an explicit stream. Streams
are addressed by a root seed plus a path of names/integers, so two runs with
the same seed and the same stream paths draw bitwise-identical values no
matter what other streams were consumed in between.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["RngStream"]


def _path_words(path: tuple) -> list[int]:
    words = []
    for part in path:
        if isinstance(part, (int, np.integer)):
            token = b"i:" + int(part).to_bytes(16, "little", signed=True)
        elif isinstance(part, str):
            token = b"s:" + part.encode("utf-8")
        else:
            raise TypeError(f"stream path elements must be str or int, got {type(part)!r}")
        digest = hashlib.blake2b(token, digest_size=8).digest()
        words.append(int.from_bytes(digest, "little"))
    return words


class RngStream:
    """One independent random stream, identified by (seed, *path)."""

    def __init__(self, seed: int, *path):
        self.seed = int(seed)
        self.path = tuple(path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, len(self.path)] + _path_words(self.path)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, *path) -> "RngStream":
        """A fresh stream at a sub-path; drawing from it never affects this one."""
        return RngStream(self.seed, *self.path, *path)

    def normal(self, shape, loc: float = 0.0, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=scale, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low=low, high=high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Uniform integers in [low, high] inclusive."""
        return self._gen.integers(low, high, size=shape, endpoint=True)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path!r})"
