"""Deterministic derivation of independent random number streams.

Every stochastic routine in the package draws from a stream addressed by a
master seed and a path of tags, e.g. ``(master, "particles", rep, agent,
"w")``.  Streams are Philox (counter-based) generators keyed through
``numpy.random.SeedSequence`` spawn keys, so

* two distinct tag paths give statistically independent streams,
* the numbers produced by a given (seed, path) pair never depend on how
  many other streams exist or in which order they are consumed,
* results are reproducible under any thread scheduling.

String tags are hashed with BLAKE2s to a stable 64-bit code; integer tags
are used verbatim (and must be nonnegative).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

__all__ = ["RngKey", "tag_code", "as_key"]


def tag_code(tag: int | str) -> int:
    """Map a tag to a nonnegative integer usable in a spawn key."""
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"integer stream tags must be nonnegative, got {tag}")
        return int(tag)
    if isinstance(tag, str):
        digest = hashlib.blake2s(tag.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little")
    raise TypeError(f"stream tag must be int or str, got {type(tag).__name__}")


@dataclass(frozen=True)
class RngKey:
    """Address of one random stream: a master seed plus a tag path."""

    entropy: int
    path: tuple[int, ...] = ()

    def child(self, *tags: int | str) -> "RngKey":
        """Derive a sub-key by appending tags to the path."""
        return RngKey(self.entropy, self.path + tuple(tag_code(t) for t in tags))

    def generator(self) -> np.random.Generator:
        """Instantiate the Philox generator for this key, counter at zero."""
        seq = np.random.SeedSequence(entropy=self.entropy, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(seq))

    def describe(self) -> str:
        return f"philox(entropy={self.entropy}, spawn_key={self.path})"


def as_key(seed: "int | RngKey") -> RngKey:
    """Accept either a bare master seed or an already-derived key."""
    if isinstance(seed, RngKey):
        return seed
    return RngKey(int(seed))
