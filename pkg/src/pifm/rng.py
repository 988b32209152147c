"""Seeded random streams.

Every stochastic component draws from its own stream, keyed by ``(seed, stream)``.
Streams are backed by numpy's Philox4x64 counter-based generator, so a given
key yields the same sequence of raw draws on every platform.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def _stream_code(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: str = "data"

    def child(self, label: str) -> "RngStream":
        return RngStream(self.seed, f"{self.stream}/{label}")

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.seed) & _MASK64, spawn_key=(_stream_code(self.stream),)
        )
        return np.random.Generator(np.random.Philox(seq))


def as_generator(rng: RngStream | np.random.Generator | int | None, stream: str = "data") -> np.random.Generator:
    """Coerce the accepted rng spellings into a generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if rng is None:
        rng = 0
    return RngStream(int(rng), stream).generator()
