"""Seeded, splittable random streams.

Every stream is numpy's Philox-4x64 counter-based generator keyed by a
``SeedSequence(seed, spawn_key=path)``.  A stream is fully identified by its
seed and its spawn path, so any component can derive an independent child
stream (``rng.child("sft", epoch)``) without consuming draws from the parent,
and the parent/child outputs are reproducible across runs and threads.
"""

from __future__ import annotations

import zlib
from typing import Any

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


class RngState:
    __slots__ = ("seed", "path", "_gen")

    algorithm = "philox4x64"

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed, spawn_key=self.path)))

    def child(self, *parts) -> "RngState":
        """Derive an independent stream; does not advance this one."""
        return RngState(self.seed, self.path + tuple(_key(p) for p in parts))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=shape)

    def uniform(self, shape=None) -> np.ndarray:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, p: np.ndarray) -> int:
        return int(self._gen.choice(n, p=p))

    # persistence ------------------------------------------------------
    def get_state(self) -> dict[str, Any]:
        st = self._gen.bit_generator.state
        inner = st["state"]
        return {
            "seed": self.seed,
            "path": list(self.path),
            "counter": [int(x) for x in inner["counter"]],
            "key": [int(x) for x in inner["key"]],
            "buffer": [int(x) for x in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, d: dict[str, Any]) -> "RngState":
        r = cls(d["seed"], tuple(d["path"]))
        st = r._gen.bit_generator.state
        st["state"]["counter"] = np.array(d["counter"], dtype=np.uint64)
        st["state"]["key"] = np.array(d["key"], dtype=np.uint64)
        st["buffer"] = np.array(d["buffer"], dtype=np.uint64)
        st["buffer_pos"] = d["buffer_pos"]
        st["has_uint32"] = d["has_uint32"]
        st["uinteger"] = d["uinteger"]
        r._gen.bit_generator.state = st
        return r
