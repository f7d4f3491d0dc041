"""Counter-based seeded streams.

Every random draw in the package comes from a :class:`Stream` addressed by a
path of integer keys below a master seed, e.g. ``(stage, group, identity)``.
Two draws with the same path are bitwise identical regardless of the order
or thread in which they are made, which is what makes parallel sampling
schedule-independent.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

U64 = (1 << 64) - 1


def key_to_int(key: int | str) -> int:
    """Stable 64-bit integer for a stream key (strings are hashed, not ``hash()``-ed)."""
    if isinstance(key, (bool, np.bool_)):
        return int(key)
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"stream keys must be nonnegative, got {key}")
        return int(key) & U64
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


@dataclass(frozen=True)
class Stream:
    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) <= U64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def child(self, *keys: int | str) -> Stream:
        return Stream(self.seed, self.path + tuple(key_to_int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    def uniform(self, size) -> np.ndarray:
        return self.generator().random(size)

    def normals(self, size) -> np.ndarray:
        return box_muller(self.generator(), size)


def box_muller(gen: np.random.Generator, size) -> np.ndarray:
    """Standard normals from uniform draws via the Box-Muller transform."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(shape, dtype=np.int64))
    half = (n + 1) // 2
    u = gen.random(2 * half)
    # 1 - u lies in (0, 1], keeping the log finite
    r = np.sqrt(-2.0 * np.log1p(-u[:half]))
    theta = 2.0 * np.pi * u[half:]
    z = np.empty(2 * half)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    return z[:n].reshape(shape)
