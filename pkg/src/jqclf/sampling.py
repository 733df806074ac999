"""Seeded, reproducible sampling of the state space.

Random streams come from counter-based Philox generators keyed by
``(seed, stream name, block index)``. A block always produces the same
points no matter which worker evaluates it, so results do not depend on
the number of workers.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["Sampler", "rng_for", "unit_directions"]

STRATEGIES = ("uniform-ball", "sphere-stratified", "levelset-shell")


def rng_for(seed: int, stream: str, block: int = 0) -> np.random.Generator:
    """Independent generator for one (seed, stream, block) triple."""
    k0 = ((int(seed) & 0xFFFFFFFF) << 32) | zlib.crc32(stream.encode())
    key = np.array([k0, int(block)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def unit_directions(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    """``count`` directions uniform on the unit sphere of R^n, shape ``(n, count)``."""
    z = rng.standard_normal((n, count))
    norm = np.linalg.norm(z, axis=0)
    norm[norm == 0] = 1.0
    return z / norm


@dataclass
class Sampler:
    """Reproducible sample source on the ball ``|x| <= radius``."""

    seed: int = 0
    radius: float = 10.0
    strategy: str = "uniform-ball"
    count: int = 10_000
    block_size: int = 4096
    workers: int = 1
    exclude_origin: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown sampling strategy {self.strategy!r}")

    def _blocks(self, count: int):
        b = self.block_size
        return [(i, min(b, count - i * b)) for i in range((count + b - 1) // b)]

    def ball(self, n: int, stream: str = "ball", count: int | None = None) -> np.ndarray:
        """Uniform points in the ball, shape ``(n, count)``."""
        count = self.count if count is None else count
        parts = []
        for block, size in self._blocks(count):
            rng = rng_for(self.seed, stream, block)
            d = unit_directions(rng, n, size)
            lo = (self.exclude_origin / self.radius) ** n if self.radius > 0 else 0.0
            r = self.radius * rng.uniform(lo, 1.0, size) ** (1.0 / n)
            parts.append(d * r)
        return np.concatenate(parts, axis=1) if parts else np.zeros((n, 0))

    def sphere_band(self, n: int, r_lo: float, r_hi: float, count: int, stream: str) -> np.ndarray:
        """Points with radius log-uniform in ``[r_lo, r_hi]`` (uniform if ``r_lo == 0``)."""
        rng = rng_for(self.seed, stream, 0)
        d = unit_directions(rng, n, count)
        if r_lo > 0:
            r = np.exp(rng.uniform(np.log(r_lo), np.log(r_hi), count))
        else:
            r = rng.uniform(r_lo, r_hi, count)
        return d * r

    def box(self, lo, hi, count: int, stream: str) -> np.ndarray:
        rng = rng_for(self.seed, stream, 0)
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        return lo[:, None] + (hi - lo)[:, None] * rng.uniform(size=(len(lo), count))

    def map_blocks(self, fn: Callable[[np.ndarray], np.ndarray], points: np.ndarray) -> np.ndarray:
        """Evaluate ``fn`` on column blocks of ``points``; order-preserving."""
        n_pts = points.shape[1]
        chunks = [points[:, i:i + self.block_size] for i in range(0, n_pts, self.block_size)]
        if self.workers <= 1 or len(chunks) <= 1:
            results = [fn(c) for c in chunks]
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(fn, chunks))
        if not results:
            return np.zeros((0,))
        return np.concatenate([np.atleast_1d(r) for r in results], axis=-1)

    def describe(self) -> dict:
        return {
            "seed": self.seed,
            "radius": self.radius,
            "strategy": self.strategy,
            "count": self.count,
            "block_size": self.block_size,
        }
