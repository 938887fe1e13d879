"""Block structure shared by every product-of-simplices vector.

A lower-level decision ``h`` is stored as one flat float array; a
:class:`BlockLayout` records how it splits into per-population blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class BlockLayout:
    sizes: tuple[int, ...]
    offsets: np.ndarray = field(init=False, repr=False, compare=False)
    block_index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        sizes = tuple(int(s) for s in self.sizes)
        if not sizes or min(sizes) < 1:
            raise ValueError("every block needs at least one coordinate")
        object.__setattr__(self, "sizes", sizes)
        offsets = np.concatenate(([0], np.cumsum(sizes)))
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(
            self, "block_index", np.repeat(np.arange(len(sizes)), sizes)
        )

    @property
    def n_blocks(self) -> int:
        return len(self.sizes)

    @property
    def dim(self) -> int:
        return int(self.offsets[-1])

    @property
    def max_size(self) -> int:
        return max(self.sizes)

    def slices(self):
        for i in range(self.n_blocks):
            yield slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def split(self, v: np.ndarray) -> list[np.ndarray]:
        return [v[s] for s in self.slices()]

    def block_sum(self, v: np.ndarray) -> np.ndarray:
        """Per-block sums; works on vectors and on matrices (along axis 0)."""
        return np.add.reduceat(v, self.offsets[:-1], axis=0)

    def block_max(self, v: np.ndarray) -> np.ndarray:
        return np.maximum.reduceat(v, self.offsets[:-1], axis=0)

    def expand(self, per_block: np.ndarray) -> np.ndarray:
        """Broadcast one value per block back onto the flat coordinates."""
        return per_block[self.block_index]

    def uniform(self) -> np.ndarray:
        return 1.0 / np.asarray(self.sizes, dtype=float)[self.block_index]

    def check(self, h: np.ndarray, *, strict: bool = False, atol: float = 1e-9) -> np.ndarray:
        """Validate ``h`` as a point of the product of simplices and return it as float."""
        h = np.asarray(h, dtype=float)
        if h.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {h.shape}")
        if strict and np.any(h <= 0.0):
            raise ValueError("every entry must be strictly positive")
        if np.any(h < 0.0):
            raise ValueError("entries must be nonnegative")
        if np.max(np.abs(self.block_sum(h) - 1.0)) > atol:
            raise ValueError("every block must sum to one")
        return h

    def random_interior(self, rng: np.random.Generator, concentration: float = 1.0) -> np.ndarray:
        """Draw each block from a symmetric Dirichlet distribution."""
        h = np.concatenate([rng.dirichlet(np.full(s, concentration)) for s in self.sizes])
        h = np.maximum(h, np.finfo(float).tiny)
        return h / self.expand(self.block_sum(h))
