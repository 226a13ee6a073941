"""Patch-embedding container shared by the generator and the contrastive losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PatchEmbeddingSet:
    """L2-normalized feature vectors sampled at indexed spatial locations.

    ``locations[layer]`` holds flat row-major indices into that layer's spatial
    grid; ``vectors[layer]`` is the matching (n_locations, dim) torch tensor.
    Two sets are comparable only when they share layers and locations.
    """

    layers: tuple[str, ...]
    locations: dict[str, np.ndarray]
    vectors: dict[str, "object"]  # torch.Tensor per layer
    grid_sizes: dict[str, tuple[int, int]]

    def detached(self) -> "PatchEmbeddingSet":
        return PatchEmbeddingSet(
            self.layers,
            self.locations,
            {k: v.detach() for k, v in self.vectors.items()},
            self.grid_sizes,
        )

    def aligned_with(self, other: "PatchEmbeddingSet") -> bool:
        if self.layers != other.layers:
            return False
        return all(np.array_equal(self.locations[l], other.locations[l]) for l in self.layers)


def require_aligned(a: PatchEmbeddingSet, b: PatchEmbeddingSet) -> None:
    if a.layers != b.layers:
        raise ValueError(f"embedding sets use different layers: {a.layers} vs {b.layers}")
    for layer in a.layers:
        if not np.array_equal(a.locations[layer], b.locations[layer]):
            raise ValueError(f"location mismatch between embedding sets at layer '{layer}'")
