"""Paired synthetic stain tiles for desk-scale training and testing.

Both domains of a pair are rendered from one latent tissue texture through
two fixed invertible color transforms plus a monotone gamma, so a translation
mapping between the domains exists by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .images import ImageTile, StainDomain, save_tile

# Rows map the 3-channel latent texture into each stain's palette; offsets
# keep outputs strictly inside (0, 1) so the affine part stays invertible
# without clipping. Eosin-like pink/purple for the source domain, DAB-like
# brown on a light background for the target domain.
HE_MATRIX = np.array(
    [
        [-0.35, 0.10, -0.05],
        [-0.45, -0.25, 0.05],
        [-0.20, 0.05, -0.15],
    ]
)
HE_OFFSET = np.array([0.85, 0.80, 0.90])
HE_GAMMA = 0.9

IHC_MATRIX = np.array(
    [
        [-0.30, -0.10, 0.00],
        [-0.45, 0.00, -0.10],
        [-0.55, 0.10, -0.05],
    ]
)
IHC_OFFSET = np.array([0.90, 0.85, 0.80])
IHC_GAMMA = 1.15

_SPLIT_KEYS = {"train": 1, "test": 2}


@dataclass(frozen=True)
class SyntheticStainSpec:
    """Shape of a synthetic paired-stain dataset."""

    count: int = 8
    size: int = 256
    texture_seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("tile count must be >= 1")
        if self.size < 32 or self.size % 16:
            raise ConfigError("tile size must be >= 32 and divisible by 16")
        for name, mat in (("HE", HE_MATRIX), ("IHC", IHC_MATRIX)):
            if abs(np.linalg.det(mat)) < 1e-6:
                raise ConfigError(f"{name} color transform is not invertible")


def _latent_texture(size: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth 3-channel field in [0, 1]: two blurred-noise octaves per channel."""
    coarse = ndimage.gaussian_filter(
        rng.random((3, size, size)), sigma=(0, size / 12, size / 12), mode="wrap"
    )
    fine = ndimage.gaussian_filter(
        rng.random((3, size, size)), sigma=(0, size / 48, size / 48), mode="wrap"
    )
    tex = 0.65 * coarse + 0.35 * fine
    lo = tex.min(axis=(1, 2), keepdims=True)
    hi = tex.max(axis=(1, 2), keepdims=True)
    return (tex - lo) / np.maximum(hi - lo, 1e-12)


def _render(latent: np.ndarray, matrix: np.ndarray, offset: np.ndarray, gamma: float) -> np.ndarray:
    # latent (3, H, W) -> image (H, W, 3)
    lin = np.einsum("cd,dhw->chw", matrix, latent) + offset[:, None, None]
    return np.clip(lin, 1e-6, 1.0) ** gamma


def render_pair(spec: SyntheticStainSpec, split: str, index: int) -> tuple[ImageTile, ImageTile]:
    """Deterministic paired tiles for (spec.texture_seed, split, index)."""
    if split not in _SPLIT_KEYS:
        raise ConfigError(f"split must be one of {sorted(_SPLIT_KEYS)}, got {split!r}")
    ss = np.random.SeedSequence(entropy=spec.texture_seed, spawn_key=(_SPLIT_KEYS[split], index))
    latent = _latent_texture(spec.size, np.random.default_rng(ss))
    name = f"tile_{index:04d}"
    he = ImageTile(_render(latent, HE_MATRIX, HE_OFFSET, HE_GAMMA).transpose(1, 2, 0), StainDomain.HE, name)
    ihc = ImageTile(
        _render(latent, IHC_MATRIX, IHC_OFFSET, IHC_GAMMA).transpose(1, 2, 0), StainDomain.IHC, name
    )
    return he, ihc


def synthesize_dataset(
    spec: SyntheticStainSpec, out_root: str | Path, split: str = "train", count: int | None = None
) -> list[str]:
    """Write ``count`` paired PNGs under <root>/<split>A and <root>/<split>B."""
    out_root = Path(out_root)
    n = spec.count if count is None else count
    names = []
    for i in range(n):
        he, ihc = render_pair(spec, split, i)
        name = f"{he.source_id}.png"
        save_tile(he, out_root / f"{split}A" / name)
        save_tile(ihc, out_root / f"{split}B" / name)
        names.append(name)
    return names
