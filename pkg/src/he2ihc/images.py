"""Core image containers and PNG I/O.

Tiles are RGB arrays in [0, 1] (8-bit PNGs divided by 255). All geometry in
this package assumes (height, width) pixel order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError


class StainDomain(enum.Enum):
    HE = "HE"
    IHC = "IHC"


@dataclass
class ImageTile:
    """One RGB tile with its stain-domain tag.

    pixels: float array of shape (height, width, 3), values in [0, 1].
    Height and width must be >= 8 and divisible by 4 so the tile can pass
    through the two-level encoder without padding.
    """

    pixels: np.ndarray
    domain: StainDomain
    source_id: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(
                f"tile '{self.source_id}': expected (H, W, 3) pixels, got {self.pixels.shape}"
            )
        h, w = self.pixels.shape[:2]
        if h < 8 or w < 8 or h % 4 or w % 4:
            raise DataError(
                f"tile '{self.source_id}': size {h}x{w} must be >= 8 and divisible by 4"
            )
        if not np.isfinite(self.pixels).all():
            raise DataError(f"tile '{self.source_id}': non-finite pixel values")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError(f"tile '{self.source_id}': pixel values outside [0, 1]")

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def with_pixels(self, pixels: np.ndarray, source_id: str | None = None) -> "ImageTile":
        return ImageTile(pixels, self.domain, self.source_id if source_id is None else source_id)


@dataclass
class FeatureMap:
    """Real-valued (channels, height, width) activation with its scale.

    ``scale`` is the downsampling power relative to the network input
    (0 = full resolution, 1 = half, 2 = quarter, ...).
    """

    data: np.ndarray
    scale: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DataError(f"feature map must be (C, H, W), got shape {self.data.shape}")
        if self.data.shape[1] < 1 or self.data.shape[2] < 1:
            raise DataError(f"feature map has empty spatial extent: {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise DataError("feature map contains non-finite values")

    @property
    def channels(self) -> int:
        return self.data.shape[0]


def load_tile(path: str | Path, domain: StainDomain, source_id: str = "") -> ImageTile:
    """Read an 8-bit RGB PNG as an ImageTile, mapping values to [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"unreadable image {path}: {exc}") from exc
    return ImageTile(arr, domain, source_id or path.stem)


def save_tile(tile: ImageTile, path: str | Path) -> None:
    """Write a tile as an 8-bit RGB PNG (lossless, deterministic bytes)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.rint(tile.pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def tile_to_tensor(tile, dtype=None):
    """ImageTile / (H, W, 3) array / (C, H, W) tensor -> (1, 3, H, W) torch tensor."""
    import torch

    if isinstance(tile, ImageTile):
        arr = tile.pixels
    elif isinstance(tile, np.ndarray):
        arr = tile
    else:  # already a tensor
        t = tile
        if t.ndim == 3:
            t = t.unsqueeze(0)
        return t if dtype is None else t.to(dtype)
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
    return t.to(dtype) if dtype is not None else t


def tensor_to_pixels(t) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor -> (H, W, 3) float64 array."""
    arr = t.detach().cpu().double().numpy()
    if arr.ndim == 4:
        arr = arr[0]
    return np.ascontiguousarray(arr.transpose(1, 2, 0))
