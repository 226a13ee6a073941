"""Paired-tile ingestion and the multi-magnification sampling strategy.

A dataset lives under ``<root>/<split>A/*.png`` (H&E) and ``<root>/<split>B/*.png``
(IHC), paired by identical filename. Training samples are drawn from one of
four magnification branches and normalized to a single unified size.
"""

from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
import torch
from PIL import Image

from .errors import DataError
from .images import ImageTile, StainDomain, load_tile
from .losses import blur_downsample, gaussian_kernel

SPLITS = ("train", "test")

# Blur used before macro subsampling; same taps as the pyramid loss default.
MACRO_KERNEL_SIZE = 5
MACRO_KERNEL_SIGMA = 1.0


class MagnificationBranch(enum.Enum):
    MACRO_DOWNSAMPLE = "macro_downsample"
    NATIVE_CROP = "native_crop"
    ZOOM_2X = "zoom_2x"
    ZOOM_4X = "zoom_4x"


BRANCH_ORDER = (
    MagnificationBranch.MACRO_DOWNSAMPLE,
    MagnificationBranch.NATIVE_CROP,
    MagnificationBranch.ZOOM_2X,
    MagnificationBranch.ZOOM_4X,
)


class ManifestEntry(NamedTuple):
    he: str
    ihc: str
    id: str


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of paired tile paths for one split."""

    entries: tuple[ManifestEntry, ...]
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate source ids in manifest: {dupes[:5]}")

    def __len__(self) -> int:
        return len(self.entries)

    def to_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = [
            json.dumps({"he": e.he, "ihc": e.ihc, "id": e.id}, sort_keys=True)
            for e in self.entries
        ]
        path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def from_jsonl(cls, path: str | Path, split: str) -> "DatasetManifest":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entries.append(ManifestEntry(rec["he"], rec["ihc"], rec["id"]))
        return cls(tuple(entries), split)


def load_pairs(root_dir: str | Path, split: str) -> DatasetManifest:
    """Pair ``<split>A`` and ``<split>B`` PNGs by filename, lexicographically ordered.

    Any tile present in one domain but not the other aborts with the orphan
    named; unreadable files abort with their path.
    """
    root = Path(root_dir)
    if split not in SPLITS:
        raise DataError(f"split must be one of {SPLITS}, got {split!r}")
    dir_a = root / f"{split}A"
    dir_b = root / f"{split}B"
    for d in (dir_a, dir_b):
        if not d.is_dir():
            raise DataError(f"missing dataset directory {d}")
    names_a = {p.name for p in dir_a.glob("*.png")}
    names_b = {p.name for p in dir_b.glob("*.png")}
    orphans = sorted(names_a.symmetric_difference(names_b))
    if orphans:
        raise DataError(f"unpaired tile {orphans[0]} (and {len(orphans) - 1} more)")
    entries = []
    for name in sorted(names_a):
        pa, pb = dir_a / name, dir_b / name
        for p in (pa, pb):
            try:
                with Image.open(p) as img:
                    img.size  # header parse only; catches truncated/corrupt files
            except OSError as exc:
                raise DataError(f"unreadable image {p}: {exc}") from exc
        entries.append(ManifestEntry(str(pa), str(pb), Path(name).stem))
    return DatasetManifest(tuple(entries), split)


# ---------------------------------------------------------------------------
# Super-resolution interface with a deterministic bicubic fallback.


class SuperResolver:
    """Upscaling backend used by size normalization. Implementations register
    under a name; the deterministic bicubic fallback keeps runs offline."""

    name = "abstract"

    def upscale(self, pixels: np.ndarray, target: int) -> np.ndarray:
        raise NotImplementedError


class BicubicResolver(SuperResolver):
    """Bicubic interpolation with half-pixel centers (Keys kernel, a=-0.75)."""

    name = "bicubic"

    def upscale(self, pixels: np.ndarray, target: int) -> np.ndarray:
        t = torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
        out = torch.nn.functional.interpolate(
            t.double(), size=(target, target), mode="bicubic", align_corners=False
        )
        return out[0].numpy().transpose(1, 2, 0)


_RESOLVERS: dict[str, type[SuperResolver]] = {}


def register_resolver(cls: type[SuperResolver]) -> type[SuperResolver]:
    _RESOLVERS[cls.name] = cls
    return cls


register_resolver(BicubicResolver)


def get_resolver(name: str = "bicubic") -> SuperResolver:
    if name not in _RESOLVERS:
        raise DataError(f"no super-resolver registered under {name!r}")
    return _RESOLVERS[name]()


def size_normalize(tile: ImageTile, target: int, sr: SuperResolver | None = None) -> ImageTile:
    """Resize a tile to ``target`` x ``target`` through the active resolver.

    A tile that already has the target size is returned unchanged. Resolver
    output is clamped to [0, 1] regardless of backend.
    """
    if target < 8 or target % 4:
        raise DataError(f"target size {target} must be >= 8 and divisible by 4")
    if tile.size == (target, target):
        return tile
    sr = sr or BicubicResolver()
    try:
        out = sr.upscale(tile.pixels, target)
    except Exception as exc:
        raise DataError(f"super-resolver '{sr.name}' failed: {exc}") from exc
    out = np.clip(np.asarray(out, dtype=np.float64), 0.0, 1.0)
    if out.shape != (target, target, 3):
        raise DataError(
            f"super-resolver '{sr.name}' returned shape {out.shape}, expected {(target, target, 3)}"
        )
    return tile.with_pixels(out)


# ---------------------------------------------------------------------------
# Branch transforms.


def downsample_macro(tile: ImageTile, factor: int) -> ImageTile:
    """Low-pass and subsample a tile, keeping macroscopic structure.

    Gaussian blur (shared pyramid kernel) followed by stride-``factor``
    subsampling; the output stays in [0, 1].
    """
    if factor not in (2, 4):
        raise DataError(f"macro downsample factor must be 2 or 4, got {factor}")
    h, w = tile.size
    if h % factor or w % factor:
        raise DataError(f"tile size {h}x{w} not divisible by factor {factor}")
    kernel = gaussian_kernel(MACRO_KERNEL_SIZE, MACRO_KERNEL_SIGMA)
    t = torch.from_numpy(np.ascontiguousarray(tile.pixels.transpose(2, 0, 1)))[None]
    out = blur_downsample(t.double(), kernel, factor)[0].numpy().transpose(1, 2, 0)
    return tile.with_pixels(np.clip(out, 0.0, 1.0))


@dataclass(frozen=True)
class MagnificationSample:
    """One unified-size training pair with its branch provenance."""

    he: ImageTile
    ihc: ImageTile
    branch: MagnificationBranch
    crop_origin: tuple[int, int]
    unified_size: int

    def __post_init__(self):
        expected = (self.unified_size, self.unified_size)
        if self.he.size != expected or self.ihc.size != expected:
            raise DataError(
                f"sample tiles must both be {expected}, got he={self.he.size} ihc={self.ihc.size}"
            )
        if self.he.domain != StainDomain.HE or self.ihc.domain != StainDomain.IHC:
            raise DataError("sample domains must be (HE, IHC)")


def _crop(tile: ImageTile, origin: tuple[int, int], size: int) -> ImageTile:
    r, c = origin
    h, w = tile.size
    if r < 0 or c < 0 or r + size > h or c + size > w:
        raise DataError(f"crop window {size} at {origin} exceeds tile {h}x{w}")
    return tile.with_pixels(np.ascontiguousarray(tile.pixels[r : r + size, c : c + size]))


def paired_crop_zoom(
    he: ImageTile,
    ihc: ImageTile,
    zoom: int,
    rng_seed: int,
    unified_size: int = 512,
    sr: SuperResolver | None = None,
) -> MagnificationSample:
    """Crop the same random window from both tiles and enlarge it ``zoom`` times.

    The window has side ``unified_size // zoom`` so the enlarged crop lands
    exactly on the unified size. Deterministic for a fixed ``rng_seed``.
    """
    if zoom not in (2, 4):
        raise DataError(f"zoom must be 2 or 4, got {zoom}")
    if he.size != ihc.size:
        raise DataError(f"paired tiles differ in size: {he.size} vs {ihc.size}")
    if unified_size % zoom:
        raise DataError(f"unified size {unified_size} not divisible by zoom {zoom}")
    crop = unified_size // zoom
    h, w = he.size
    if crop > h or crop > w:
        raise DataError(f"crop window {crop} exceeds tile {h}x{w}")
    rng = np.random.default_rng(rng_seed)
    origin = (int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1)))
    he_c = size_normalize(_crop(he, origin, crop), unified_size, sr)
    ihc_c = size_normalize(_crop(ihc, origin, crop), unified_size, sr)
    branch = MagnificationBranch.ZOOM_2X if zoom == 2 else MagnificationBranch.ZOOM_4X
    return MagnificationSample(he_c, ihc_c, branch, origin, unified_size)


# ---------------------------------------------------------------------------
# Seeded sample stream.


@dataclass(frozen=True)
class MagnificationPolicy:
    """Sampling probabilities over the four magnification branches."""

    macro: float = 0.25
    native: float = 0.25
    zoom2: float = 0.25
    zoom4: float = 0.25
    macro_factor: int = 2

    def __post_init__(self):
        p = self.probabilities()
        if (p < 0).any():
            raise DataError("branch probabilities must be nonnegative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise DataError(f"branch probabilities must sum to 1, got {p.sum()}")
        if self.macro_factor not in (2, 4):
            raise DataError(f"macro factor must be 2 or 4, got {self.macro_factor}")

    def probabilities(self) -> np.ndarray:
        return np.array([self.macro, self.native, self.zoom2, self.zoom4], dtype=np.float64)

    @classmethod
    def native_only(cls) -> "MagnificationPolicy":
        return cls(macro=0.0, native=1.0, zoom2=0.0, zoom4=0.0)


@functools.lru_cache(maxsize=32)
def _cached_tile(path: str, domain_value: str) -> ImageTile:
    return load_tile(path, StainDomain(domain_value))


def sample_at(
    manifest: DatasetManifest,
    policy: MagnificationPolicy,
    rng_seed: int,
    index: int,
    unified_size: int = 512,
    sr: SuperResolver | None = None,
) -> MagnificationSample:
    """Materialize stream item ``index``; a pure function of (seed, index).

    Random-access addressing keeps resumption and parallel prefetch trivially
    order-preserving.
    """
    if not manifest.entries:
        raise DataError("cannot sample from an empty manifest")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=rng_seed, spawn_key=(index,)))
    entry = manifest.entries[int(rng.integers(len(manifest.entries)))]
    branch = BRANCH_ORDER[int(rng.choice(4, p=policy.probabilities()))]
    he = _cached_tile(entry.he, StainDomain.HE.value)
    ihc = _cached_tile(entry.ihc, StainDomain.IHC.value)

    if branch is MagnificationBranch.MACRO_DOWNSAMPLE:
        he_s = size_normalize(downsample_macro(he, policy.macro_factor), unified_size, sr)
        ihc_s = size_normalize(downsample_macro(ihc, policy.macro_factor), unified_size, sr)
        return MagnificationSample(he_s, ihc_s, branch, (0, 0), unified_size)
    if branch is MagnificationBranch.NATIVE_CROP:
        h, w = he.size
        if unified_size > h or unified_size > w:
            raise DataError(f"native crop {unified_size} exceeds tile {h}x{w}")
        origin = (
            int(rng.integers(0, h - unified_size + 1)),
            int(rng.integers(0, w - unified_size + 1)),
        )
        return MagnificationSample(
            _crop(he, origin, unified_size),
            _crop(ihc, origin, unified_size),
            branch,
            origin,
            unified_size,
        )
    zoom = 2 if branch is MagnificationBranch.ZOOM_2X else 4
    crop_seed = int(rng.integers(0, 2**63 - 1))
    return paired_crop_zoom(he, ihc, zoom, crop_seed, unified_size, sr)


def sample_batch(
    manifest: DatasetManifest,
    policy: MagnificationPolicy,
    rng_seed: int,
    unified_size: int = 512,
    sr: SuperResolver | None = None,
    start: int = 0,
) -> Iterator[MagnificationSample]:
    """Infinite seeded stream of training samples in deterministic order."""
    if not manifest.entries:
        raise DataError("cannot sample from an empty manifest")

    def _generate():
        i = start
        while True:
            yield sample_at(manifest, policy, rng_seed, i, unified_size, sr)
            i += 1

    return _generate()
