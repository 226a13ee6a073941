"""Evaluation battery: paired metrics (SSIM, PSNR, LPIPS-style perceptual
distance, per-layer hash distance) and distribution metrics (Frechet and
kernel distances) behind a pluggable feature extractor.

The default extractor is a fixed-seed random conv encoder, so every metric is
deterministic and runs offline; a pretrained backbone can be plugged in via
the ``HE2IHC_EXTRACTOR`` environment variable for externally comparable
numbers.
"""

from __future__ import annotations

import csv
import hashlib
import importlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence, runtime_checkable

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .images import FeatureMap, ImageTile, StainDomain, load_tile

EXTRACTOR_ENV = "HE2IHC_EXTRACTOR"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

HASH_GRID = 8  # per-channel pooling grid for the perceptual hash metric

TABLE_COLUMNS = (
    "Method",
    "SSIM",
    "PHV_layer1",
    "PHV_layer2",
    "PHV_layer3",
    "PHV_layer4",
    "PHV_avg",
    "FID",
    "KID",
    "LPIPS",
    "PSNR",
)


@runtime_checkable
class FeatureExtractor(Protocol):
    name: str
    layer_ids: tuple[str, ...]
    is_pretrained: bool

    def embed(self, image) -> list[FeatureMap]: ...


class SeededConvExtractor:
    """Four-stage random conv encoder with weights fixed by a seed.

    Stride-2 3x3 convs with ReLU; layer k halves resolution k times. The
    final stage's globally pooled activations serve as the embedding for the
    distribution metrics.
    """

    def __init__(self, seed: int = 714025, channels: tuple[int, ...] = (16, 32, 64, 128)):
        if len(channels) < 4:
            raise ConfigError("extractor needs at least 4 stages (hash metric uses 4 layers)")
        import torch

        self._torch = torch
        self.name = f"seeded-conv{len(channels)}-{seed}"
        self.is_pretrained = False
        self.layer_ids = tuple(f"stage{i + 1}" for i in range(len(channels)))
        rng = np.random.default_rng(seed)
        self._weights = []
        in_ch = 3
        for out_ch in channels:
            fan_in = in_ch * 9
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_ch, in_ch, 3, 3))
            self._weights.append(torch.from_numpy(w))
            in_ch = out_ch
        self.embed_dim = channels[-1]

    def embed(self, image) -> list[FeatureMap]:
        torch = self._torch
        arr = image.pixels if isinstance(image, ImageTile) else np.asarray(image, dtype=np.float64)
        x = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]
        outs = []
        with torch.no_grad():
            for i, w in enumerate(self._weights):
                x = torch.nn.functional.conv2d(x, w, stride=2, padding=1).relu()
                outs.append(FeatureMap(x[0].numpy(), scale=i + 1))
        return outs


def load_extractor(spec: str | None = None) -> FeatureExtractor:
    """Build the feature extractor; ``spec`` or the env var may name a
    ``module:attribute`` plug-in (class, factory or instance)."""
    spec = spec or os.environ.get(EXTRACTOR_ENV)
    if not spec:
        return SeededConvExtractor()
    if ":" not in spec:
        raise ConfigError(f"extractor spec must be 'module:attribute', got {spec!r}")
    mod_name, attr = spec.split(":", 1)
    try:
        obj = getattr(importlib.import_module(mod_name), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigError(f"cannot load extractor {spec!r}: {exc}") from exc
    fx = obj() if callable(obj) and not isinstance(obj, FeatureExtractor) else obj
    if not isinstance(fx, FeatureExtractor):
        raise ConfigError(f"extractor {spec!r} lacks the required interface")
    return fx


# ---------------------------------------------------------------------------
# Paired metrics.


def _as_image(x) -> np.ndarray:
    arr = x.pixels if isinstance(x, ImageTile) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {a.shape} vs {b.shape}")


def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2.0 * sigma**2))
    return g / g.sum()


def _window_means(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    # separable weighted mean, cropped to windows fully inside the image
    out = ndimage.correlate1d(img, taps, axis=0, mode="nearest")
    out = ndimage.correlate1d(out, taps, axis=1, mode="nearest")
    m = len(taps) // 2
    return out[m:-m, m:-m]


def ssim(a, b) -> float:
    """Mean structural similarity over 11x11 Gaussian windows (sigma 1.5),
    dynamic range 1, averaged over channels."""
    xa, xb = _as_image(a), _as_image(b)
    _check_pair(xa, xb)
    h, w = xa.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    taps = _gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    vals = []
    for ch in range(xa.shape[2]):
        pa, pb = xa[..., ch], xb[..., ch]
        mu_a = _window_means(pa, taps)
        mu_b = _window_means(pb, taps)
        var_a = _window_means(pa * pa, taps) - mu_a**2
        var_b = _window_means(pb * pb, taps) - mu_b**2
        cov = _window_means(pa * pb, taps) - mu_a * mu_b
        num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
        den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB with peak 1; +inf for identical images."""
    xa, xb = _as_image(a), _as_image(b)
    _check_pair(xa, xb)
    mse = float(np.mean((xa - xb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _unit_normalize_channels(data: np.ndarray) -> np.ndarray:
    norm = np.sqrt((data**2).sum(axis=0, keepdims=True))
    return data / (norm + 1e-10)


def perceptual_distance(a, b, fx: FeatureExtractor) -> float:
    """Mean over layers of spatially averaged squared differences between
    channel-unit-normalized feature maps."""
    try:
        feats_a = fx.embed(a)
        feats_b = fx.embed(b)
    except Exception as exc:
        raise DataError(f"feature extractor '{getattr(fx, 'name', fx)}' failed: {exc}") from exc
    dists = []
    for fa, fb in zip(feats_a, feats_b):
        na = _unit_normalize_channels(fa.data)
        nb = _unit_normalize_channels(fb.data)
        dists.append(((na - nb) ** 2).sum(axis=0).mean())
    return float(np.mean(dists))


def _adaptive_pool(data: np.ndarray, grid: int) -> np.ndarray:
    c, h, w = data.shape
    out = np.empty((c, grid, grid), dtype=np.float64)
    for i in range(grid):
        r0, r1 = (i * h) // grid, -(-((i + 1) * h) // grid)
        for j in range(grid):
            c0, c1 = (j * w) // grid, -(-((j + 1) * w) // grid)
            out[:, i, j] = data[:, r0:r1, c0:c1].mean(axis=(1, 2))
    return out


def _hash_code(fm: FeatureMap) -> np.ndarray:
    pooled = _adaptive_pool(fm.data, HASH_GRID)
    return pooled > pooled.mean(axis=(1, 2), keepdims=True)


class PhvScores(NamedTuple):
    layers: tuple[float, float, float, float]
    avg: float


def phv(a, b, fx: FeatureExtractor) -> PhvScores:
    """Per-layer perceptual hash distance.

    Each of the first four extractor layers is pooled to a fixed 8x8 grid per
    channel and sign-binarized around its per-channel mean; the score is the
    normalized Hamming distance between the two binary codes.
    """
    try:
        feats_a = fx.embed(a)[:4]
        feats_b = fx.embed(b)[:4]
    except Exception as exc:
        raise DataError(f"feature extractor '{getattr(fx, 'name', fx)}' failed: {exc}") from exc
    if len(feats_a) < 4 or len(feats_b) < 4:
        raise DataError("hash metric needs an extractor with at least 4 layers")
    layers = tuple(
        float(np.mean(_hash_code(fa) != _hash_code(fb))) for fa, fb in zip(feats_a, feats_b)
    )
    return PhvScores(layers, float(np.mean(layers)))


# ---------------------------------------------------------------------------
# Distribution metrics.


def _pooled_embeddings(images: Sequence, fx: FeatureExtractor) -> np.ndarray:
    rows = []
    for img in images:
        try:
            final = fx.embed(img)[-1]
        except Exception as exc:
            raise DataError(f"feature extractor '{getattr(fx, 'name', fx)}' failed: {exc}") from exc
        rows.append(final.data.mean(axis=(1, 2)))
    return np.stack(rows)


def _sqrtm_psd(mat: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, bool]:
    sym = (mat + mat.T) / 2.0
    w, v = np.linalg.eigh(sym)
    clamped = bool(w.min() < -tol)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T, clamped


def frechet_distance(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> tuple[float, bool]:
    """Frechet distance between two Gaussians; the matrix square root uses a
    symmetric eigendecomposition with negative eigenvalues clamped to zero."""
    root_a, clamp1 = _sqrtm_psd(cov_a)
    inner = root_a @ cov_b @ root_a
    w = np.linalg.eigh((inner + inner.T) / 2.0)[0]
    clamp2 = bool(w.min() < -1e-10)
    tr_sqrt = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = mu_a - mu_b
    val = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(val, 0.0), clamp1 or clamp2


def fid(set_a: Sequence, set_b: Sequence, fx: FeatureExtractor) -> float:
    value, _ = fid_with_info(set_a, set_b, fx)
    return value


def fid_with_info(set_a: Sequence, set_b: Sequence, fx: FeatureExtractor) -> tuple[float, bool]:
    """Frechet distance between pooled final-layer embeddings of two image sets.

    Returns (value, eigenvalue_clamped); covariance defects are clamped, not
    fatal, and the flag surfaces in reports.
    """
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValueError("each image set needs at least 2 images")
    ea = _pooled_embeddings(set_a, fx)
    eb = _pooled_embeddings(set_b, fx)
    mu_a, mu_b = ea.mean(axis=0), eb.mean(axis=0)
    cov_a = np.cov(ea, rowvar=False)
    cov_b = np.cov(eb, rowvar=False)
    return frechet_distance(mu_a, cov_a, mu_b, cov_b)


def _poly_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_u(x: np.ndarray, y: np.ndarray) -> float:
    # U-statistic estimator: diagonals excluded from all three terms, so
    # identical sample blocks give exactly zero.
    m = x.shape[0]
    kxx = _poly_kernel(x, x)
    kyy = _poly_kernel(y, y)
    kxy = _poly_kernel(x, y)
    sum_xx = kxx.sum() - np.trace(kxx)
    sum_yy = kyy.sum() - np.trace(kyy)
    sum_xy = kxy.sum() - np.trace(kxy)
    return float((sum_xx + sum_yy - 2.0 * sum_xy) / (m * (m - 1)))


def kid(set_a: Sequence, set_b: Sequence, fx: FeatureExtractor, block_size: int | None = None) -> float:
    """Block-averaged unbiased squared MMD with the cubic polynomial kernel
    k(x, y) = (x.y / dim + 1)^3. May be slightly negative."""
    ea = _pooled_embeddings(set_a, fx)
    eb = _pooled_embeddings(set_b, fx)
    n = min(ea.shape[0], eb.shape[0])
    if block_size is None:
        block_size = n
    if block_size < 2 or block_size > n:
        raise ValueError(f"block size {block_size} must be in [2, {n}]")
    n_blocks = n // block_size
    vals = [
        _mmd2_u(
            ea[i * block_size : (i + 1) * block_size],
            eb[i * block_size : (i + 1) * block_size],
        )
        for i in range(n_blocks)
    ]
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Reports.


@dataclass
class MetricReport:
    """Named metric scalars plus the provenance needed to compare runs."""

    method: str
    ssim: float
    psnr: float
    lpips: float
    phv_layers: tuple[float, float, float, float]
    phv_avg: float
    fid: float
    kid: float
    dataset_id: str = ""
    extractor: str = ""
    config_hash: str = ""
    seed: int = 0
    n_pairs: int = 0
    fid_clamped: bool = False

    def __post_init__(self):
        if abs(self.phv_avg - float(np.mean(self.phv_layers))) > 1e-9:
            raise ValueError("phv_avg must equal the mean of the four layer values")

    @property
    def kid_x1000(self) -> float:
        return self.kid * 1000.0

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "ssim": self.ssim,
            "psnr": "inf" if math.isinf(self.psnr) else self.psnr,
            "lpips": self.lpips,
            "phv_layer1": self.phv_layers[0],
            "phv_layer2": self.phv_layers[1],
            "phv_layer3": self.phv_layers[2],
            "phv_layer4": self.phv_layers[3],
            "phv_avg": self.phv_avg,
            "fid": self.fid,
            "kid": self.kid,
            "kid_x1000": self.kid_x1000,
            "dataset_id": self.dataset_id,
            "extractor": self.extractor,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_pairs": self.n_pairs,
            "fid_clamped": self.fid_clamped,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        psnr_val = d["psnr"]
        return cls(
            method=d["method"],
            ssim=float(d["ssim"]),
            psnr=math.inf if psnr_val == "inf" else float(psnr_val),
            lpips=float(d["lpips"]),
            phv_layers=tuple(float(d[f"phv_layer{i}"]) for i in (1, 2, 3, 4)),
            phv_avg=float(d["phv_avg"]),
            fid=float(d["fid"]),
            kid=float(d["kid"]),
            dataset_id=d.get("dataset_id", ""),
            extractor=d.get("extractor", ""),
            config_hash=d.get("config_hash", ""),
            seed=int(d.get("seed", 0)),
            n_pairs=int(d.get("n_pairs", 0)),
            fid_clamped=bool(d.get("fid_clamped", False)),
        )

    def table_row(self) -> dict:
        """One row in the published-table column convention (KID scaled x1000)."""
        return {
            "Method": self.method,
            "SSIM": self.ssim,
            "PHV_layer1": self.phv_layers[0],
            "PHV_layer2": self.phv_layers[1],
            "PHV_layer3": self.phv_layers[2],
            "PHV_layer4": self.phv_layers[3],
            "PHV_avg": self.phv_avg,
            "FID": self.fid,
            "KID": self.kid_x1000,
            "LPIPS": self.lpips,
            "PSNR": self.psnr,
        }


def write_report_json(report: MetricReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_report_json(path: str | Path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_table_csv(reports: Sequence[MetricReport], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        writer.writeheader()
        for rep in reports:
            row = rep.table_row()
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def config_digest(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def evaluate_directories(
    fake_dir: str | Path,
    real_dir: str | Path,
    fx: FeatureExtractor | None = None,
    method: str = "ours",
    dataset_id: str = "",
    seed: int = 0,
    kid_block_size: int | None = None,
) -> MetricReport:
    """Run the full metric battery on two directories paired by filename.

    Pairs are processed in sorted-name order so aggregation is deterministic.
    """
    fx = fx or load_extractor()
    fake_dir, real_dir = Path(fake_dir), Path(real_dir)
    names_f = {p.name for p in fake_dir.glob("*.png")}
    names_r = {p.name for p in real_dir.glob("*.png")}
    orphans = sorted(names_f.symmetric_difference(names_r))
    if orphans:
        raise DataError(f"unpaired tile {orphans[0]} (and {len(orphans) - 1} more)")
    names = sorted(names_f)
    if len(names) < 2:
        raise DataError("evaluation needs at least 2 paired images")
    fakes, reals = [], []
    ssims, psnrs, lpips_vals = [], [], []
    phv_layer_vals = np.zeros((len(names), 4))
    for i, name in enumerate(names):
        fake = load_tile(fake_dir / name, StainDomain.IHC)
        real = load_tile(real_dir / name, StainDomain.IHC)
        fakes.append(fake)
        reals.append(real)
        ssims.append(ssim(fake, real))
        psnrs.append(psnr(fake, real))
        lpips_vals.append(perceptual_distance(fake, real, fx))
        phv_layer_vals[i] = phv(fake, real, fx).layers
    fid_val, clamped = fid_with_info(fakes, reals, fx)
    kid_val = kid(fakes, reals, fx, block_size=kid_block_size)
    layer_means = tuple(float(v) for v in phv_layer_vals.mean(axis=0))
    # digest covers content-identifying inputs only, never absolute paths,
    # so identical runs under different roots emit byte-identical reports
    cfg_hash = config_digest(
        {
            "extractor": fx.name,
            "seed": seed,
            "kid_block_size": kid_block_size,
            "dataset_id": dataset_id or fake_dir.name,
            "names": names,
        }
    )
    return MetricReport(
        method=method,
        ssim=float(np.mean(ssims)),
        psnr=math.inf if any(math.isinf(v) for v in psnrs) else float(np.mean(psnrs)),
        lpips=float(np.mean(lpips_vals)),
        phv_layers=layer_means,
        phv_avg=float(np.mean(layer_means)),
        fid=fid_val,
        kid=kid_val,
        dataset_id=dataset_id or fake_dir.name,
        extractor=fx.name,
        config_hash=cfg_hash,
        seed=seed,
        n_pairs=len(names),
        fid_clamped=clamped,
    )
