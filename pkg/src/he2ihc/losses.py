"""Training objectives: adversarial, contrastive patch losses, Gaussian pyramid L1.

All losses are pure functions. Tensor inputs keep their autograd graph and
return a 0-dim tensor; ImageTile / ndarray inputs return a plain float.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .embeddings import PatchEmbeddingSet, require_aligned
from .errors import DataError, NumericError
from .images import ImageTile, tile_to_tensor

LOSS_PART_NAMES = ("adv", "patch_nce", "asp", "gp")


# ---------------------------------------------------------------------------
# Gaussian kernel and blur, shared with the data pipeline's macro downsample.


def gaussian_kernel(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    """Normalized 2-D Gaussian taps (sum exactly 1)."""
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g1 = np.exp(-(x**2) / (2.0 * sigma**2))
    k = np.outer(g1, g1)
    return k / k.sum()


def gaussian_blur(x: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    """Depthwise blur of a (N, C, H, W) tensor with whole-sample reflect padding."""
    k = kernel.shape[0]
    pad = k // 2
    n, c, h, w = x.shape
    if h <= pad or w <= pad:
        raise DataError(f"image {h}x{w} too small for a {k}x{k} blur kernel")
    weight = torch.as_tensor(kernel, dtype=x.dtype, device=x.device)
    weight = weight.expand(c, 1, k, k)
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    return F.conv2d(padded, weight, groups=c)


def blur_downsample(x: torch.Tensor, kernel: np.ndarray, factor: int) -> torch.Tensor:
    """Gaussian blur followed by stride-``factor`` subsampling."""
    return gaussian_blur(x, kernel)[..., ::factor, ::factor]


# ---------------------------------------------------------------------------
# Adversarial loss (least-squares form).


def adversarial_loss(scores_real, scores_fake, side: str):
    """Least-squares GAN objective on patch score maps.

    side='D': mean((s_real - 1)^2) + mean(s_fake^2), real scores pushed to 1.
    side='G': mean((s_fake - 1)^2); ``scores_real`` is ignored and may be None.
    """
    as_float = not torch.is_tensor(scores_fake)
    fake = torch.as_tensor(np.asarray(scores_fake)) if as_float else scores_fake
    if side == "G":
        out = ((fake - 1.0) ** 2).mean()
    elif side == "D":
        if scores_real is None:
            raise ValueError("side='D' requires real scores")
        real = torch.as_tensor(np.asarray(scores_real)) if not torch.is_tensor(scores_real) else scores_real
        out = ((real - 1.0) ** 2).mean() + (fake**2).mean()
    else:
        raise ValueError(f"side must be 'G' or 'D', got {side!r}")
    return out.item() if as_float else out


# ---------------------------------------------------------------------------
# InfoNCE and the adaptively weighted supervised variant.


def info_nce(v, v_pos, v_negs, temperature: float = 0.07):
    """Cross-entropy of the softmax over [v.v+ / T, v.v-_k / T] with the positive as target.

    Vectors are expected unit-norm; there must be at least one negative.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    as_float = not torch.is_tensor(v)
    v = torch.as_tensor(np.asarray(v, dtype=np.float64)) if as_float else v
    v_pos = torch.as_tensor(np.asarray(v_pos, dtype=np.float64)) if not torch.is_tensor(v_pos) else v_pos
    negs = torch.as_tensor(np.asarray(v_negs, dtype=np.float64)) if not torch.is_tensor(v_negs) else v_negs
    if negs.ndim == 1:
        negs = negs[None]
    if negs.shape[0] == 0:
        raise ValueError("info_nce needs at least one negative vector")
    l_pos = (v * v_pos).sum() / temperature
    l_negs = (negs @ v) / temperature
    logits = torch.cat([l_pos[None], l_negs])
    out = torch.logsumexp(logits, dim=0) - l_pos
    return out.item() if as_float else out


def _hinge(s):
    """Default similarity weight: cosine similarity clamped to [0, 1]."""
    if torch.is_tensor(s):
        return s.clamp(min=0.0)
    return max(0.0, float(s))


@dataclass
class WeightSchedule:
    """Schedule for the adaptive contrastive weight.

    ``g`` ramps the adaptive term in over training progress (g(0)=0, g(1)=1,
    nondecreasing); the default is a linear ramp reaching 1 after
    ``ramp_fraction`` of training. ``h`` maps the positive-pair cosine
    similarity into [0, h_max]; the default clamps negatives to zero so
    poorly corresponding pairs stop contributing once the ramp saturates.
    """

    total_iterations: int
    ramp_fraction: float = 0.5
    g: Callable[[float], float] | None = None
    h: Callable = _hinge
    h_max: float = 1.0

    def __post_init__(self):
        if self.total_iterations <= 0:
            raise ValueError("total_iterations must be positive")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ValueError("ramp_fraction must be in (0, 1]")
        if self.g is not None:
            if abs(self.g(0.0)) > 1e-12 or abs(self.g(1.0) - 1.0) > 1e-12:
                raise ValueError("custom g must satisfy g(0)=0 and g(1)=1")

    def g_at(self, x: float) -> float:
        if self.g is not None:
            return float(self.g(x))
        return min(1.0, x / self.ramp_fraction)


def adaptive_weight(t: int, schedule: WeightSchedule, sim):
    """Pair weight w = (1 - g(t/T)) * 1.0 + g(t/T) * h(sim).

    ``sim`` is the query/positive cosine similarity; scalar or tensor.
    """
    T = schedule.total_iterations
    if t < 0 or t > T:
        raise ValueError(f"iteration t={t} outside [0, {T}]")
    gt = schedule.g_at(t / T)
    return (1.0 - gt) * 1.0 + gt * schedule.h(sim)


def _per_location_nce(q: torch.Tensor, k: torch.Tensor, temperature: float) -> torch.Tensor:
    """Per-row InfoNCE where row i's positive is k[i] and negatives are k[j != i]."""
    logits = (q @ k.t()) / temperature
    return torch.logsumexp(logits, dim=1) - logits.diagonal()


def patch_nce_loss(
    input_embeds: PatchEmbeddingSet,
    fake_embeds: PatchEmbeddingSet,
    temperature: float = 0.07,
) -> torch.Tensor:
    """Contrastive loss pairing generator-input patches with same-location fake patches.

    Queries come from the generated image, positives from the matching input
    location, negatives from the input image's other sampled locations.
    Mean over locations, then over layers.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    require_aligned(input_embeds, fake_embeds)
    per_layer = []
    for layer in fake_embeds.layers:
        q = fake_embeds.vectors[layer]
        k = input_embeds.vectors[layer]
        per_layer.append(_per_location_nce(q, k, temperature).mean())
    return torch.stack(per_layer).mean()


def adaptive_patch_nce_loss(
    fake_embeds: PatchEmbeddingSet,
    real_embeds: PatchEmbeddingSet,
    t: int,
    schedule: WeightSchedule,
    temperature: float = 0.07,
) -> torch.Tensor:
    """Supervised contrastive loss against the real target image, adaptively weighted.

    Positives are same-location real-image patches; each pair's InfoNCE term is
    scaled by ``adaptive_weight`` of its query/positive similarity, so weakly
    corresponding pairs fade out as the schedule ramps.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    require_aligned(fake_embeds, real_embeds)
    per_layer = []
    for layer in fake_embeds.layers:
        q = fake_embeds.vectors[layer]
        k = real_embeds.vectors[layer]
        sims = (q * k).sum(dim=1)
        w = adaptive_weight(t, schedule, sims)
        ce = _per_location_nce(q, k, temperature)
        per_layer.append((w * ce).mean())
    return torch.stack(per_layer).mean()


# ---------------------------------------------------------------------------
# Gaussian pyramid L1.


@dataclass(frozen=True)
class PyramidSpec:
    """Gaussian pyramid shape: level count, blur taps, per-level weights."""

    levels: int = 4
    kernel_size: int = 5
    sigma: float = 1.0
    level_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("pyramid needs at least one level")
        if len(self.level_weights) != self.levels:
            raise ValueError(
                f"{self.levels} levels but {len(self.level_weights)} level weights"
            )
        if any((not math.isfinite(w)) or w < 0 for w in self.level_weights):
            raise ValueError("level weights must be finite and nonnegative")

    def kernel(self) -> np.ndarray:
        return gaussian_kernel(self.kernel_size, self.sigma)


def gaussian_pyramid_loss(fake, real, spec: PyramidSpec = PyramidSpec()):
    """Weighted sum of mean absolute differences over a Gaussian pyramid.

    Level 1 compares the images as given; every further level blurs both with
    the spec's kernel and subsamples by 2 before taking the L1 mean.
    """
    as_float = not torch.is_tensor(fake)
    a = tile_to_tensor(fake, dtype=torch.float64 if as_float else None)
    b = tile_to_tensor(real, dtype=torch.float64 if as_float else None)
    if a.shape != b.shape:
        raise ValueError(f"size mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    kernel = spec.kernel()
    total = None
    for i in range(spec.levels):
        level = (a - b).abs().mean() * spec.level_weights[i]
        total = level if total is None else total + level
        if i + 1 < spec.levels:
            a = blur_downsample(a, kernel, 2)
            b = blur_downsample(b, kernel, 2)
    return total.item() if as_float else total


# ---------------------------------------------------------------------------
# Composite objective.


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the generator's composite objective."""

    adv: float = 1.0
    patch_nce: float = 10.0
    asp: float = 10.0
    gp: float = 10.0

    def __post_init__(self):
        for name in LOSS_PART_NAMES:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"weight '{name}' must be finite and nonnegative, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in LOSS_PART_NAMES}


def total_generator_loss(parts: Mapping[str, object], weights: LossWeights):
    """Weighted sum of the generator loss parts.

    ``parts`` maps any subset of {adv, patch_nce, asp, gp} to scalars; a part
    may be omitted only when its weight is zero. Non-finite parts are rejected
    by name.
    """
    unknown = set(parts) - set(LOSS_PART_NAMES)
    if unknown:
        raise ValueError(f"unknown loss parts: {sorted(unknown)}")
    total = None
    any_tensor = any(torch.is_tensor(v) for v in parts.values())
    for name in LOSS_PART_NAMES:
        w = getattr(weights, name)
        if name not in parts:
            if w != 0.0:
                raise ValueError(f"loss part '{name}' missing but its weight is {w}")
            continue
        part = parts[name]
        value = part if torch.is_tensor(part) else torch.as_tensor(float(part), dtype=torch.float64)
        if not torch.isfinite(value.detach()).all():
            raise NumericError(f"non-finite loss part '{name}'")
        term = w * value
        total = term if total is None else total + term
    if total is None:
        total = torch.zeros(())
    return total if any_tensor else total.item()
