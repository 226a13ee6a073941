"""Residual encoder-decoder generator with attention-gated skip fusion.

Input runs through a 3x3 stem producing full-resolution shallow features,
two stride-2 encoder stages, a residual trunk at quarter resolution, and two
decoder stages. At each decoder stage the matching encoder feature is gated
by an attention block driven jointly by encoder and upsampled decoder
features, then concatenated back in and reduced.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .embeddings import PatchEmbeddingSet
from .errors import ConfigError
from .images import tile_to_tensor

INSTRUMENTED_PREFIXES = ("shallow", "enc1", "enc2", "res")


@dataclass(frozen=True)
class GeneratorConfig:
    """Width, depth and attention placement of the generator."""

    base_channels: int = 64
    n_resblocks: int = 6
    attention_levels: tuple[int, ...] = (1, 2)
    embed_layers: tuple[str, ...] = ("shallow", "enc1", "enc2", "res3")
    embed_dim: int = 256

    def __post_init__(self):
        if self.n_resblocks < 1:
            raise ConfigError("n_resblocks must be >= 1")
        if self.base_channels < 8 or self.base_channels % 8:
            raise ConfigError("base_channels must be a positive multiple of 8")
        if not set(self.attention_levels) <= {1, 2}:
            raise ConfigError(f"attention_levels must be within {{1, 2}}, got {self.attention_levels}")
        for layer in self.embed_layers:
            if not layer.startswith(INSTRUMENTED_PREFIXES):
                raise ConfigError(f"unknown embedding layer '{layer}'")

    def layer_channels(self, layer: str) -> int:
        if layer == "shallow":
            return self.base_channels
        if layer == "enc1":
            return 2 * self.base_channels
        if layer == "enc2" or layer.startswith("res"):
            return 4 * self.base_channels
        raise ConfigError(f"unknown layer '{layer}'")

    def to_dict(self) -> dict:
        return {
            "base_channels": self.base_channels,
            "n_resblocks": self.n_resblocks,
            "attention_levels": list(self.attention_levels),
            "embed_layers": list(self.embed_layers),
            "embed_dim": self.embed_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(
            base_channels=int(d["base_channels"]),
            n_resblocks=int(d["n_resblocks"]),
            attention_levels=tuple(d["attention_levels"]),
            embed_layers=tuple(d["embed_layers"]),
            embed_dim=int(d["embed_dim"]),
        )


def init_weights(module: nn.Module) -> None:
    """Conv/linear weights from N(0, 0.02); norm layers to identity."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ChannelAttention(nn.Module):
    """Per-channel gate from average- and max-pooled statistics.

    A shared bottleneck MLP (reduction ``r``) scores both pooled vectors;
    their sum is squashed to (0, 1).
    """

    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"reduction {reduction} must divide channel count {channels}")
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    """Per-pixel gate from channel-mean and channel-max maps.

    Replicate padding keeps a constant input mapping to a spatially uniform
    gate, including at borders.
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(
            2, 1, kernel_size, padding=kernel_size // 2, bias=False, padding_mode="replicate"
        )

    def forward(self, x):
        stats = torch.cat([x.mean(dim=1, keepdim=True), x.max(dim=1, keepdim=True).values], dim=1)
        return torch.sigmoid(self.conv(stats))


class AttentionFusionGate(nn.Module):
    """Gate an encoder skip feature using the upsampled decoder feature.

    Both inputs are projected by 1x1 convs (batch-normalized) and
    concatenated; channel attention reweights the concatenation, spatial
    attention is evaluated on the reweighted map (the channel weights alone
    carry no spatial extent to attend over), and a final 1x1 projection plus
    sigmoid yields a single-channel mask multiplied into the encoder feature.
    """

    def __init__(
        self,
        enc_channels: int,
        dec_channels: int,
        reduction: int = 8,
        spatial_kernel: int = 7,
    ):
        super().__init__()
        inter = max(enc_channels // 2, reduction)
        self.proj_enc = nn.Conv2d(enc_channels, inter, 1)
        self.bn_enc = nn.BatchNorm2d(inter)
        self.proj_dec = nn.Conv2d(dec_channels, inter, 1)
        self.bn_dec = nn.BatchNorm2d(inter)
        self.channel_gate = ChannelAttention(2 * inter, reduction)
        self.spatial_gate = SpatialAttention(spatial_kernel)
        self.mask_conv = nn.Conv2d(2 * inter, 1, 1)

    def attention_mask(self, f_enc, f_dec):
        if f_enc.shape[-2:] != f_dec.shape[-2:]:
            raise ValueError(
                f"spatial mismatch: encoder {tuple(f_enc.shape[-2:])} vs decoder {tuple(f_dec.shape[-2:])}"
            )
        fused = torch.cat([self.bn_enc(self.proj_enc(f_enc)), self.bn_dec(self.proj_dec(f_dec))], dim=1)
        reweighted = self.channel_gate(fused) * fused
        spatial = self.spatial_gate(reweighted)
        return torch.sigmoid(self.mask_conv(spatial * reweighted))

    def forward(self, f_enc, f_dec):
        return self.attention_mask(f_enc, f_dec) * f_enc


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


def _conv_norm_relu(in_ch, out_ch, stride=1, padding_mode="zeros"):
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, padding_mode=padding_mode),
        nn.InstanceNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class _UpsampleConv(nn.Sequential):
    # nearest-neighbor + conv upsampling avoids checkerboard artifacts
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.InstanceNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class TranslationGenerator(nn.Module):
    """Stain-translation generator mapping an RGB tile in [0, 1] to one in [0, 1].

    Output shape equals input shape for any height/width divisible by 4.
    """

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.shallow = _conv_norm_relu(3, c, padding_mode="reflect")
        self.enc1 = _conv_norm_relu(c, 2 * c, stride=2)
        self.enc2 = _conv_norm_relu(2 * c, 4 * c, stride=2)
        self.resblocks = nn.ModuleList(ResidualBlock(4 * c) for _ in range(config.n_resblocks))
        self.up1 = _UpsampleConv(4 * c, 2 * c)
        self.gate2 = AttentionFusionGate(2 * c, 2 * c) if 2 in config.attention_levels else None
        self.fuse1 = _conv_norm_relu(4 * c, 2 * c)
        self.up2 = _UpsampleConv(2 * c, c)
        self.gate1 = AttentionFusionGate(c, c) if 1 in config.attention_levels else None
        self.fuse2 = _conv_norm_relu(2 * c, c)
        self.head = nn.Conv2d(c, 3, 3, padding=1, padding_mode="reflect")

    @property
    def has_attention(self) -> bool:
        return self.gate1 is not None or self.gate2 is not None

    def _check_input(self, x):
        h, w = x.shape[-2:]
        if h % 4 or w % 4 or h < 8 or w < 8:
            raise ValueError(f"input size {h}x{w} must be >= 8 and divisible by 4")

    def _encode(self, x, collect: set[str] | None = None):
        feats = {}
        f_s = self.shallow(x)
        e1 = self.enc1(f_s)
        e2 = self.enc2(e1)
        if collect is not None:
            if "shallow" in collect:
                feats["shallow"] = f_s
            if "enc1" in collect:
                feats["enc1"] = e1
            if "enc2" in collect:
                feats["enc2"] = e2
        r = e2
        deepest = 0
        if collect is not None:
            wanted = [int(l[3:]) for l in collect if l.startswith("res")]
            deepest = max(wanted, default=0)
        for i, block in enumerate(self.resblocks, start=1):
            if collect is not None and i > deepest:
                break
            r = block(r)
            if collect is not None and f"res{i}" in collect:
                feats[f"res{i}"] = r
        return f_s, e1, e2, r, feats

    def features(self, image, layers) -> dict[str, torch.Tensor]:
        """Intermediate activations for the requested instrumented layers.

        Valid names: 'shallow', 'enc1', 'enc2', 'res1'..'res<N>'.
        """
        layers = tuple(layers)
        for layer in layers:
            if layer.startswith("res"):
                idx = int(layer[3:])
                if not 1 <= idx <= len(self.resblocks):
                    raise ValueError(f"unknown layer '{layer}'")
            elif layer not in ("shallow", "enc1", "enc2"):
                raise ValueError(f"unknown layer '{layer}'")
        x = tile_to_tensor(image, dtype=next(self.parameters()).dtype)
        self._check_input(x)
        *_, feats = self._encode(x, collect=set(layers))
        return {layer: feats[layer] for layer in layers}

    def forward(self, image):
        x = tile_to_tensor(image, dtype=next(self.parameters()).dtype)
        self._check_input(x)
        f_s, e1, _, r, _ = self._encode(x)
        d1 = self.up1(r)
        skip2 = self.gate2(e1, d1) if self.gate2 is not None else e1
        d1 = self.fuse1(torch.cat([d1, skip2], dim=1))
        d2 = self.up2(d1)
        skip1 = self.gate1(f_s, d2) if self.gate1 is not None else f_s
        d2 = self.fuse2(torch.cat([d2, skip1], dim=1))
        return (torch.tanh(self.head(d2)) + 1.0) * 0.5


class PatchProjectionHead(nn.Module):
    """Two-layer MLP per instrumented layer projecting patch features to unit vectors."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        self.mlps = nn.ModuleDict(
            {
                layer: nn.Sequential(
                    nn.Linear(config.layer_channels(layer), config.embed_dim),
                    nn.ReLU(inplace=True),
                    nn.Linear(config.embed_dim, config.embed_dim),
                )
                for layer in config.embed_layers
            }
        )

    def forward(self, layer: str, feat: torch.Tensor, ids: np.ndarray) -> torch.Tensor:
        if layer not in self.mlps:
            raise ValueError(f"no projection head for layer '{layer}'")
        flat = feat.flatten(2)[0].t()  # (H*W, C)
        idx = torch.as_tensor(np.asarray(ids, dtype=np.int64), device=flat.device)
        z = self.mlps[layer](flat[idx])
        return z / z.norm(dim=1, keepdim=True).clamp_min(1e-12)


def sample_locations(grid_hw: tuple[int, int], n_locations: int, rng: np.random.Generator) -> np.ndarray:
    """Distinct flat indices into an (H, W) grid, at most H*W of them."""
    total = grid_hw[0] * grid_hw[1]
    n = min(n_locations, total)
    return rng.choice(total, size=n, replace=False).astype(np.int64)


def extract_patch_embeddings(
    image,
    generator: TranslationGenerator,
    head: PatchProjectionHead,
    layers: tuple[str, ...] | None = None,
    locations: dict[str, np.ndarray] | None = None,
    n_locations: int = 256,
    rng_seed: int = 0,
) -> PatchEmbeddingSet:
    """Project and L2-normalize features at sampled spatial locations.

    With ``locations=None`` each layer samples its own seeded, distinct
    indices; passing a previous set's ``.locations`` reuses them exactly,
    which is what keeps positive pairs aligned across images.
    """
    layers = tuple(layers) if layers is not None else head.config.embed_layers
    feats = generator.features(image, layers)
    rng = np.random.default_rng(rng_seed)
    out_locations: dict[str, np.ndarray] = {}
    vectors: dict[str, torch.Tensor] = {}
    grids: dict[str, tuple[int, int]] = {}
    for layer in layers:
        feat = feats[layer]
        h, w = feat.shape[-2:]
        grids[layer] = (h, w)
        if locations is None or layer not in locations:
            ids = sample_locations((h, w), n_locations, rng)
        else:
            ids = np.asarray(locations[layer], dtype=np.int64)
            if ids.size and (ids.min() < 0 or ids.max() >= h * w):
                raise ValueError(
                    f"location outside feature grid: layer '{layer}' is {h}x{w}, got index "
                    f"{int(ids.min()) if ids.min() < 0 else int(ids.max())}"
                )
        out_locations[layer] = ids
        vectors[layer] = head(layer, feat, ids)
    return PatchEmbeddingSet(layers, out_locations, vectors, grids)
