"""Patch discriminator scoring overlapping receptive fields as real/fake."""

from __future__ import annotations

import torch.nn as nn

from .images import tile_to_tensor

KERNEL = 4
STRIDES = (2, 2, 2, 1, 1)
CHANNELS = (3, 64, 128, 256, 512, 1)
MIN_INPUT = 70  # receptive field of the five-layer stack


def score_map_size(height: int, width: int) -> tuple[int, int]:
    """Output spatial size from the conv stride arithmetic."""
    h, w = height, width
    for s in STRIDES:
        h = (h + 2 - KERNEL) // s + 1
        w = (w + 2 - KERNEL) // s + 1
    return h, w


class PatchDiscriminator(nn.Module):
    """Five 4x4 conv layers (strides 2,2,2,1,1) emitting one logit per patch.

    No normalization on the first layer, instance norm on the middle ones,
    no activation after the last.
    """

    def __init__(self):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(CHANNELS[0], CHANNELS[1], KERNEL, stride=STRIDES[0], padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        for i in (1, 2, 3):
            layers += [
                nn.Conv2d(CHANNELS[i], CHANNELS[i + 1], KERNEL, stride=STRIDES[i], padding=1),
                nn.InstanceNorm2d(CHANNELS[i + 1]),
                nn.LeakyReLU(0.2, inplace=True),
            ]
        layers.append(nn.Conv2d(CHANNELS[4], CHANNELS[5], KERNEL, stride=STRIDES[4], padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, image):
        x = tile_to_tensor(image, dtype=next(self.parameters()).dtype)
        h, w = x.shape[-2:]
        if h < MIN_INPUT or w < MIN_INPUT:
            raise ValueError(
                f"input {h}x{w} below the {MIN_INPUT}x{MIN_INPUT} receptive field"
            )
        return self.model(x)
