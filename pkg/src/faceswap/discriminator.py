"""Multi-scale patch discriminator with hinge-loss training."""

from __future__ import annotations

import torch
from torch import nn

from .config import PipelineConfig


class PatchDiscriminator(nn.Module):
    """PatchGAN tower: strided convolutions down to a 1-channel logit map."""

    def __init__(self, base_channels: int = 64, n_layers: int = 4, in_channels: int = 3):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(in_channels, base_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        ]
        ch = base_channels
        for _ in range(n_layers - 1):
            nxt = min(ch * 2, base_channels * 8)
            layers += [
                nn.Conv2d(ch, nxt, 4, stride=2, padding=1),
                nn.InstanceNorm2d(nxt),
                nn.LeakyReLU(0.2),
            ]
            ch = nxt
        layers.append(nn.Conv2d(ch, 1, 3, stride=1, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MultiScaleDiscriminator(nn.Module):
    """Identical patch discriminators applied at full, 1/2, 1/4, ... scale.

    Downsampling between scales is average pooling; the forward pass returns
    one logit map per scale, finest first.
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.scales = nn.ModuleList(
            PatchDiscriminator(config.disc_base_channels, config.disc_layers)
            for _ in range(config.disc_scales)
        )
        self.downsample = nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        outputs = []
        for disc in self.scales:
            outputs.append(disc(x))
            x = self.downsample(x)
        return outputs


def discriminate(image: torch.Tensor, discriminator: MultiScaleDiscriminator) -> list[torch.Tensor]:
    return discriminator(image)
