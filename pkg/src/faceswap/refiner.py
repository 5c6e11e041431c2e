"""Stage two: heuristic-error computation and the refinement U-Net.

The heuristic error of a target image is the gap between the image and its
stage-one self-reconstruction; occlusions the first stage cannot reproduce
show up as large residuals, with no mask annotations involved. The refiner
consumes the stage-one swap concatenated with this residual and outputs the
final image.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import PipelineConfig
from .errors import ConfigError, NumericError
from .losses import identity_loss, reconstruction_loss
from .norms import SyncableBatchNorm2d


@torch.no_grad()
def heuristic_error(x_t: torch.Tensor, aei: nn.Module) -> torch.Tensor:
    """x_t minus its own-identity reconstruction; values in [-2, 2]."""
    was_training = aei.training
    aei.eval()
    try:
        recon, _ = aei(x_t, x_t)
    finally:
        aei.train(was_training)
    return x_t - recon


class RefinerUNet(nn.Module):
    """U-Net over (stage-one image, heuristic error) -> refined image.

    Depth is configurable (default 5 down/upsamples); decoder levels
    concatenate mirror encoder skips; output is tanh-bounded.
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        chs = config.hear_channels
        self.depth = config.hear_depth
        downs = []
        prev = 6
        for ch in chs:
            downs.append(
                nn.Sequential(
                    nn.Conv2d(prev, ch, 4, stride=2, padding=1),
                    SyncableBatchNorm2d(ch),
                    nn.LeakyReLU(0.1),
                )
            )
            prev = ch
        self.downs = nn.ModuleList(downs)
        ups = []
        in_ch = chs[-1]
        for i in range(len(chs) - 2, -1, -1):
            ups.append(
                nn.Sequential(
                    nn.ConvTranspose2d(in_ch, chs[i], 4, stride=2, padding=1),
                    SyncableBatchNorm2d(chs[i]),
                    nn.LeakyReLU(0.1),
                )
            )
            in_ch = 2 * chs[i]
        ups.append(
            nn.Sequential(
                nn.ConvTranspose2d(in_ch, chs[0], 4, stride=2, padding=1),
                SyncableBatchNorm2d(chs[0]),
                nn.LeakyReLU(0.1),
            )
        )
        self.ups = nn.ModuleList(ups)
        self.out_conv = nn.Conv2d(chs[0], 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-1]
        if x.shape[-2] != size or size % 2**self.depth != 0:
            raise ConfigError(
                f"refiner input must be square with size divisible by "
                f"2^{self.depth}, got {tuple(x.shape[-2:])}"
            )
        skips = []
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        h = skips[-1]
        for i, up in enumerate(self.ups[:-1]):
            h = up(h)
            h = torch.cat([h, skips[-2 - i]], dim=1)
        h = self.ups[-1](h)
        return torch.tanh(self.out_conv(h))


def refine(
    y_hat: torch.Tensor, delta: torch.Tensor, refiner: RefinerUNet
) -> torch.Tensor:
    """Run the refinement U-Net on the concatenated stage-one output and
    heuristic error."""
    if y_hat.shape != delta.shape:
        raise ConfigError(
            f"stage-one output {tuple(y_hat.shape)} and heuristic error "
            f"{tuple(delta.shape)} must share a shape"
        )
    return refiner(torch.cat([y_hat, delta], dim=1))


@dataclass
class Stage2Losses:
    id: torch.Tensor
    chg: torch.Tensor
    rec: torch.Tensor
    total: torch.Tensor


def hear_losses(
    y: torch.Tensor,
    y_hat: torch.Tensor,
    x_t: torch.Tensor,
    x_s: torch.Tensor,
    is_same: bool | torch.Tensor,
    adapter: nn.Module,
    reduction: str = "sum",
) -> Stage2Losses:
    """Stage-two losses: identity preservation, change (mean absolute gap to
    the stage-one result), gated reconstruction; total is their plain sum."""
    with torch.no_grad():
        z_src = adapter(x_s)
    loss_id = identity_loss(adapter(y), z_src)
    loss_chg = (y_hat - y).abs().mean()
    loss_rec = reconstruction_loss(y, x_t, is_same, reduction=reduction)
    for name, value in (("id", loss_id), ("chg", loss_chg), ("rec", loss_rec)):
        if not bool(torch.isfinite(value).all()):
            raise NumericError(f"non-finite stage-two loss part: {name}")
    return Stage2Losses(id=loss_id, chg=loss_chg, rec=loss_rec, total=loss_id + loss_chg + loss_rec)
