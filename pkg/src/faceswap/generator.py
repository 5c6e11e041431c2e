"""Adaptive attentional denormalization (AAD) generator.

An AAD layer batch-normalizes its input activation, denormalizes it twice --
spatially from the attribute embedding (conv-generated gamma/beta maps) and
channel-wise from the identity embedding (FC-generated gamma/beta vectors) --
and blends the two activations with a learned sigmoid attention mask:

    out = (1 - M) * A + M * I

The generator cascades AAD residual blocks from a coarse identity-seeded
grid up to the crop resolution. Baseline integration modes replace the
masked blend with addition (add) or channel concatenation (cat); compressed
mode reuses the third attribute level for all later stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn

from .config import PipelineConfig
from .errors import ConfigError
from .norms import SyncableBatchNorm2d


class IntegrationMode(str, Enum):
    AAD = "aad"
    ADD = "add"
    CAT = "cat"
    COMPRESSED = "compressed"

    @property
    def uses_mask(self) -> bool:
        return self in (IntegrationMode.AAD, IntegrationMode.COMPRESSED)


@dataclass
class MaskStack:
    """Attention masks captured from every AAD layer during one forward."""

    levels: list[torch.Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __getitem__(self, idx: int) -> torch.Tensor:
        return self.levels[idx]


def blend(attr_act: torch.Tensor, id_act: torch.Tensor, mask) -> torch.Tensor:
    """Mask-weighted combination: (1 - mask) * attr + mask * id."""
    return (1.0 - mask) * attr_act + mask * id_act


class AADLayer(nn.Module):
    """One denormalization unit; see module docstring for the math.

    `mask_override` is a test hook: setting it to a float or tensor clamps
    the attention mask for the next forward passes.
    """

    def __init__(
        self,
        channels: int,
        attr_channels: int,
        id_dim: int,
        *,
        mode: IntegrationMode = IntegrationMode.AAD,
        per_channel_mask: bool = False,
        norm: str = "batch",
    ):
        super().__init__()
        self.channels = channels
        self.mode = mode
        if norm == "batch":
            self.norm = SyncableBatchNorm2d(channels, affine=False)
        elif norm == "instance":
            self.norm = nn.InstanceNorm2d(channels, affine=False)
        else:
            raise ConfigError(f"unknown aad norm {norm!r}")
        self.conv_gamma_att = nn.Conv2d(attr_channels, channels, 3, padding=1)
        self.conv_beta_att = nn.Conv2d(attr_channels, channels, 3, padding=1)
        self.fc_gamma_id = nn.Linear(id_dim, channels)
        self.fc_beta_id = nn.Linear(id_dim, channels)
        if mode.uses_mask:
            mask_ch = channels if per_channel_mask else 1
            self.conv_mask = nn.Conv2d(channels, mask_ch, 3, padding=1)
            # zero bias: the sigmoid starts at 0.5, balancing both branches
            nn.init.zeros_(self.conv_mask.bias)
        else:
            self.conv_mask = None
        self.mask_override = None

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.mode is IntegrationMode.CAT else self.channels

    def forward(
        self, h: torch.Tensor, z_att: torch.Tensor, z_id: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        if z_att.shape[-2:] != h.shape[-2:]:
            raise ConfigError(
                f"attribute map spatial size {tuple(z_att.shape[-2:])} does not "
                f"match activation {tuple(h.shape[-2:])}"
            )
        h_bar = self.norm(h)
        attr_act = self.conv_gamma_att(z_att) * h_bar + self.conv_beta_att(z_att)
        gamma_id = self.fc_gamma_id(z_id)[:, :, None, None]
        beta_id = self.fc_beta_id(z_id)[:, :, None, None]
        id_act = gamma_id * h_bar + beta_id

        if self.mode is IntegrationMode.ADD:
            return attr_act + id_act, None
        if self.mode is IntegrationMode.CAT:
            return torch.cat([attr_act, id_act], dim=1), None
        if self.mask_override is not None:
            mask = torch.as_tensor(self.mask_override, dtype=h.dtype)
        else:
            mask = torch.sigmoid(self.conv_mask(h_bar))
        return blend(attr_act, id_act, mask), mask


class AADResBlock(nn.Module):
    """Residual block: two AAD->act->conv units, AAD-conditioned skip when
    the channel count changes, identity skip otherwise."""

    def __init__(
        self,
        c_in: int,
        c_out: int,
        attr_channels: int,
        id_dim: int,
        *,
        mode: IntegrationMode = IntegrationMode.AAD,
        per_channel_mask: bool = False,
        norm: str = "batch",
    ):
        super().__init__()
        self.c_in = c_in
        self.c_out = c_out
        kw = dict(mode=mode, per_channel_mask=per_channel_mask, norm=norm)
        self.aad1 = AADLayer(c_in, attr_channels, id_dim, **kw)
        self.conv1 = nn.Conv2d(self.aad1.out_channels, c_in, 3, padding=1)
        self.aad2 = AADLayer(c_in, attr_channels, id_dim, **kw)
        self.conv2 = nn.Conv2d(self.aad2.out_channels, c_out, 3, padding=1)
        if c_in != c_out:
            self.aad_skip = AADLayer(c_in, attr_channels, id_dim, **kw)
            self.conv_skip = nn.Conv2d(self.aad_skip.out_channels, c_out, 3, padding=1)
        else:
            self.aad_skip = None
            self.conv_skip = None
        self.act = nn.LeakyReLU(0.1)

    @property
    def num_aad_layers(self) -> int:
        return 2 if self.aad_skip is None else 3

    def forward(
        self,
        h: torch.Tensor,
        z_att: torch.Tensor,
        z_id: torch.Tensor,
        mask_sink: list | None = None,
    ) -> torch.Tensor:
        def run(aad, conv, x):
            out, mask = aad(x, z_att, z_id)
            if mask_sink is not None and mask is not None:
                mask_sink.append(mask)
            return conv(self.act(out))

        main = run(self.aad1, self.conv1, h)
        main = run(self.aad2, self.conv2, main)
        skip = h if self.aad_skip is None else run(self.aad_skip, self.conv_skip, h)
        return main + skip


class AADGenerator(nn.Module):
    """Cascade of AAD residual blocks from the coarse grid to the crop size.

    The identity embedding seeds the first activation through a linear map;
    each stage k consumes attribute level k (compressed mode: level 3,
    resized, for k > 3) and is followed by 2x nearest-neighbor upsampling,
    except the last. A final convolution with tanh produces the image.
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        self.mode = IntegrationMode(config.integration_mode)
        layer_mode = (
            IntegrationMode.AAD if self.mode is IntegrationMode.COMPRESSED else self.mode
        )
        self.n_stages = config.n_attr_levels
        self.coarse_grid = config.coarse_grid
        self.initial_channels = config.gen_initial_channels
        attr_chs = config.generator_attr_channels()
        self.fc = nn.Linear(
            config.identity_dim,
            config.gen_initial_channels * self.coarse_grid**2,
        )
        blocks = []
        c_in = config.gen_initial_channels
        for k in range(self.n_stages):
            blocks.append(
                AADResBlock(
                    c_in,
                    config.gen_channels[k],
                    attr_chs[k],
                    config.identity_dim,
                    mode=layer_mode,
                    per_channel_mask=config.per_channel_mask,
                    norm=config.aad_norm,
                )
            )
            c_in = config.gen_channels[k]
        self.blocks = nn.ModuleList(blocks)
        self.out_conv = nn.Conv2d(config.gen_channels[-1], 3, 3, padding=1)

    @property
    def num_aad_layers(self) -> int:
        return sum(b.num_aad_layers for b in self.blocks)

    def forward(
        self, z_id: torch.Tensor, z_att: list[torch.Tensor]
    ) -> tuple[torch.Tensor, MaskStack]:
        if len(z_att) != self.n_stages:
            raise ConfigError(
                f"generator has {self.n_stages} stages but got "
                f"{len(z_att)} attribute levels"
            )
        n = z_id.shape[0]
        h = self.fc(z_id).view(n, self.initial_channels, self.coarse_grid, self.coarse_grid)
        masks: list[torch.Tensor] = []
        sink = masks if self.mode.uses_mask else None
        for k, block in enumerate(self.blocks):
            if self.mode is IntegrationMode.COMPRESSED and k > 2:
                za = F.interpolate(
                    z_att[2], size=h.shape[-2:], mode="bilinear", align_corners=False
                )
            else:
                za = z_att[k]
            h = block(h, za, z_id, mask_sink=sink)
            if k < self.n_stages - 1:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        image = torch.tanh(self.out_conv(h))
        return image, MaskStack(masks)


class AEINet(nn.Module):
    """Stage one: identity adapter + attribute encoder + AAD generator.

    The identity adapter is frozen; only the attribute encoder and the
    generator train.
    """

    def __init__(self, config: PipelineConfig, identity_adapter: nn.Module):
        super().__init__()
        from .encoders import AttributeEncoder  # local import avoids a cycle

        self.attribute_encoder = AttributeEncoder(config)
        self.generator = AADGenerator(config)
        self.identity_adapter = identity_adapter

    def trainable_modules(self) -> list[nn.Module]:
        return [self.attribute_encoder, self.generator]

    def forward(
        self, x_source: torch.Tensor, x_target: torch.Tensor
    ) -> tuple[torch.Tensor, MaskStack]:
        z_id = self.identity_adapter(x_source)
        z_att = self.attribute_encoder(x_target)
        return self.generator(z_id, z_att)

    @torch.no_grad()
    def swap(self, x_source: torch.Tensor, x_target: torch.Tensor) -> torch.Tensor:
        was_training = self.training
        self.eval()
        try:
            image, _ = self.forward(x_source, x_target)
        finally:
            self.train(was_training)
        return image


@torch.no_grad()
def extract_masks(
    aei: AEINet, x_source: torch.Tensor, x_target: torch.Tensor
) -> MaskStack:
    """Capture every attention mask of a forward pass, upsampled to a common
    size for visualization (brighter = more identity weight)."""
    if not aei.generator.mode.uses_mask:
        raise ConfigError(
            f"integration mode {aei.generator.mode.value!r} has no attention masks"
        )
    was_training = aei.training
    aei.eval()
    try:
        _, masks = aei(x_source, x_target)
    finally:
        aei.train(was_training)
    size = x_target.shape[-2:]
    upsampled = [
        F.interpolate(m, size=size, mode="bilinear", align_corners=False)
        for m in masks
    ]
    return MaskStack(upsampled)
