"""Pipeline configuration: architecture, loss, optimizer, and data settings.

A single PipelineConfig drives every module. Presets:

* ``paper_config()``  -- 256x256 crops, 8 attribute levels, full channel
  schedules. This is the reference configuration; it is far too heavy to
  train in CI and exists so shapes and defaults are pinned.
* ``desk_config()``   -- 64x64 crops, 6 levels, quartered channels, batch 8,
  single worker. Used by the acceptance suite.
* ``tiny_config()``   -- 32x32 smoke-test scale for fast unit tests.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

INTEGRATION_MODES = ("aad", "add", "cat", "compressed")


@dataclass
class LossWeights:
    """Weights for the stage-one total loss (adversarial term has weight 1)."""

    lambda_att: float = 10.0
    lambda_id: float = 5.0
    lambda_rec: float = 10.0


@dataclass
class OptimizerSettings:
    lr: float = 0.0004
    beta1: float = 0.0
    beta2: float = 0.999


@dataclass
class OccluderSettings:
    """Transform ranges for synthetic occlusion augmentation.

    Declared defaults: rotation +-60 degrees, occluder width 0.2-0.6 of the
    crop width, color matching blended at strength 0.7.
    """

    rotation_range: tuple[float, float] = (-60.0, 60.0)
    scale_range: tuple[float, float] = (0.2, 0.6)
    color_match_strength: float = 0.7


@dataclass
class PipelineConfig:
    # Geometry
    crop_size: int = 256
    n_attr_levels: int = 8
    identity_dim: int = 512

    # Architecture
    attr_encoder_channels: list[int] = field(
        default_factory=lambda: [32, 64, 128, 256, 512, 512, 512]
    )
    gen_initial_channels: int = 512
    gen_channels: list[int] = field(
        default_factory=lambda: [512, 512, 512, 256, 128, 64, 32, 3]
    )
    integration_mode: str = "aad"
    per_channel_mask: bool = False
    aad_norm: str = "batch"  # "instance" is the batch-size-1 fallback
    hear_depth: int = 5
    hear_channels: list[int] = field(
        default_factory=lambda: [64, 128, 256, 512, 512]
    )
    disc_scales: int = 3
    disc_layers: int = 4
    disc_base_channels: int = 64

    # Identity encoder plug-ins ("toy" or "external:<path>"); the eval
    # encoder must be an independent model from the training one.
    identity_encoder: str = "toy"
    eval_identity_encoder: str = "toy"
    identity_encoder_seed: int = 101
    eval_identity_encoder_seed: int = 202

    # Losses
    loss_weights: LossWeights = field(default_factory=LossWeights)
    loss_reduction: str = "sum"  # "sum" (paper-weight convention) or "mean"

    # Optimization
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)
    batch_size: int = 8
    steps_aei: int = 500_000
    steps_hear: int = 50_000
    p_cross_aei: float = 0.8
    p_cross_hear: float = 0.5
    seed: int = 0

    # Data pipeline
    allow_center_crop_fallback: bool = False
    occluder: OccluderSettings = field(default_factory=OccluderSettings)
    occlusion_prob: float = 0.5
    occlude_target_only: bool = True

    # Stage-two data selection
    top_error_fraction: float = 0.10

    # Harness
    checkpoint_every: int = 1000
    psnr_check_every: int = 250
    stop_at_psnr: float | None = None

    # Evaluation
    pca_components: int = 512

    def __post_init__(self) -> None:
        self.validate()

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        if self.crop_size <= 0:
            raise ConfigError(f"crop_size must be positive, got {self.crop_size}")
        level_div = 2 ** (self.n_attr_levels - 1)
        if self.crop_size % level_div != 0:
            raise ConfigError(
                f"crop_size {self.crop_size} not divisible by "
                f"2^(n_attr_levels-1) = {level_div}"
            )
        hear_div = 2**self.hear_depth
        if self.crop_size % hear_div != 0:
            raise ConfigError(
                f"crop_size {self.crop_size} not divisible by "
                f"2^hear_depth = {hear_div}"
            )
        if len(self.attr_encoder_channels) != self.n_attr_levels - 1:
            raise ConfigError(
                f"attr_encoder_channels needs {self.n_attr_levels - 1} entries "
                f"(one per downsample), got {len(self.attr_encoder_channels)}"
            )
        if len(self.gen_channels) != self.n_attr_levels:
            raise ConfigError(
                f"gen_channels needs {self.n_attr_levels} entries "
                f"(one stage per attribute level), got {len(self.gen_channels)}"
            )
        if len(self.hear_channels) != self.hear_depth:
            raise ConfigError(
                f"hear_channels needs {self.hear_depth} entries, "
                f"got {len(self.hear_channels)}"
            )
        if self.integration_mode not in INTEGRATION_MODES:
            raise ConfigError(
                f"integration_mode must be one of {INTEGRATION_MODES}, "
                f"got {self.integration_mode!r}"
            )
        if self.integration_mode == "compressed" and self.n_attr_levels < 4:
            raise ConfigError("compressed mode needs at least 4 attribute levels")
        if self.aad_norm not in ("batch", "instance"):
            raise ConfigError(f"aad_norm must be batch|instance, got {self.aad_norm!r}")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError(
                f"loss_reduction must be sum|mean, got {self.loss_reduction!r}"
            )
        for name in ("p_cross_aei", "p_cross_hear", "occlusion_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        if not 0.0 < self.top_error_fraction <= 1.0:
            raise ConfigError(
                f"top_error_fraction must lie in (0, 1], got {self.top_error_fraction}"
            )
        w = self.loss_weights
        if min(w.lambda_att, w.lambda_id, w.lambda_rec) < 0:
            raise ConfigError("loss weights must be nonnegative")

    # -- derived schedules -------------------------------------------------

    @property
    def coarse_grid(self) -> int:
        """Spatial size of the coarsest attribute level / generator input."""
        return self.crop_size // 2 ** (self.n_attr_levels - 1)

    def attr_level_channels(self) -> list[int]:
        """Channel count of each attribute level, coarsest first.

        Level 1 is the U-Net bottleneck; intermediate levels carry the
        upsampled decoder map concatenated with the mirror encoder skip
        (hence doubled channels); the final level has no skip.
        """
        enc = self.attr_encoder_channels
        levels = [enc[-1]]
        for i in range(len(enc) - 2, -1, -1):
            levels.append(2 * enc[i])
        levels.append(enc[0])
        return levels

    def attr_level_grids(self) -> list[int]:
        return [self.coarse_grid * 2**k for k in range(self.n_attr_levels)]

    def generator_attr_channels(self) -> list[int]:
        """Attribute channels seen by each generator stage.

        In compressed mode, stages beyond the third receive a resized copy of
        the third-level embedding instead of their own level.
        """
        levels = self.attr_level_channels()
        if self.integration_mode == "compressed":
            return levels[:3] + [levels[2]] * (self.n_attr_levels - 3)
        return levels

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data)
        try:
            if "loss_weights" in data:
                data["loss_weights"] = LossWeights(**data["loss_weights"])
            if "optimizer" in data:
                data["optimizer"] = OptimizerSettings(**data["optimizer"])
            if "occluder" in data:
                occ = dict(data["occluder"])
                for key in ("rotation_range", "scale_range"):
                    if key in occ:
                        occ[key] = tuple(occ[key])
                data["occluder"] = OccluderSettings(**occ)
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad config field: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparsable config file {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        return cls.from_dict(data)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    """Recursively convert tuples to lists so YAML/JSON round-trips cleanly."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def apply_overrides(config: PipelineConfig, overrides: list[str]) -> PipelineConfig:
    """Apply ``key=value`` overrides (dotted keys reach nested fields).

    Values are parsed as YAML, so ``--set loss_weights.lambda_id=2.5`` and
    ``--set gen_channels=[64,32,3]`` both work.
    """
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"unparsable override value {raw!r}: {exc}") from exc
        node = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config field: {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config field: {key!r}")
        node[parts[-1]] = value
    return PipelineConfig.from_dict(data)


def paper_config(**overrides) -> PipelineConfig:
    return dataclasses.replace(PipelineConfig(), **overrides)


def desk_config(**overrides) -> PipelineConfig:
    """64x64 desk-scale preset: quartered channels, 6 attribute levels."""
    base = dict(
        crop_size=64,
        n_attr_levels=6,
        identity_dim=128,
        attr_encoder_channels=[8, 16, 32, 64, 128],
        gen_initial_channels=128,
        gen_channels=[128, 128, 64, 32, 16, 3],
        hear_channels=[16, 32, 64, 128, 128],
        disc_base_channels=16,
        disc_layers=3,
        batch_size=8,
        steps_aei=10_000,
        steps_hear=2_000,
        checkpoint_every=500,
    )
    base.update(overrides)
    return PipelineConfig(**base)


def tiny_config(**overrides) -> PipelineConfig:
    """32x32 smoke-test preset for fast unit tests."""
    base = dict(
        crop_size=32,
        n_attr_levels=5,
        identity_dim=32,
        attr_encoder_channels=[4, 8, 16, 32],
        gen_initial_channels=32,
        gen_channels=[32, 16, 8, 8, 3],
        hear_depth=5,
        hear_channels=[4, 8, 8, 16, 16],
        disc_base_channels=8,
        disc_layers=2,
        batch_size=4,
        steps_aei=50,
        steps_hear=20,
        checkpoint_every=25,
    )
    base.update(overrides)
    return PipelineConfig(**base)
