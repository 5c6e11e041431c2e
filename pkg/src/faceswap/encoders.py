"""Identity and attribute encoders.

The identity encoder is a frozen, pluggable adapter: a real deployment wraps
an externally trained face recognizer, while desk-scale runs use a small
convolutional classifier trained on the toy corpus labels and then frozen.
Either way it emits a unit-norm embedding, keeps its parameters gradient-free,
and stays differentiable with respect to its input image.

The attribute encoder is a U-Net whose decoder feature maps, coarsest first,
form the multi-level attribute embedding. It sees no annotations; it is
trained purely by the generator's losses.
"""

from __future__ import annotations

from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .config import PipelineConfig
from .errors import CheckpointError, ConfigError
from .norms import SyncableBatchNorm2d


def encode_identity(image: torch.Tensor, adapter: nn.Module) -> torch.Tensor:
    """Embed a batch of images; returns (N, C_id) unit-norm vectors."""
    return adapter(image)


class ToyIdentityEncoder(nn.Module):
    """Small convolutional embedder trained on toy identity labels.

    GroupNorm keeps the network batch-size independent, so inference is
    deterministic for any batch. The classifier head exists only for the
    pretraining phase and is not part of the embedding path.
    """

    def __init__(
        self,
        embedding_dim: int,
        n_classes: int,
        input_size: int = 64,
        base_channels: int = 16,
        descriptor: str = "toy",
    ):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.input_size = input_size
        self.descriptor = descriptor
        chs = [base_channels, base_channels * 2, base_channels * 4, base_channels * 8]
        layers: list[nn.Module] = []
        prev = 3
        for ch in chs:
            layers += [
                nn.Conv2d(prev, ch, 3, stride=2, padding=1),
                nn.GroupNorm(4, ch),
                nn.LeakyReLU(0.1),
            ]
            prev = ch
        self.features = nn.Sequential(*layers)
        self.embed = nn.Linear(prev, embedding_dim)
        self.classifier = nn.Linear(embedding_dim, n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.input_size or x.shape[-2] != self.input_size:
            x = F.interpolate(
                x, size=(self.input_size, self.input_size), mode="bilinear",
                align_corners=False,
            )
        feat = self.features(x).mean(dim=(2, 3))
        emb = self.embed(feat)
        return F.normalize(emb, dim=-1, eps=1e-8)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.forward(x))


def train_toy_identity_encoder(
    samples,
    embedding_dim: int,
    *,
    input_size: int = 64,
    seed: int = 0,
    steps: int = 400,
    batch_size: int = 16,
    lr: float = 1e-3,
    descriptor: str = "toy",
) -> ToyIdentityEncoder:
    """Fit the toy encoder on identity labels, then freeze it."""
    labels = sorted({s.source_id for s in samples})
    label_idx = {name: i for i, name in enumerate(labels)}
    images = torch.cat([s.image for s in samples], dim=0)
    targets = torch.tensor([label_idx[s.source_id] for s in samples])

    generator = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = ToyIdentityEncoder(
            embedding_dim, len(labels), input_size=input_size, descriptor=descriptor
        )
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for _ in range(steps):
        idx = torch.randint(len(samples), (batch_size,), generator=generator)
        loss = F.cross_entropy(model.logits(images[idx]), targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    return freeze_adapter(model)


def freeze_adapter(adapter: nn.Module) -> nn.Module:
    adapter.eval()
    for p in adapter.parameters():
        p.requires_grad_(False)
    return adapter


def adapter_to_blob(adapter: ToyIdentityEncoder) -> dict:
    return {
        "kind": "toy_identity_encoder",
        "embedding_dim": adapter.embedding_dim,
        "n_classes": adapter.classifier.out_features,
        "input_size": adapter.input_size,
        "base_channels": adapter.features[0].out_channels,
        "descriptor": adapter.descriptor,
        "state": adapter.state_dict(),
    }


def adapter_from_blob(blob: dict) -> ToyIdentityEncoder:
    if not isinstance(blob, dict) or blob.get("kind") != "toy_identity_encoder":
        raise CheckpointError("not an identity encoder blob")
    model = ToyIdentityEncoder(
        blob["embedding_dim"],
        blob["n_classes"],
        input_size=blob["input_size"],
        base_channels=blob["base_channels"],
        descriptor=blob.get("descriptor", "toy"),
    )
    try:
        model.load_state_dict(blob["state"])
    except RuntimeError as exc:
        raise CheckpointError(f"identity encoder state mismatch: {exc}") from exc
    return freeze_adapter(model)


def save_adapter(adapter: ToyIdentityEncoder, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(adapter_to_blob(adapter), path)


def load_adapter(path: str | Path) -> ToyIdentityEncoder:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"identity encoder checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    return adapter_from_blob(blob)


def build_identity_adapter(
    spec: str,
    config: PipelineConfig,
    *,
    corpus=None,
    seed: int = 0,
    cache_dir: str | Path | None = None,
) -> nn.Module:
    """Resolve an adapter spec: ``toy`` or ``external:<path>``.

    Toy adapters are trained on the provided corpus (and cached when a cache
    directory is given). The adapter's embedding dimension must match the
    configured identity_dim; a mismatch is a construction-time error.
    """
    if spec.startswith("external:"):
        adapter = load_adapter(spec.split(":", 1)[1])
    elif spec == "toy":
        cache_path = None
        if cache_dir is not None:
            cache_path = (
                Path(cache_dir)
                / f"toy_id_d{config.identity_dim}_s{seed}_c{config.crop_size}.pt"
            )
            if cache_path.exists():
                adapter = load_adapter(cache_path)
                _check_dim(adapter, config)
                return adapter
        if corpus is None:
            raise ConfigError("toy identity adapter needs a training corpus")
        adapter = train_toy_identity_encoder(
            corpus,
            config.identity_dim,
            input_size=config.crop_size,
            seed=seed,
            descriptor=f"toy(seed={seed})",
        )
        if cache_path is not None:
            save_adapter(adapter, cache_path)
    else:
        raise ConfigError(
            f"unknown identity encoder spec {spec!r} (use 'toy' or 'external:<path>')"
        )
    _check_dim(adapter, config)
    return adapter


def _check_dim(adapter: nn.Module, config: PipelineConfig) -> None:
    dim = getattr(adapter, "embedding_dim", None)
    if dim != config.identity_dim:
        raise ConfigError(
            f"identity adapter emits dim {dim}, config expects {config.identity_dim}"
        )


class AttributeEncoder(nn.Module):
    """U-Net producing the multi-level attribute embedding, coarsest first.

    Level 1 is the bottleneck; levels 2..n-1 are upsampled decoder maps
    concatenated with the mirror encoder skip; level n has no skip. Spatial
    size doubles per level up to the crop size.
    """

    def __init__(self, config: PipelineConfig):
        super().__init__()
        chs = config.attr_encoder_channels
        self.n_levels = config.n_attr_levels
        self.crop_size = config.crop_size
        downs = []
        prev = 3
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

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.shape[-1] != self.crop_size or x.shape[-2] != self.crop_size:
            raise ConfigError(
                f"attribute encoder expects {self.crop_size}x{self.crop_size} "
                f"input, got {tuple(x.shape[-2:])}"
            )
        skips = []
        h = x
        for down in self.downs:
            h = down(h)
            skips.append(h)
        levels = [skips[-1]]
        h = skips[-1]
        for i, up in enumerate(self.ups[:-1]):
            h = up(h)
            h = torch.cat([h, skips[-2 - i]], dim=1)
            levels.append(h)
        levels.append(self.ups[-1](h))
        return levels


def encode_attributes(image: torch.Tensor, encoder: AttributeEncoder) -> list[torch.Tensor]:
    return encoder(image)
