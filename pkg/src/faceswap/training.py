"""Two-stage training harness.

Stage one alternates discriminator and generator steps over identity/attr
pairs (cross-pair ratio 0.8); stage two trains the refiner on the top
heuristic-error subset with synthetic occlusions (cross ratio 0.5), with the
whole stage-one network frozen. Fixed seeds, explicit RNG state in
checkpoints, and single-worker sampling make runs bit-reproducible.
"""

from __future__ import annotations

import json
import random
import threading
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    checkpoint_config,
    load_checkpoint,
    load_module_state,
    save_checkpoint,
)
from .config import PipelineConfig
from .data import FaceSample, OccluderAsset, TrainingPair, sample_pair, synthesize_occlusion
from .discriminator import MultiScaleDiscriminator
from .encoders import adapter_from_blob, adapter_to_blob
from .errors import CheckpointError, ConfigError, DataError, NumericError
from .generator import AEINet
from .imgio import psnr
from .losses import (
    Stage1Losses,
    aei_total_loss,
    attribute_loss,
    hinge_d_loss,
    hinge_g_loss,
    identity_loss,
    reconstruction_loss,
)
from .norms import StatsSyncGroup, stats_sync
from .refiner import RefinerUNet, hear_losses, heuristic_error, refine


def seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)


class MetricsLogger:
    """One JSON record per line, flushed per step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("a")

    def log(self, record: dict) -> None:
        self._handle.write(json.dumps(record) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()


def stack_pairs(pairs: list[TrainingPair]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x_s = torch.cat([p.source.image for p in pairs], dim=0)
    x_t = torch.cat([p.target.image for p in pairs], dim=0)
    is_same = torch.tensor([p.is_same for p in pairs], dtype=torch.bool)
    return x_s, x_t, is_same


@torch.no_grad()
def mean_reconstruction_psnr(
    aei: AEINet, samples: list[FaceSample], batch_size: int = 16
) -> float:
    """Mean PSNR of own-identity reconstructions over a sample list."""
    was_training = aei.training
    aei.eval()
    try:
        values = []
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            x = torch.cat([s.image for s in chunk], dim=0)
            recon, _ = aei(x, x)
            for i in range(x.shape[0]):
                values.append(psnr(recon[i], x[i]))
    finally:
        aei.train(was_training)
    return float(np.mean(values))


class Stage1Trainer:
    """Alternating D/G optimization of the stage-one network."""

    def __init__(
        self,
        config: PipelineConfig,
        dataset: list[FaceSample],
        identity_adapter: torch.nn.Module,
        run_dir: str | Path | None = None,
        _seed: bool = True,
    ):
        if not dataset:
            raise DataError("stage-one training needs a nonempty dataset")
        self.config = config
        self.dataset = dataset
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if _seed:
            seed_everything(config.seed)
        self.aei = AEINet(config, identity_adapter)
        self.disc = MultiScaleDiscriminator(config)
        opt = config.optimizer
        betas = (opt.beta1, opt.beta2)
        gen_params = [
            p for m in self.aei.trainable_modules() for p in m.parameters()
        ]
        self.opt_g = torch.optim.Adam(gen_params, lr=opt.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.disc.parameters(), lr=opt.lr, betas=betas)
        self.pair_rng = np.random.default_rng(config.seed)
        self.step = 0
        self.logger = (
            MetricsLogger(self.run_dir / "metrics.jsonl") if self.run_dir else None
        )

    # -- data -------------------------------------------------------------

    def sample_batch(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        pairs = [
            sample_pair(self.dataset, self.config.p_cross_aei, self.pair_rng)
            for _ in range(self.config.batch_size)
        ]
        return stack_pairs(pairs)

    # -- optimization -------------------------------------------------------

    def train_step(self, batch) -> dict:
        x_s, x_t, is_same = batch
        self.aei.train()
        self.disc.train()
        with torch.no_grad():
            z_id_src = self.aei.identity_adapter(x_s)
        z_att_t = self.aei.attribute_encoder(x_t)
        y_hat, _ = self.aei.generator(z_id_src, z_att_t)

        d_loss = hinge_d_loss(self.disc(x_t), self.disc(y_hat.detach()))
        if not bool(torch.isfinite(d_loss)):
            raise NumericError("non-finite discriminator loss")
        self.opt_d.zero_grad()
        d_loss.backward()
        self.opt_d.step()

        parts = Stage1Losses(
            adv=hinge_g_loss(self.disc(y_hat)),
            att=attribute_loss(
                self.aei.attribute_encoder(y_hat), z_att_t, self.config.loss_reduction
            ),
            id=identity_loss(self.aei.identity_adapter(y_hat), z_id_src),
            rec=reconstruction_loss(y_hat, x_t, is_same, self.config.loss_reduction),
        )
        total = aei_total_loss(parts, self.config.loss_weights)
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()

        return {
            "step": self.step + 1,
            "adv_d": float(d_loss.item()),
            "adv_g": float(parts.adv.item()),
            "att": float(parts.att.item()),
            "id": float(parts.id.item()),
            "rec": float(parts.rec.item()),
            "total": float(total.item()),
        }

    def train(self, total_steps: int | None = None) -> list[dict]:
        """Run until the global step counter reaches total_steps."""
        target = total_steps if total_steps is not None else self.config.steps_aei
        records = []
        while self.step < target:
            record = self.train_step(self.sample_batch())
            self.step += 1
            if self.logger:
                self.logger.log(record)
            records.append(record)
            if self.run_dir and self.step % self.config.checkpoint_every == 0:
                self.save()
            stop_psnr = self.config.stop_at_psnr
            if stop_psnr is not None and self.step % self.config.psnr_check_every == 0:
                current = mean_reconstruction_psnr(self.aei, self.dataset)
                if current >= stop_psnr:
                    break
        if self.run_dir:
            self.save()
        return records

    # -- persistence --------------------------------------------------------

    def payload(self) -> dict:
        return {
            "stage": "aei",
            "config": self.config.to_dict(),
            "modules": {
                "attribute_encoder": self.aei.attribute_encoder.state_dict(),
                "generator": self.aei.generator.state_dict(),
                "discriminator": self.disc.state_dict(),
            },
            "identity_adapter": adapter_to_blob(self.aei.identity_adapter),
            "optimizers": {
                "generator": self.opt_g.state_dict(),
                "discriminator": self.opt_d.state_dict(),
            },
            "rng": {
                "torch": torch.get_rng_state(),
                "pair": self.pair_rng.bit_generator.state,
                "python": random.getstate(),
            },
        }

    def save(self, directory: str | Path | None = None) -> Path:
        if directory is None:
            if self.run_dir is None:
                raise CheckpointError("no run directory configured for saving")
            directory = self.run_dir / "checkpoints"
        return save_checkpoint(Path(directory), self.step, self.payload())

    @classmethod
    def restore(
        cls,
        checkpoint_path: str | Path,
        dataset: list[FaceSample],
        run_dir: str | Path | None = None,
    ) -> "Stage1Trainer":
        payload = load_checkpoint(checkpoint_path)
        if payload.get("stage") != "aei":
            raise CheckpointError("not a stage-one checkpoint")
        config = checkpoint_config(payload)
        adapter = adapter_from_blob(payload["identity_adapter"])
        trainer = cls(config, dataset, adapter, run_dir=run_dir, _seed=False)
        load_module_state(trainer.aei.attribute_encoder, payload, "attribute_encoder")
        load_module_state(trainer.aei.generator, payload, "generator")
        load_module_state(trainer.disc, payload, "discriminator")
        trainer.opt_g.load_state_dict(payload["optimizers"]["generator"])
        trainer.opt_d.load_state_dict(payload["optimizers"]["discriminator"])
        trainer.step = payload["step"]
        _restore_rng(payload["rng"], trainer.pair_rng)
        return trainer


def _restore_rng(state: dict, pair_rng: np.random.Generator) -> None:
    torch.set_rng_state(torch.as_tensor(state["torch"], dtype=torch.uint8))
    pair_rng.bit_generator.state = state["pair"]
    if "python" in state:
        random.setstate(_as_random_state(state["python"]))


def _as_random_state(state) -> tuple:
    # json/torch round-trips turn the random.getstate() tuple into lists
    return (state[0], tuple(state[1]), state[2])


def build_aei_from_checkpoint(checkpoint_path: str | Path) -> tuple[AEINet, PipelineConfig]:
    """Reconstruct a frozen inference AEI network from a stage-one checkpoint."""
    payload = load_checkpoint(checkpoint_path)
    if payload.get("stage") != "aei":
        raise CheckpointError("not a stage-one checkpoint")
    config = checkpoint_config(payload)
    adapter = adapter_from_blob(payload["identity_adapter"])
    aei = AEINet(config, adapter)
    load_module_state(aei.attribute_encoder, payload, "attribute_encoder")
    load_module_state(aei.generator, payload, "generator")
    freeze(aei)
    return aei, config


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def select_top_error_subset(
    dataset: list[FaceSample], aei: AEINet, fraction: float = 0.10
) -> list[FaceSample]:
    """Keep the samples with the largest mean absolute heuristic error.

    Images are scored one at a time so the ranking is bit-stable regardless
    of batching; ties keep dataset order. The subset size is
    max(1, round(fraction * len(dataset))).
    """
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if not dataset:
        raise DataError("cannot select from an empty dataset")
    scores = []
    for sample in dataset:
        delta = heuristic_error(sample.image, aei)
        scores.append(float(delta.abs().mean().item()))
    order = sorted(range(len(dataset)), key=lambda i: (-scores[i], i))
    keep = max(1, int(round(fraction * len(dataset))))
    return [dataset[i] for i in sorted(order[:keep])]


class Stage2Trainer:
    """Refiner training against a frozen stage-one network."""

    def __init__(
        self,
        config: PipelineConfig,
        subset: list[FaceSample],
        aei: AEINet,
        occluders: list[OccluderAsset],
        run_dir: str | Path | None = None,
        _seed: bool = True,
    ):
        if not subset:
            raise DataError("stage-two training needs a nonempty subset")
        self.config = config
        self.subset = subset
        self.aei = freeze(aei)
        self.occluders = occluders
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if _seed:
            seed_everything(config.seed + 1)
        self.refiner = RefinerUNet(config)
        opt = config.optimizer
        self.opt = torch.optim.Adam(
            self.refiner.parameters(), lr=opt.lr, betas=(opt.beta1, opt.beta2)
        )
        self.pair_rng = np.random.default_rng(config.seed + 1)
        self.occ_rng = np.random.default_rng(config.seed + 2)
        self.step = 0
        self.logger = (
            MetricsLogger(self.run_dir / "metrics.jsonl") if self.run_dir else None
        )

    def sample_batch(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        pairs = []
        for _ in range(self.config.batch_size):
            pair = sample_pair(self.subset, self.config.p_cross_hear, self.pair_rng)
            if self.occluders and self.occ_rng.random() < self.config.occlusion_prob:
                occluder = self.occluders[int(self.occ_rng.integers(len(self.occluders)))]
                # The truth mask is discarded: training is mask-free.
                occluded, _ = synthesize_occlusion(
                    pair.target, occluder, self.occ_rng, self.config.occluder
                )
                source = occluded if pair.is_same else (
                    pair.source if self.config.occlude_target_only else occluded
                )
                pair = TrainingPair(source=source, target=occluded, is_same=pair.is_same)
            pairs.append(pair)
        return stack_pairs(pairs)

    def train_step(self, batch) -> dict:
        x_s, x_t, is_same = batch
        delta = heuristic_error(x_t, self.aei)
        with torch.no_grad():
            y_hat = self.aei.swap(x_s, x_t)
        self.refiner.train()
        y = refine(y_hat, delta, self.refiner)
        losses = hear_losses(
            y, y_hat, x_t, x_s, is_same, self.aei.identity_adapter,
            reduction=self.config.loss_reduction,
        )
        self.opt.zero_grad()
        losses.total.backward()
        self.opt.step()
        return {
            "step": self.step + 1,
            "id": float(losses.id.item()),
            "chg": float(losses.chg.item()),
            "rec": float(losses.rec.item()),
            "total": float(losses.total.item()),
        }

    def train(self, total_steps: int | None = None) -> list[dict]:
        target = total_steps if total_steps is not None else self.config.steps_hear
        records = []
        while self.step < target:
            record = self.train_step(self.sample_batch())
            self.step += 1
            if self.logger:
                self.logger.log(record)
            records.append(record)
            if self.run_dir and self.step % self.config.checkpoint_every == 0:
                self.save()
        if self.run_dir:
            self.save()
        return records

    def payload(self) -> dict:
        return {
            "stage": "hear",
            "config": self.config.to_dict(),
            "modules": {"refiner": self.refiner.state_dict()},
            "identity_adapter": adapter_to_blob(self.aei.identity_adapter),
            "optimizers": {"refiner": self.opt.state_dict()},
            "rng": {
                "torch": torch.get_rng_state(),
                "pair": self.pair_rng.bit_generator.state,
                "occ": self.occ_rng.bit_generator.state,
                "python": random.getstate(),
            },
        }

    def save(self, directory: str | Path | None = None) -> Path:
        if directory is None:
            if self.run_dir is None:
                raise CheckpointError("no run directory configured for saving")
            directory = self.run_dir / "checkpoints"
        return save_checkpoint(Path(directory), self.step, self.payload())

    @classmethod
    def restore(
        cls,
        checkpoint_path: str | Path,
        subset: list[FaceSample],
        aei: AEINet,
        occluders: list[OccluderAsset],
        run_dir: str | Path | None = None,
    ) -> "Stage2Trainer":
        payload = load_checkpoint(checkpoint_path)
        if payload.get("stage") != "hear":
            raise CheckpointError("not a stage-two checkpoint")
        config = checkpoint_config(payload)
        trainer = cls(config, subset, aei, occluders, run_dir=run_dir, _seed=False)
        load_module_state(trainer.refiner, payload, "refiner")
        trainer.opt.load_state_dict(payload["optimizers"]["refiner"])
        trainer.step = payload["step"]
        torch.set_rng_state(torch.as_tensor(payload["rng"]["torch"], dtype=torch.uint8))
        trainer.pair_rng.bit_generator.state = payload["rng"]["pair"]
        trainer.occ_rng.bit_generator.state = payload["rng"]["occ"]
        if "python" in payload["rng"]:
            random.setstate(_as_random_state(payload["rng"]["python"]))
        return trainer


def build_refiner_from_checkpoint(checkpoint_path: str | Path) -> tuple[RefinerUNet, PipelineConfig]:
    payload = load_checkpoint(checkpoint_path)
    if payload.get("stage") != "hear":
        raise CheckpointError("not a stage-two checkpoint")
    config = checkpoint_config(payload)
    refiner = RefinerUNet(config)
    load_module_state(refiner, payload, "refiner")
    freeze(refiner)
    return refiner, config


def run_synchronized_shards(fn, shards: list) -> list:
    """Execute fn on every shard in lockstep worker threads with batch-norm
    statistics gathered across shards.

    This is the single-process stand-in for data-parallel training with
    synchronized normalization: the contract is that per-shard activations
    equal the concatenated-batch single-worker computation.
    """
    group = StatsSyncGroup(len(shards))
    results: list = [None] * len(shards)
    errors: list = [None] * len(shards)

    def worker(rank: int) -> None:
        try:
            with stats_sync(group, rank):
                results[rank] = fn(shards[rank])
        except BaseException as exc:  # propagated to the caller below
            errors[rank] = exc
            # release peers stuck at the barrier
            group.barrier.abort()

    threads = [
        threading.Thread(target=worker, args=(rank,)) for rank in range(len(shards))
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None and not isinstance(exc, threading.BrokenBarrierError):
            raise exc
    for exc in errors:
        if exc is not None:
            raise exc
    return results
