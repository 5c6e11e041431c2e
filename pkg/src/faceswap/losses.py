"""Stage-one losses: hinge adversarial, identity, attribute, reconstruction.

Reduction convention: losses written per sample are summed over tensor
elements within the sample and averaged over the batch ("sum" mode, the
convention under which the default weights are meaningful). "mean" mode
replaces the inner sums with per-element means for small-scale stability.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import NumericError


def hinge_d_loss(
    real_outs: list[torch.Tensor], fake_outs: list[torch.Tensor]
) -> torch.Tensor:
    """Discriminator hinge loss, averaged over scales and patches."""
    terms = [
        F.relu(1.0 - real).mean() + F.relu(1.0 + fake).mean()
        for real, fake in zip(real_outs, fake_outs, strict=True)
    ]
    return torch.stack(terms).mean()


def hinge_g_loss(fake_outs: list[torch.Tensor]) -> torch.Tensor:
    """Generator hinge loss: mean of negated fake logits."""
    return torch.stack([(-fake).mean() for fake in fake_outs]).mean()


def identity_loss(z_pred: torch.Tensor, z_src: torch.Tensor) -> torch.Tensor:
    """1 - cosine similarity, averaged over the batch; range [0, 2]."""
    cos = F.cosine_similarity(z_pred, z_src, dim=-1)
    return (1.0 - cos).mean()


def attribute_loss(
    pred_levels: list[torch.Tensor],
    tgt_levels: list[torch.Tensor],
    reduction: str = "sum",
) -> torch.Tensor:
    """Half squared L2 gap between two attribute embedding sets.

    "sum": per level, squared differences are summed over channel and space
    and averaged over the batch, then accumulated over levels. "mean" swaps
    the inner sums for means (and averages over levels).
    """
    if len(pred_levels) != len(tgt_levels):
        raise ValueError(
            f"level count mismatch: {len(pred_levels)} vs {len(tgt_levels)}"
        )
    total = None
    for pred, tgt in zip(pred_levels, tgt_levels):
        if pred.shape != tgt.shape:
            raise ValueError(
                f"level shape mismatch: {tuple(pred.shape)} vs {tuple(tgt.shape)}"
            )
        sq = (pred - tgt) ** 2
        if reduction == "sum":
            term = 0.5 * sq.sum(dim=tuple(range(1, sq.dim()))).mean()
        else:
            term = 0.5 * sq.mean()
        total = term if total is None else total + term
    if reduction == "mean":
        total = total / len(pred_levels)
    return total


def reconstruction_loss(
    y_hat: torch.Tensor,
    x_t: torch.Tensor,
    is_same: bool | torch.Tensor,
    reduction: str = "sum",
) -> torch.Tensor:
    """Gated half squared pixel L2: active only for same-source-target samples.

    `is_same` may be a scalar bool or a per-sample bool tensor for mixed
    batches. Cross samples contribute an exact 0 with zero gradient.
    """
    if y_hat.shape != x_t.shape:
        raise ValueError(
            f"shape mismatch: {tuple(y_hat.shape)} vs {tuple(x_t.shape)}"
        )
    if isinstance(is_same, bool):
        if not is_same:
            return torch.zeros((), dtype=y_hat.dtype)
        mask = torch.ones(y_hat.shape[0], dtype=y_hat.dtype)
    else:
        mask = is_same.to(y_hat.dtype)
        if not bool(mask.any()):
            return torch.zeros((), dtype=y_hat.dtype)
    sq = (y_hat - x_t) ** 2
    per_sample = sq.sum(dim=tuple(range(1, sq.dim())))
    if reduction == "mean":
        per_sample = per_sample / sq[0].numel()
    return (0.5 * per_sample * mask).mean()


@dataclass
class Stage1Losses:
    adv: torch.Tensor
    att: torch.Tensor
    id: torch.Tensor
    rec: torch.Tensor


def aei_total_loss(parts: Stage1Losses, weights: LossWeights) -> torch.Tensor:
    """Weighted stage-one total; non-finite parts abort training."""
    for name in ("adv", "att", "id", "rec"):
        value = getattr(parts, name)
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NumericError(f"non-finite stage-one loss part: {name}")
    return (
        parts.adv
        + weights.lambda_att * parts.att
        + weights.lambda_id * parts.id
        + weights.lambda_rec * parts.rec
    )
