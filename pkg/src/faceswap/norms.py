"""Batch normalization with optional cross-worker statistics gathering.

Training-mode statistics are per-channel moments of the whole mini-batch.
When a StatsSyncGroup is active (see training.sharded_step), each worker
contributes its shard's partial sums and every worker normalizes with the
joint moments, so a sharded step reproduces the concatenated-batch step.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import torch
from torch import nn

_TLS = threading.local()


def _active_group():
    return getattr(_TLS, "group", None)


@contextmanager
def stats_sync(group: "StatsSyncGroup", rank: int):
    """Route batch-norm statistics through `group` for the calling thread."""
    _TLS.group = group
    _TLS.rank = rank
    _TLS.counter = itertools.count()
    try:
        yield
    finally:
        _TLS.group = None
        _TLS.rank = None
        _TLS.counter = None


class StatsSyncGroup:
    """Reduces per-shard (count, sum, sum-of-squares) into joint moments.

    Worker threads arrive at reduce() in lockstep (all replicas execute the
    same layer sequence); contributions are combined in fixed rank order so
    the result is deterministic.
    """

    def __init__(self, world_size: int):
        self.world_size = world_size
        self.barrier = threading.Barrier(world_size)
        self.lock = threading.Lock()
        self._contrib: dict[int, list] = {}
        self._results: dict[int, tuple[torch.Tensor, torch.Tensor]] = {}

    def reduce(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        key = next(_TLS.counter)
        rank = _TLS.rank
        count = x.shape[0] * x.shape[2] * x.shape[3]
        local = (count, x.sum(dim=(0, 2, 3)), (x * x).sum(dim=(0, 2, 3)))
        with self.lock:
            slots = self._contrib.setdefault(key, [None] * self.world_size)
            slots[rank] = local
        self.barrier.wait()
        if rank == 0:
            slots = self._contrib.pop(key)
            total = sum(c for c, _, _ in slots)
            sum_x = slots[0][1]
            sum_sq = slots[0][2]
            for _, s, ss in slots[1:]:
                sum_x = sum_x + s
                sum_sq = sum_sq + ss
            mean = sum_x / total
            var = torch.clamp(sum_sq / total - mean * mean, min=0.0)
            self._results[key] = (mean, var)
        self.barrier.wait()
        mean, var = self._results[key]
        self.barrier.wait()
        if rank == 0:
            self._results.pop(key)
        return mean, var


class SyncableBatchNorm2d(nn.Module):
    """BatchNorm2d with mini-batch moments and optional stats gathering.

    Normalization uses biased variance both in training and for the running
    buffers, so train/eval statistics share one convention.
    """

    def __init__(
        self,
        num_features: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        affine: bool = True,
    ):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        if affine:
            self.weight = nn.Parameter(torch.ones(num_features))
            self.bias = nn.Parameter(torch.zeros(num_features))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)
        self.register_buffer("running_mean", torch.zeros(num_features))
        self.register_buffer("running_var", torch.ones(num_features))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ValueError(f"expected (N, C, H, W) input, got dim {x.dim()}")
        if x.shape[1] != self.num_features:
            raise ValueError(
                f"expected {self.num_features} channels, got {x.shape[1]}"
            )
        if self.training:
            if x.shape[0] < 2:
                raise ValueError(
                    "batch statistics are undefined for batch size 1 in "
                    "training mode"
                )
            group = _active_group()
            if group is not None:
                mean, var = group.reduce(x)
                update = _TLS.rank == 0
            else:
                mean = x.mean(dim=(0, 2, 3))
                var = x.var(dim=(0, 2, 3), unbiased=False)
                update = True
            if update:
                with torch.no_grad():
                    self.running_mean.mul_(1 - self.momentum).add_(
                        self.momentum * mean.detach()
                    )
                    self.running_var.mul_(1 - self.momentum).add_(
                        self.momentum * var.detach()
                    )
        else:
            mean = self.running_mean
            var = self.running_var
        shape = (1, -1, 1, 1)
        out = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + self.eps)
        if self.affine:
            out = out * self.weight.view(shape) + self.bias.view(shape)
        return out

    def extra_repr(self) -> str:
        return f"{self.num_features}, eps={self.eps}, affine={self.affine}"
