"""Self-describing checkpoint archive.

A checkpoint stores hierarchical parameter names -> arrays for every module,
optimizer state, RNG state, the step counter, and a full config snapshot.
Loading rebuilds modules from the embedded config and verifies every tensor
shape via strict state-dict loading. A run directory keeps `{step}.ckpt`
files plus a `latest` pointer file.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch

from .config import PipelineConfig
from .errors import CheckpointError

FORMAT_VERSION = 1
LATEST_POINTER = "latest"


def save_checkpoint(directory: str | Path, step: int, payload: dict) -> Path:
    """Write `{step}.ckpt` atomically and repoint `latest` at it."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = dict(payload)
    payload.setdefault("format_version", FORMAT_VERSION)
    payload["step"] = step
    name = f"{step:08d}.ckpt"
    path = directory / name
    tmp = directory / (name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)
    pointer_tmp = directory / (LATEST_POINTER + ".tmp")
    pointer_tmp.write_text(name + "\n")
    os.replace(pointer_tmp, directory / LATEST_POINTER)
    return path


def resolve_checkpoint(path: str | Path) -> Path:
    """Accept a checkpoint file or a directory holding a `latest` pointer."""
    path = Path(path)
    if path.is_dir():
        pointer = path / LATEST_POINTER
        if not pointer.exists():
            raise CheckpointError(f"no `{LATEST_POINTER}` pointer in {path}")
        name = pointer.read_text().strip()
        path = path / name
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = resolve_checkpoint(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "config" not in payload:
        raise CheckpointError(f"malformed checkpoint (no config snapshot): {path}")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format {version!r} in {path}"
        )
    return payload


def checkpoint_config(payload: dict) -> PipelineConfig:
    return PipelineConfig.from_dict(payload["config"])


def load_module_state(module: torch.nn.Module, payload: dict, name: str) -> None:
    """Strictly load one module's parameters, verifying every shape."""
    modules = payload.get("modules", {})
    if name not in modules:
        raise CheckpointError(f"checkpoint is missing module state: {name}")
    try:
        module.load_state_dict(modules[name], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{name} state does not fit the config: {exc}") from exc
