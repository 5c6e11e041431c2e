"""Image I/O and range conversions.

Images travel through the pipeline as float32 tensors shaped (N, 3, H, W)
with values in [-1, 1]. On disk they are 8-bit PNGs; the conversion is
v = pixel / 127.5 - 1.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import DataError


def uint8_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) uint8 RGB -> (1, 3, H, W) float32 in [-1, 1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected HxWx3 image, got shape {image.shape}")
    arr = image.astype(np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr).permute(2, 0, 1).unsqueeze(0).contiguous()


def tensor_to_uint8(tensor: torch.Tensor) -> np.ndarray:
    """(1, 3, H, W) or (3, H, W) tensor in [-1, 1] -> (H, W, 3) uint8 RGB."""
    if tensor.dim() == 4:
        if tensor.shape[0] != 1:
            raise DataError("tensor_to_uint8 expects a single image")
        tensor = tensor[0]
    arr = tensor.detach().cpu().float().numpy()
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def load_image(path: str | Path) -> torch.Tensor:
    """Read an image file as a (1, 3, H, W) tensor in [-1, 1]."""
    data = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if data is None:
        raise DataError(f"unreadable image: {path}")
    rgb = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
    return uint8_to_tensor(rgb)


def save_image(path: str | Path, tensor: torch.Tensor) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rgb = tensor_to_uint8(tensor)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise DataError(f"failed to write image: {path}")


def save_heatmap(path: str | Path, values: torch.Tensor) -> None:
    """Write a single-channel magnitude map as a colormapped PNG.

    Values are scaled by the map's own maximum, so the output shows relative
    structure rather than absolute magnitude.
    """
    if values.dim() == 4:
        values = values[0]
    if values.shape[0] > 1:
        values = values.abs().mean(dim=0, keepdim=True)
    arr = values[0].detach().cpu().float().numpy()
    arr = np.abs(arr)
    peak = float(arr.max())
    if peak > 0:
        arr = arr / peak
    gray = np.round(arr * 255.0).astype(np.uint8)
    colored = cv2.applyColorMap(gray, cv2.COLORMAP_INFERNO)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), colored):
        raise DataError(f"failed to write heatmap: {path}")


def save_grid(
    path: str | Path,
    images: list[torch.Tensor],
    ncol: int = 4,
    pad: int = 2,
) -> None:
    """Tile images (each (1,3,H,W) or (3,H,W), same size) into one PNG."""
    if not images:
        raise DataError("empty image list for grid")
    tiles = [tensor_to_uint8(img) for img in images]
    h, w = tiles[0].shape[:2]
    ncol = max(1, min(ncol, len(tiles)))
    nrow = (len(tiles) + ncol - 1) // ncol
    canvas = np.full(
        (nrow * (h + pad) - pad, ncol * (w + pad) - pad, 3), 255, dtype=np.uint8
    )
    for idx, tile in enumerate(tiles):
        r, c = divmod(idx, ncol)
        y, x = r * (h + pad), c * (w + pad)
        canvas[y : y + h, x : x + w] = tile
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(canvas, cv2.COLOR_RGB2BGR)):
        raise DataError(f"failed to write grid: {path}")


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """PSNR in dB between two [-1, 1] images, computed on the [0, 1] scale."""
    if a.shape != b.shape:
        raise DataError(f"psnr shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = torch.mean(((a - b) * 0.5) ** 2).item()
    if mse == 0:
        return float("inf")
    return -10.0 * float(np.log10(mse))
