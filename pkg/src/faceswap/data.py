"""Data pipeline: face alignment, training pairs, occlusion augmentation.

All randomness here flows through explicit seeds or numpy Generators, so
every operation is reproducible and safe to call from parallel workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .config import OccluderSettings
from .errors import AlignmentError, DataError, OcclusionError
from .imgio import uint8_to_tensor

# Widely used 5-point alignment template (left eye, right eye, nose tip,
# left mouth corner, right mouth corner) in a 112x112 frame; scaled to the
# configured crop size at use.
TEMPLATE_5PT_112 = np.array(
    [
        [38.2946, 51.6963],
        [73.5318, 51.5014],
        [56.0252, 71.7366],
        [41.5493, 92.3655],
        [70.7299, 92.2041],
    ],
    dtype=np.float64,
)

OCCLUDER_CATEGORIES = ("hand-photo", "object-render")


@dataclass
class FaceSample:
    """A single aligned face crop with optional landmarks and identity label."""

    image: torch.Tensor  # (1, 3, S, S) in [-1, 1]
    landmarks: np.ndarray | None = None  # (5, 2) pixel coords in crop frame
    source_id: str = ""

    def __post_init__(self) -> None:
        if self.image.dim() != 4 or self.image.shape[0] != 1 or self.image.shape[1] != 3:
            raise DataError(
                f"FaceSample image must be (1, 3, H, W), got {tuple(self.image.shape)}"
            )
        if self.landmarks is not None:
            self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
            if self.landmarks.shape != (5, 2):
                raise DataError(
                    f"landmarks must be (5, 2), got {self.landmarks.shape}"
                )


@dataclass
class TrainingPair:
    source: FaceSample
    target: FaceSample
    is_same: bool

    def __post_init__(self) -> None:
        if self.is_same and not torch.equal(self.source.image, self.target.image):
            raise DataError("is_same pair must carry bit-identical images")


@dataclass
class OccluderAsset:
    """RGBA occluder; rgb in [0, 1], alpha in [0, 1] with nonempty support."""

    rgba_image: np.ndarray  # (h, w, 4) float32
    category: str = "object-render"

    def __post_init__(self) -> None:
        img = np.asarray(self.rgba_image, dtype=np.float32)
        if img.ndim != 3 or img.shape[2] != 4:
            raise DataError(f"occluder must be HxWx4, got shape {img.shape}")
        alpha = img[:, :, 3]
        if alpha.min() < 0.0 or alpha.max() > 1.0:
            raise DataError("occluder alpha must lie in [0, 1]")
        if not np.any(alpha > 0):
            raise OcclusionError("occluder alpha support is empty")
        if self.category not in OCCLUDER_CATEGORIES:
            raise DataError(
                f"occluder category must be one of {OCCLUDER_CATEGORIES}, "
                f"got {self.category!r}"
            )
        self.rgba_image = img


def template_points(crop_size: int) -> np.ndarray:
    """The 5-point alignment template scaled to a crop_size frame."""
    return TEMPLATE_5PT_112 * (crop_size / 112.0)


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares similarity transform mapping src points onto dst.

    Returns the 2x3 affine matrix [sR | t]. Raises AlignmentError when the
    source points are coincident or collinear (the rotation is then
    underdetermined).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_c = src - src_mean
    dst_c = dst - dst_mean
    src_var = (src_c**2).sum() / n
    if src_var < 1e-8:
        raise AlignmentError("degenerate landmarks: points are coincident")
    cov = dst_c.T @ src_c / n
    u, s, vt = np.linalg.svd(cov)
    if s[1] <= 1e-8 * max(s[0], 1.0):
        raise AlignmentError("degenerate landmarks: points are collinear")
    d = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    flip = np.diag([1.0, d])
    rot = u @ flip @ vt
    scale = np.trace(np.diag(s) @ flip) / src_var
    matrix = np.empty((2, 3), dtype=np.float64)
    matrix[:, :2] = scale * rot
    matrix[:, 2] = dst_mean - scale * rot @ src_mean
    return matrix


def align_and_crop(
    image: np.ndarray,
    landmarks: np.ndarray | None,
    crop_size: int,
    *,
    allow_center_crop_fallback: bool = False,
    source_id: str = "",
) -> FaceSample:
    """Warp a raw image into the canonical crop frame via its 5 landmarks.

    The similarity transform maps the landmarks onto the scaled template, so
    the crop covers the whole face plus some background. With landmarks
    missing, a plain center crop is used only when the fallback flag is set.
    """
    if crop_size <= 0:
        raise DataError(f"crop_size must be positive, got {crop_size}")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"expected HxWx3 image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise DataError(f"expected uint8 image, got dtype {image.dtype}")

    if landmarks is None:
        if not allow_center_crop_fallback:
            raise AlignmentError(
                "missing landmarks and allow_center_crop_fallback is off"
            )
        crop = _center_crop(image, crop_size)
        return FaceSample(image=uint8_to_tensor(crop), landmarks=None, source_id=source_id)

    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (5, 2):
        raise AlignmentError(f"expected 5 landmarks, got shape {landmarks.shape}")
    h, w = image.shape[:2]
    if (
        landmarks[:, 0].min() < 0
        or landmarks[:, 1].min() < 0
        or landmarks[:, 0].max() > w - 1
        or landmarks[:, 1].max() > h - 1
    ):
        raise AlignmentError("landmarks fall outside the image bounds")

    matrix = _fit_similarity(landmarks, template_points(crop_size))
    warped = cv2.warpAffine(
        image,
        matrix,
        (crop_size, crop_size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_REPLICATE,
    )
    mapped = landmarks @ matrix[:, :2].T + matrix[:, 2]
    return FaceSample(image=uint8_to_tensor(warped), landmarks=mapped, source_id=source_id)


def _center_crop(image: np.ndarray, crop_size: int) -> np.ndarray:
    h, w = image.shape[:2]
    side = min(h, w)
    y0 = (h - side) // 2
    x0 = (w - side) // 2
    crop = image[y0 : y0 + side, x0 : x0 + side]
    if side != crop_size:
        crop = cv2.resize(crop, (crop_size, crop_size), interpolation=cv2.INTER_LINEAR)
    return crop


def synthesize_occlusion(
    face: FaceSample,
    occluder: OccluderAsset,
    rng_seed: int | np.random.Generator,
    settings: OccluderSettings | None = None,
) -> tuple[FaceSample, torch.Tensor]:
    """Blend a randomly transformed occluder onto a face crop.

    The occluder is rotated, rescaled to a fraction of the crop width,
    color-matched toward the face statistics, and alpha-composited at a
    random position over the central face region. Returns the occluded
    sample and the post-transform alpha-support mask (1, 1, S, S).

    The mask exists for evaluation only; training never consumes it.
    """
    settings = settings or OccluderSettings()
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    size = face.image.shape[-1]
    rgba = occluder.rgba_image
    if not np.any(rgba[:, :, 3] > 0):
        raise OcclusionError("occluder alpha support is empty")

    angle = float(rng.uniform(*settings.rotation_range))
    scale_frac = float(rng.uniform(*settings.scale_range))
    occ_h, occ_w = rgba.shape[:2]
    factor = scale_frac * size / occ_w
    if round(occ_w * factor) < 1 or round(occ_h * factor) < 1:
        raise OcclusionError(
            f"occluder scaled to zero area (factor {factor:.4f})"
        )
    # Center position constrained to the middle half of the crop so the
    # occluder always overlaps the central face region.
    cx = int(rng.integers(size // 4, size - size // 4))
    cy = int(rng.integers(size // 4, size - size // 4))

    rot = cv2.getRotationMatrix2D((occ_w / 2.0, occ_h / 2.0), angle, factor)
    rot[0, 2] += cx - occ_w / 2.0
    rot[1, 2] += cy - occ_h / 2.0
    warped = cv2.warpAffine(
        rgba,
        rot,
        (size, size),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=(0.0, 0.0, 0.0, 0.0),
    )
    alpha = warped[:, :, 3:4]
    support = alpha[:, :, 0] > 0
    if not np.any(support):
        raise OcclusionError("occluder support vanished after transform")

    face_np = face.image[0].numpy().transpose(1, 2, 0)  # (S, S, 3) in [-1, 1]
    occ_rgb = warped[:, :, :3] * 2.0 - 1.0
    occ_rgb = _match_color(
        occ_rgb, support, face_np, settings.color_match_strength
    )

    # out = face + alpha * (occ - face): exactly the face wherever alpha == 0.
    blended = face_np + alpha * (occ_rgb - face_np)
    blended = np.clip(blended, -1.0, 1.0)
    out = torch.from_numpy(blended.transpose(2, 0, 1)).unsqueeze(0).contiguous()
    mask = torch.from_numpy(support[None, None].astype(np.float32))
    occluded = FaceSample(
        image=out, landmarks=face.landmarks, source_id=face.source_id
    )
    return occluded, mask


def _match_color(
    occ_rgb: np.ndarray, support: np.ndarray, face_rgb: np.ndarray, strength: float
) -> np.ndarray:
    """Shift occluder channel statistics toward the face's, by `strength`."""
    if strength <= 0.0:
        return occ_rgb
    occ_pixels = occ_rgb[support]
    occ_mean = occ_pixels.mean(axis=0)
    occ_std = occ_pixels.std(axis=0)
    face_mean = face_rgb.reshape(-1, 3).mean(axis=0)
    face_std = face_rgb.reshape(-1, 3).std(axis=0)
    safe_std = np.maximum(occ_std, 1e-5)
    matched = (occ_rgb - occ_mean) / safe_std * face_std + face_mean
    return occ_rgb + strength * (matched - occ_rgb)


def sample_pair(
    dataset: list[FaceSample],
    p_cross: float,
    rng_seed: int | np.random.Generator,
) -> TrainingPair:
    """Draw a training pair: cross (distinct images) with probability p_cross,
    otherwise a same pair with the identical sample as source and target."""
    if not dataset:
        raise DataError("cannot sample pairs from an empty dataset")
    if not 0.0 <= p_cross <= 1.0:
        raise DataError(f"p_cross must lie in [0, 1], got {p_cross}")
    rng = (
        rng_seed
        if isinstance(rng_seed, np.random.Generator)
        else np.random.default_rng(rng_seed)
    )
    n = len(dataset)
    i = int(rng.integers(n))
    if n > 1 and rng.random() < p_cross:
        j = int((i + 1 + rng.integers(n - 1)) % n)
        return TrainingPair(source=dataset[i], target=dataset[j], is_same=False)
    return TrainingPair(source=dataset[i], target=dataset[i], is_same=True)


# -- manifests ---------------------------------------------------------------


@dataclass
class ManifestRecord:
    path: Path
    landmarks: np.ndarray | None
    identity: str


def write_manifest(path: str | Path, records: list[ManifestRecord]) -> None:
    """One JSON record per line: path, 10 landmark floats (or null), identity."""
    lines = []
    for rec in records:
        lms = None
        if rec.landmarks is not None:
            lms = [float(v) for v in np.asarray(rec.landmarks).reshape(-1)]
        lines.append(
            json.dumps(
                {"path": str(rec.path), "landmarks": lms, "identity": rec.identity}
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> list[ManifestRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: bad manifest line: {exc}") from exc
        lms = obj.get("landmarks")
        if lms is not None:
            if len(lms) != 10:
                raise DataError(f"{path}:{lineno}: landmarks need 10 floats")
            lms = np.asarray(lms, dtype=np.float64).reshape(5, 2)
        rec_path = Path(obj["path"])
        if not rec_path.is_absolute():
            rec_path = path.parent / rec_path
        records.append(
            ManifestRecord(
                path=rec_path, landmarks=lms, identity=str(obj.get("identity", ""))
            )
        )
    if not records:
        raise DataError(f"manifest is empty: {path}")
    return records


def load_face_samples(
    manifest_path: str | Path,
    crop_size: int,
    *,
    allow_center_crop_fallback: bool = False,
) -> list[FaceSample]:
    """Load and align every image referenced by a manifest."""
    samples = []
    for rec in load_manifest(manifest_path):
        data = cv2.imread(str(rec.path), cv2.IMREAD_COLOR)
        if data is None:
            raise DataError(f"unreadable image: {rec.path}")
        rgb = cv2.cvtColor(data, cv2.COLOR_BGR2RGB)
        samples.append(
            align_and_crop(
                rgb,
                rec.landmarks,
                crop_size,
                allow_center_crop_fallback=allow_center_crop_fallback,
                source_id=rec.identity,
            )
        )
    return samples


def load_occluders(directory: str | Path) -> list[OccluderAsset]:
    """Read every RGBA PNG under a directory tree as an occluder asset.

    The asset category is taken from the containing directory name when it
    matches a known category, else defaults to object-render.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"occluder directory not found: {directory}")
    assets = []
    for file in sorted(directory.rglob("*.png")):
        raw = cv2.imread(str(file), cv2.IMREAD_UNCHANGED)
        if raw is None or raw.ndim != 3 or raw.shape[2] != 4:
            continue
        rgba = cv2.cvtColor(raw, cv2.COLOR_BGRA2RGBA).astype(np.float32) / 255.0
        category = file.parent.name if file.parent.name in OCCLUDER_CATEGORIES else "object-render"
        assets.append(OccluderAsset(rgba_image=rgba, category=category))
    if not assets:
        raise DataError(f"no RGBA occluders found under {directory}")
    return assets


def synthesize_toy_occluders(
    count: int, size: int = 48, seed: int = 0
) -> list[OccluderAsset]:
    """Generate simple RGBA occluders (hand-like blobs and object shapes)."""
    rng = np.random.default_rng(seed)
    assets = []
    for idx in range(count):
        canvas = np.zeros((size, size, 4), dtype=np.float32)
        color = rng.uniform(0.15, 0.95, size=3)
        if idx % 2 == 0:
            _draw_hand_blob(canvas, color, rng)
            category = "hand-photo"
        else:
            _draw_object_shape(canvas, color, rng)
            category = "object-render"
        assets.append(OccluderAsset(rgba_image=canvas, category=category))
    return assets


def _draw_hand_blob(canvas: np.ndarray, color: np.ndarray, rng) -> None:
    size = canvas.shape[0]
    mask = np.zeros((size, size), dtype=np.uint8)
    palm_center = (size // 2, int(size * 0.62))
    palm_axes = (int(size * 0.22), int(size * 0.18))
    cv2.ellipse(mask, palm_center, palm_axes, 0, 0, 360, 255, -1)
    for f in range(4):
        x = int(size * (0.32 + 0.12 * f))
        top = int(size * rng.uniform(0.12, 0.25))
        cv2.rectangle(
            mask, (x, top), (x + max(2, size // 16), palm_center[1]), 255, -1
        )
    canvas[:, :, :3] = color * (0.9 + 0.1 * rng.random((size, size, 1)))
    canvas[:, :, 3] = mask.astype(np.float32) / 255.0


def _draw_object_shape(canvas: np.ndarray, color: np.ndarray, rng) -> None:
    size = canvas.shape[0]
    mask = np.zeros((size, size), dtype=np.uint8)
    kind = rng.integers(3)
    if kind == 0:
        cv2.circle(mask, (size // 2, size // 2), int(size * 0.3), 255, -1)
    elif kind == 1:
        m = int(size * 0.2)
        cv2.rectangle(mask, (m, m), (size - m, size - m), 255, -1)
    else:
        pts = np.array(
            [
                [size // 2, int(size * 0.12)],
                [int(size * 0.88), int(size * 0.8)],
                [int(size * 0.12), int(size * 0.8)],
            ]
        )
        cv2.fillPoly(mask, [pts], 255)
    shade = np.linspace(0.75, 1.0, size, dtype=np.float32)[None, :, None]
    canvas[:, :, :3] = color * shade
    canvas[:, :, 3] = mask.astype(np.float32) / 255.0
