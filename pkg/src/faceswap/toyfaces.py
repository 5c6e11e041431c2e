"""Bundled synthetic face corpus for desk-scale runs.

Faces are parametric cartoons: identity controls stable appearance (skin
hue, hair color, eye geometry, face shape), while per-image attributes
control pose (similarity transform), expression (mouth/eye state), lighting
gradient, and background. Landmarks are known analytically, so the corpus
needs no detector and can train/evaluate the full pipeline end to end.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .data import FaceSample, ManifestRecord, template_points, write_manifest
from .errors import DataError
from .imgio import tensor_to_uint8, uint8_to_tensor


@dataclass(frozen=True)
class IdentitySpec:
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    iris: tuple[float, float, float]
    eye_size: float  # relative eye radius multiplier
    face_aspect: float  # width multiplier of the face ellipse
    brow_thickness: float
    nose_size: float


@dataclass(frozen=True)
class ToyFaceParams:
    identity: int
    # pose: [rotation deg, tx, ty (fractions of size), log scale]
    pose: tuple[float, float, float, float]
    # expression: [mouth curvature, mouth openness, eye openness]
    expression: tuple[float, float, float]


@dataclass
class ToyCorpus:
    samples: list[FaceSample]
    params: list[ToyFaceParams]
    n_identities: int
    size: int


def identity_spec(identity: int, n_identities: int) -> IdentitySpec:
    """Deterministic appearance parameters for one identity.

    Skin hues are spread evenly around the color wheel so identities are
    strongly separable by a small classifier.
    """
    rng = np.random.default_rng(90_000 + identity)
    hue = (identity / max(n_identities, 1)) % 1.0
    skin = colorsys.hsv_to_rgb(hue, 0.55, 0.85)
    hair = colorsys.hsv_to_rgb((hue + 0.45) % 1.0, 0.7, float(rng.uniform(0.25, 0.7)))
    iris = colorsys.hsv_to_rgb((hue + 0.2) % 1.0, 0.8, 0.35)
    return IdentitySpec(
        skin=tuple(float(c) for c in skin),
        hair=tuple(float(c) for c in hair),
        iris=tuple(float(c) for c in iris),
        eye_size=float(rng.uniform(0.8, 1.3)),
        face_aspect=float(rng.uniform(0.85, 1.1)),
        brow_thickness=float(rng.uniform(0.6, 1.6)),
        nose_size=float(rng.uniform(0.7, 1.3)),
    )


def _color(c: tuple[float, float, float]) -> tuple[int, int, int]:
    return tuple(int(round(255 * v)) for v in c)


def render_toy_face(
    spec: IdentitySpec,
    size: int,
    *,
    pose: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0),
    expression: tuple[float, float, float] = (0.0, 0.2, 1.0),
    background: tuple[float, float, float] = (0.9, 0.9, 0.9),
    stripes: bool = False,
    light_dir: float = 0.0,
    light_strength: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Render one face; returns (HxWx3 uint8 RGB, 5x2 landmarks)."""
    angle, tx, ty, log_scale = pose
    curvature, mouth_open, eye_open = expression
    s = size

    bg = np.empty((s, s, 3), dtype=np.uint8)
    bg[:] = _color(background)
    if stripes:
        for y in range(0, s, max(4, s // 8)):
            bg[y : y + max(2, s // 16)] = (
                np.asarray(_color(background), dtype=np.float32) * 0.7
            ).astype(np.uint8)

    # Face drawn upright on an RGBA layer, then warped by the pose transform.
    layer = np.zeros((s, s, 4), dtype=np.uint8)
    lm = template_points(s).astype(np.float64)
    leye, reye, nose, lmouth, rmouth = lm
    face_center = (s // 2, int(0.60 * s))
    axes = (int(0.30 * s * spec.face_aspect), int(0.36 * s))

    def put(draw_fn, color):
        shape = np.zeros((s, s), dtype=np.uint8)
        draw_fn(shape)
        region = shape > 0
        layer[region, :3] = _color(color)
        layer[region, 3] = 255

    put(lambda m: cv2.ellipse(m, face_center, axes, 0, 0, 360, 255, -1), spec.skin)
    # hair: cap above the brow line
    hair_top = int(face_center[1] - axes[1] * 1.02)
    brow_y = int(0.40 * s)

    def draw_hair(m):
        cv2.ellipse(
            m, (face_center[0], brow_y), (int(axes[0] * 1.08), brow_y - hair_top), 0, 180, 360, 255, -1
        )

    put(draw_hair, spec.hair)

    eye_r = max(1, int(0.055 * s * spec.eye_size))
    eye_h = max(1, int(eye_r * max(eye_open, 0.15)))
    for center in (leye, reye):
        cx, cy = int(center[0]), int(center[1])
        put(lambda m, cx=cx, cy=cy: cv2.ellipse(m, (cx, cy), (eye_r, eye_h), 0, 0, 360, 255, -1), (1.0, 1.0, 1.0))
        iris_r = max(1, int(eye_r * 0.5))
        put(lambda m, cx=cx, cy=cy: cv2.circle(m, (cx, cy), iris_r, 255, -1), spec.iris)
        brow_h = max(1, int(0.02 * s * spec.brow_thickness))
        put(
            lambda m, cx=cx: cv2.rectangle(
                m, (cx - eye_r, brow_y - brow_h), (cx + eye_r, brow_y), 255, -1
            ),
            spec.hair,
        )

    nose_w = max(1, int(0.035 * s * spec.nose_size))
    nose_pts = np.array(
        [
            [int(nose[0]), int(nose[1] - 0.10 * s)],
            [int(nose[0] - nose_w), int(nose[1])],
            [int(nose[0] + nose_w), int(nose[1])],
        ]
    )
    darker_skin = tuple(c * 0.75 for c in spec.skin)
    put(lambda m: cv2.fillPoly(m, [nose_pts], 255), darker_skin)

    mouth_y = (lmouth[1] + rmouth[1]) / 2.0
    mouth_mid_y = mouth_y - curvature * 0.05 * s
    mouth_h = max(1, int(0.01 * s + mouth_open * 0.045 * s))
    mouth_poly = np.array(
        [
            [int(lmouth[0]), int(lmouth[1])],
            [int((lmouth[0] + rmouth[0]) / 2), int(mouth_mid_y - mouth_h)],
            [int(rmouth[0]), int(rmouth[1])],
            [int((lmouth[0] + rmouth[0]) / 2), int(mouth_mid_y + mouth_h)],
        ]
    )
    put(lambda m: cv2.fillPoly(m, [mouth_poly], 255), (0.55, 0.1, 0.15))

    scale = float(np.exp(log_scale))
    matrix = cv2.getRotationMatrix2D((s / 2.0, s / 2.0), angle, scale)
    matrix[0, 2] += tx * s
    matrix[1, 2] += ty * s
    warped = cv2.warpAffine(
        layer, matrix, (s, s), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT
    )
    alpha = warped[:, :, 3:4].astype(np.float32) / 255.0
    out = bg.astype(np.float32) * (1 - alpha) + warped[:, :, :3].astype(np.float32) * alpha

    if light_strength > 0:
        ramp = np.linspace(-0.5, 0.5, s, dtype=np.float32)
        gx = np.cos(light_dir) * ramp[None, :]
        gy = np.sin(light_dir) * ramp[:, None]
        gain = 1.0 + light_strength * (gx + gy)
        out = out * gain[:, :, None]

    landmarks = lm @ matrix[:, :2].T + matrix[:, 2]
    return np.clip(out, 0, 255).astype(np.uint8), landmarks


def build_toy_corpus(
    n_images: int = 100,
    n_identities: int = 8,
    size: int = 64,
    seed: int = 0,
    *,
    pose_jitter: float = 1.0,
) -> ToyCorpus:
    """Generate a balanced corpus of aligned toy faces with metadata."""
    if n_images <= 0 or n_identities <= 0:
        raise DataError("corpus needs positive image and identity counts")
    rng = np.random.default_rng(seed)
    specs = [identity_spec(i, n_identities) for i in range(n_identities)]
    samples: list[FaceSample] = []
    params: list[ToyFaceParams] = []
    for idx in range(n_images):
        identity = idx % n_identities
        pose = (
            float(rng.uniform(-18.0, 18.0)) * pose_jitter,
            float(rng.uniform(-0.06, 0.06)) * pose_jitter,
            float(rng.uniform(-0.06, 0.06)) * pose_jitter,
            float(rng.uniform(-0.12, 0.12)) * pose_jitter,
        )
        expression = (
            float(rng.uniform(-1.0, 1.0)),
            float(rng.uniform(0.0, 1.0)),
            float(rng.uniform(0.35, 1.0)),
        )
        background = colorsys.hsv_to_rgb(float(rng.random()), 0.25, float(rng.uniform(0.5, 1.0)))
        image, landmarks = render_toy_face(
            specs[identity],
            size,
            pose=pose,
            expression=expression,
            background=tuple(float(c) for c in background),
            stripes=bool(rng.random() < 0.3),
            light_dir=float(rng.uniform(0, 2 * np.pi)),
            light_strength=float(rng.uniform(0.0, 0.25)),
        )
        samples.append(
            FaceSample(
                image=uint8_to_tensor(image),
                landmarks=landmarks,
                source_id=f"id{identity}",
            )
        )
        params.append(ToyFaceParams(identity=identity, pose=pose, expression=expression))
    return ToyCorpus(samples=samples, params=params, n_identities=n_identities, size=size)


def save_corpus(corpus: ToyCorpus, directory: str | Path) -> Path:
    """Write corpus images plus a manifest; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for idx, sample in enumerate(corpus.samples):
        name = f"face_{idx:04d}.png"
        rgb = tensor_to_uint8(sample.image)
        cv2.imwrite(str(directory / name), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR))
        records.append(
            ManifestRecord(
                path=Path(name), landmarks=sample.landmarks, identity=sample.source_id
            )
        )
    manifest = directory / "manifest.jsonl"
    write_manifest(manifest, records)
    return manifest
