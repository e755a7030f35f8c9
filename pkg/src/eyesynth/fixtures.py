"""Procedural eye-region images for tests and the bundled smoke fixture.

Two looks are rendered from the same geometry: a flat-shaded "synthetic"
style and a noisier, tinted, blurred "real" style. The iris position
follows the gaze direction, so gaze is recoverable from the pixels.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import FrameRecord, Manifest, ORIENTATIONS, save_manifest
from .evaluation import sharpness_of

EYEBALL_RADIUS = 0.30  # iris travel, in units of the image width


def _smoothstep(x, width):
    return np.clip(0.5 + x / width, 0.0, 1.0)


def render_eye(gaze, style: str = "synthetic", size: int = 128, rng=None, rot_deg: float = 0.0) -> np.ndarray:
    """Render one eye image as uint8 HxWx3."""
    rng = np.random.default_rng(0) if rng is None else rng
    g = np.asarray(gaze, dtype=np.float64)
    g = g / np.linalg.norm(g)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = (xx + 0.5) / size - 0.5
    v = (yy + 0.5) / size - 0.5
    if rot_deg:
        c, s = math.cos(math.radians(rot_deg)), math.sin(math.radians(rot_deg))
        u, v = c * u + s * v, -s * u + c * v
    aa = 1.5 / size

    if style == "synthetic":
        skin = np.array([0.82, 0.64, 0.52])
        sclera = np.array([0.96, 0.96, 0.96])
        iris_col = np.array([0.25, 0.45, 0.70])
    elif style == "real":
        skin = np.clip(np.array([0.70, 0.50, 0.40]) + rng.normal(0, 0.06, 3), 0, 1)
        sclera = np.array([0.88, 0.80, 0.78])
        iris_col = np.clip(np.array([0.35, 0.25, 0.15]) + rng.normal(0, 0.05, 3), 0, 1)
    else:
        raise ValueError(f"unknown style {style!r}")

    img = np.empty((size, size, 3))
    img[:] = skin
    if style == "real":
        shade = 0.9 + 0.2 * (v + 0.5)
        img *= shade[..., None]
        img += gaussian_filter(rng.normal(0, 0.08, (size, size)), 3)[..., None]

    # eye opening: an ellipse
    eye_a, eye_b = 0.36, 0.17
    opening = 1.0 - np.sqrt((u / eye_a) ** 2 + (v / eye_b) ** 2)
    m_eye = _smoothstep(opening, aa / eye_b)
    img = img * (1 - m_eye[..., None]) + sclera * m_eye[..., None]

    # iris and pupil displaced by gaze (+y up maps to -v)
    cu, cv = EYEBALL_RADIUS * g[0], -EYEBALL_RADIUS * g[1]
    r = np.hypot(u - cu, v - cv)
    m_iris = _smoothstep(0.13 - r, aa) * m_eye
    img = img * (1 - m_iris[..., None]) + iris_col * m_iris[..., None]
    if style == "real":
        ring = 0.85 + 0.15 * np.cos(r * 120.0)
        img = img * (1 - m_iris[..., None]) + (img * ring[..., None]) * m_iris[..., None]
    m_pupil = _smoothstep(0.05 - r, aa) * m_eye
    img = img * (1 - m_pupil[..., None]) + 0.03 * m_pupil[..., None]
    # lid line
    lid = _smoothstep(aa * 1.5 - np.abs(opening) * eye_b, aa)
    img = img * (1 - 0.5 * lid[..., None])

    if style == "real":
        img = gaussian_filter(img, sigma=(rng.uniform(0.3, 1.5), rng.uniform(0.3, 1.5), 0))
        img += rng.normal(0, 0.02, img.shape)
        img *= rng.uniform(0.85, 1.1)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def random_gaze(rng, max_yaw_deg=25.0, max_pitch_deg=18.0) -> tuple[float, float, float]:
    yaw = math.radians(rng.uniform(-max_yaw_deg, max_yaw_deg))
    pitch = math.radians(rng.uniform(-max_pitch_deg, max_pitch_deg))
    g = np.array([math.sin(yaw) * math.cos(pitch), math.sin(pitch), math.cos(yaw) * math.cos(pitch)])
    g /= np.linalg.norm(g)
    return tuple(float(x) for x in g)


def _save(arr, path):
    from PIL import Image

    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _eye_meta(rng, eye: str) -> dict:
    rot = float(rng.uniform(-8, 8))
    cx = 0.38 if eye == "right" else 0.62
    cy = float(0.42 + rng.uniform(-0.03, 0.03))
    half = 0.06
    c, s = math.cos(math.radians(rot)), math.sin(math.radians(rot))
    corners = ((cx - half * c, cy - half * s), (cx + half * c, cy + half * s))
    return {
        "landmarks": tuple((round(float(x), 6), round(float(y), 6)) for x, y in corners),
        "rot_deg": round(rot, 4),
    }


def make_gaze_set(out_dir, n: int, style: str = "synthetic", seed: int = 0, size: int = 128,
                  labeled: bool = True, prefix: str | None = None) -> Manifest:
    """``n`` gaze3d-labeled (or unlabeled) eye images plus their manifest."""
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    prefix = prefix or style
    records = []
    for i in range(n):
        g = random_gaze(rng)
        name = f"{prefix}_{i:04d}.png"
        _save(render_eye(g, style, size, rng), out / name)
        meta = _eye_meta(rng, "right")
        records.append(FrameRecord(
            image=name, gaze3d=g if labeled else None, device="synthetic", orientation="portrait", **meta,
        ))
    m = Manifest(tuple(records), root=out)
    save_manifest(m, out / "manifest.txt")
    return m


def make_screen_set(out_dir, n: int, seed: int = 0, size: int = 128, devices=("phone_a", "phone_b"),
                    device_offsets=None, eye: str = "right", eye_distance_cm: float = 30.0,
                    style: str = "real", prefix: str = "frame") -> Manifest:
    """Real-style frames with screen2d labels and all evaluation metadata.

    The image depends only on the gaze ray; ``device_offsets`` adds a
    per-device constant to the label, mimicking different camera placements.
    """
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    device_offsets = device_offsets or {}
    records = []
    for i in range(n):
        x, y = rng.uniform(-6, 6), rng.uniform(-10, 1)
        d = eye_distance_cm
        g = np.array([x, y, d]) / math.sqrt(x * x + y * y + d * d)
        device = devices[i % len(devices)]
        off = device_offsets.get(device, (0.0, 0.0))
        name = f"{prefix}_{eye}_{i:04d}.png"
        img = render_eye(g, style, size, rng)
        _save(img, out / name)
        meta = _eye_meta(rng, eye)
        records.append(FrameRecord(
            image=name,
            screen2d=(round(x + off[0], 6), round(y + off[1], 6)),
            device=device,
            orientation=ORIENTATIONS[0],
            tilt=round(float(rng.normal(0, 12)), 4),
            pan=round(float(rng.normal(0, 15)), 4),
            roll=round(float(rng.normal(0, 6)), 4),
            sharpness=round(sharpness_of(img.astype(np.float64) / 127.5 - 1.0), 6),
            mask_ratio=round(float(rng.uniform(0.05, 0.6)), 4),
            **meta,
        ))
    m = Manifest(tuple(records), root=out)
    save_manifest(m, out / "manifest.txt")
    return m


def make_smoke_fixture(out_dir, seed: int = 0, n: int = 16, size: int = 128) -> Path:
    """Build the end-to-end fixture: synthetic, real, face and screen-frame sets."""
    out = Path(out_dir)
    make_gaze_set(out / "synthetic", n, "synthetic", seed=seed, size=size)
    make_gaze_set(out / "real", n, "real", seed=seed + 1, size=size, labeled=False)
    for eye in ("right", "left"):
        make_screen_set(out / f"frames_{eye}", n, seed=seed + 2, size=size, eye=eye, prefix="train")
        make_screen_set(out / f"test_{eye}", n, seed=seed + 3, size=size, eye=eye, prefix="test")
    make_face_set(out / "faces", 3, seed=seed + 4)
    return out


def render_face(size: int = 256, rng=None) -> tuple[np.ndarray, np.ndarray]:
    """A smooth face-like image and landmarks matching the default canonical order."""
    from .geometry import DEFAULT_CANONICAL_LANDMARKS, DEFAULT_UV_SIZE

    rng = np.random.default_rng(0) if rng is None else rng
    lm = DEFAULT_CANONICAL_LANDMARKS * (size / DEFAULT_UV_SIZE)
    ang = math.radians(rng.uniform(-10, 10))
    sc = rng.uniform(0.85, 1.0)
    c, s = math.cos(ang), math.sin(ang)
    centre = np.array([size / 2, size / 2])
    lm = (lm - centre) @ (sc * np.array([[c, -s], [s, c]])).T + centre + rng.normal(0, 1.0, lm.shape)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.empty((size, size, 3))
    img[:] = np.clip(np.array([0.75, 0.58, 0.48]) + rng.normal(0, 0.04, 3), 0, 1)
    for u, v in lm:
        blob = np.exp(-((xx - u) ** 2 + (yy - v) ** 2) / (2 * (size / 40) ** 2))
        img -= 0.35 * blob[..., None]
    img = np.clip(img, 0, 1)
    return np.rint(img * 255).astype(np.uint8), lm


def make_face_set(out_dir, n: int, seed: int = 0, size: int = 256) -> Path:
    from .data import format_landmarks

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n):
        img, lm = render_face(size, rng)
        _save(img, out / f"face_{i:03d}.png")
        (out / f"face_{i:03d}.landmarks").write_text(
            "landmarks=" + format_landmarks(np.round(lm, 4)) + "\n", encoding="utf-8")
    return out
