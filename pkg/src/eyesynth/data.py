"""Shared record types, the manifest text format, image IO and dataset splits.

Gaze directions use a camera frame with +x right, +y up and +z pointing
toward the camera. Screen points are in cm on the screen plane, measured
from the camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

ORIENTATIONS = ("portrait", "portrait_upside_down", "landscape_left", "landscape_right")
LABEL_KINDS = ("gaze3d", "screen2d", "none")

# Canonical key order; save_manifest always emits fields in this order.
FIELD_ORDER = (
    "image", "gaze3d", "screen2d", "landmarks", "rot_deg", "device", "orientation",
    "tilt", "pan", "roll", "sharpness", "mask_ratio", "pred2d",
)
# Fields an estimator manifest must carry on every record.
ESTIMATOR_FIELDS = ("landmarks", "rot_deg", "device", "orientation")


class ManifestError(ValueError):
    """Raised for malformed or invalid manifest content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FrameRecord:
    image: str
    gaze3d: tuple[float, float, float] | None = None
    screen2d: tuple[float, float] | None = None
    landmarks: tuple[tuple[float, float], ...] | None = None
    rot_deg: float | None = None
    device: str | None = None
    orientation: str | None = None
    tilt: float | None = None
    pan: float | None = None
    roll: float | None = None
    sharpness: float | None = None
    mask_ratio: float | None = None
    pred2d: tuple[float, float] | None = None

    def __post_init__(self):
        validate_record(self)

    @property
    def label_kind(self) -> str:
        if self.gaze3d is not None:
            return "gaze3d"
        if self.screen2d is not None:
            return "screen2d"
        return "none"


def validate_record(rec: FrameRecord) -> None:
    if not rec.image:
        raise ManifestError("image: empty path")
    if rec.gaze3d is not None and rec.screen2d is not None:
        raise ManifestError("record carries both gaze3d and screen2d labels")
    if rec.gaze3d is not None:
        if len(rec.gaze3d) != 3 or not all(map(math.isfinite, rec.gaze3d)):
            raise ManifestError("gaze3d: expected three finite values")
        norm = math.sqrt(sum(v * v for v in rec.gaze3d))
        if abs(norm - 1.0) > 1e-6:
            raise ManifestError(f"gaze3d: norm {norm:.9f} is not 1")
    for name in ("screen2d", "pred2d"):
        val = getattr(rec, name)
        if val is not None and (len(val) != 2 or not all(map(math.isfinite, val))):
            raise ManifestError(f"{name}: expected two finite values")
    if rec.landmarks is not None:
        if len(rec.landmarks) < 2:
            raise ManifestError("landmarks: need at least 2 points")
        for pt in rec.landmarks:
            if len(pt) != 2 or not all(map(math.isfinite, pt)):
                raise ManifestError("landmarks: points must be finite (u, v) pairs")
    for name in ("rot_deg", "tilt", "pan", "roll"):
        val = getattr(rec, name)
        if val is not None and not math.isfinite(val):
            raise ManifestError(f"{name}: not finite")
    if rec.orientation is not None and rec.orientation not in ORIENTATIONS:
        raise ManifestError(f"orientation: unknown value {rec.orientation!r}")
    if rec.sharpness is not None and not (math.isfinite(rec.sharpness) and rec.sharpness >= 0):
        raise ManifestError("sharpness: must be finite and >= 0")
    if rec.mask_ratio is not None and not (0.0 <= rec.mask_ratio <= 1.0):
        raise ManifestError(f"mask_ratio: {rec.mask_ratio} outside [0, 1]")


@dataclass(frozen=True)
class Manifest:
    """An ordered, validated collection of frame records.

    ``root`` is the directory relative image paths are resolved against.
    """

    records: tuple[FrameRecord, ...] = ()
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        kinds = {r.label_kind for r in self.records}
        if len(kinds) > 1:
            raise ManifestError(f"mixed label kinds: {sorted(kinds)}")
        seen = set()
        for i, r in enumerate(self.records):
            if r.image in seen:
                raise ManifestError(f"duplicate image entry {r.image!r}", line=i + 1)
            seen.add(r.image)

    @property
    def label_kind(self) -> str:
        return self.records[0].label_kind if self.records else "none"

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def path_of(self, rec: FrameRecord) -> Path:
        p = Path(rec.image)
        return p if p.is_absolute() else self.root / p

    def with_records(self, records: Iterable[FrameRecord]) -> Manifest:
        return Manifest(tuple(records), root=self.root)

    def require(self, kind: str | None = None, fields: Sequence[str] = ()) -> None:
        """Check label kind and per-record presence of ``fields``."""
        if kind is not None and self.records and self.label_kind != kind:
            raise ManifestError(f"expected label kind {kind}, got {self.label_kind}")
        for i, r in enumerate(self.records):
            for name in fields:
                if getattr(r, name) is None:
                    raise ManifestError(f"missing required field {name!r}", line=i + 1)


def _floats(text: str, n: int, key: str, line: int) -> tuple[float, ...]:
    parts = text.split(",")
    if len(parts) != n:
        raise ManifestError(f"{key}: expected {n} comma-separated values", line)
    try:
        return tuple(float(p) for p in parts)
    except ValueError:
        raise ManifestError(f"{key}: not a number in {text!r}", line) from None


def parse_landmarks(text: str, line: int | None = None) -> tuple[tuple[float, float], ...]:
    pts = []
    for chunk in text.strip().split(";"):
        pts.append(_floats(chunk, 2, "landmarks", line))
    return tuple(pts)


def format_landmarks(points) -> str:
    return ";".join(f"{float(u)!r},{float(v)!r}" for u, v in points)


def parse_record(line_text: str, line: int | None = None) -> FrameRecord:
    kw: dict = {}
    for item in line_text.split("\t"):
        key, sep, val = item.partition("=")
        if not sep:
            raise ManifestError(f"expected key=value, got {item!r}", line)
        if key in kw:
            raise ManifestError(f"repeated key {key!r}", line)
        try:
            if key in ("image", "device", "orientation"):
                kw[key] = val
            elif key == "gaze3d":
                kw[key] = _floats(val, 3, key, line)
            elif key in ("screen2d", "pred2d"):
                kw[key] = _floats(val, 2, key, line)
            elif key == "landmarks":
                kw[key] = parse_landmarks(val, line)
            elif key in ("rot_deg", "tilt", "pan", "roll", "sharpness", "mask_ratio"):
                kw[key] = float(val)
            else:
                raise ManifestError(f"unknown key {key!r}", line)
        except ValueError as exc:
            if isinstance(exc, ManifestError):
                raise
            raise ManifestError(f"{key}: cannot parse {val!r}", line) from None
    if "image" not in kw:
        raise ManifestError("missing image field", line)
    try:
        return FrameRecord(**kw)
    except ManifestError as exc:
        raise ManifestError(str(exc), line) from None


def format_record(rec: FrameRecord) -> str:
    out = []
    for key in FIELD_ORDER:
        val = getattr(rec, key)
        if val is None:
            continue
        if key in ("image", "device", "orientation"):
            text = val
        elif key == "landmarks":
            text = format_landmarks(val)
        elif isinstance(val, tuple):
            text = ",".join(repr(float(v)) for v in val)
        else:
            text = repr(float(val))
        out.append(f"{key}={text}")
    return "\t".join(out)


def load_manifest(path, require: Sequence[str] = (), check_paths: bool = True) -> Manifest:
    """Read a manifest file; relative image paths resolve against its directory."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8", newline="\n") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.rstrip("\n")
            if not text.strip():
                continue
            records.append(parse_record(text, lineno))
    m = Manifest(tuple(records), root=path.parent)
    m.require(fields=require)
    if check_paths:
        for i, r in enumerate(m.records):
            if not m.path_of(r).is_file():
                raise ManifestError(f"image not found: {r.image}", line=i + 1)
    return m


def save_manifest(m: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = "".join(format_record(r) + "\n" for r in m.records)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(text.encode("utf-8"))
    tmp.replace(path)


def load_image(path, target: int | None = 128) -> np.ndarray:
    """Decode an RGB image, resize to ``target`` square and map [0, 255] to [-1, 1].

    ``target=None`` keeps the native size.
    """
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if target is not None and im.size != (target, target):
                im = im.resize((target, target), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot decode image {path}: {exc}") from exc
    return arr / np.float32(127.5) - np.float32(1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(img, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def split_dataset(m: Manifest, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Shuffle ``m`` with ``seed`` and cut it into train/val/test manifests.

    Records keep their original relative order inside each part.
    """
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    n = len(m)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = min(n, int(round(fractions[0] * n)))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    cuts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(m.with_records(m.records[i] for i in sorted(idx)) for idx in cuts)


def replace_record(rec: FrameRecord, **changes) -> FrameRecord:
    return replace(rec, **changes)
