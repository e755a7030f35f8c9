"""Gaze estimators: the synthetic 3D direction estimator used as a training
constraint, and the calibrated single-eye 2D on-screen estimator."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as nnf

from . import nets
from .data import ESTIMATOR_FIELDS, ORIENTATIONS, FrameRecord, Manifest, ManifestError, load_image
from .seeds import batch_indices, substream

log = logging.getLogger(__name__)

ANGLE_SCALE = 1.0 / 180.0
IDENTITY_PROFILE = (1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0)


class UnknownDeviceError(KeyError):
    pass


def _unit(v, name) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(a, axis=-1)
    if np.any(np.abs(n - 1.0) > 1e-4):
        raise ValueError(f"{name}: expected unit vectors, got norm(s) {n}")
    return a


def angular_error_batch(a, b) -> np.ndarray:
    """Angles in degrees between rows of ``a`` and ``b`` (unit vectors).

    Computed as atan2(|a x b|, a.b), which equals arccos of the clamped dot
    product but stays exact for identical inputs.
    """
    a = _unit(a, "a")
    b = _unit(b, "b")
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
    return np.degrees(np.arctan2(cross, dot))


def angular_error(a, b) -> float:
    return float(angular_error_batch(np.asarray(a)[None], np.asarray(b)[None])[0])


def gaze_to_screen(g, eye_distance_cm: float = 30.0) -> tuple[float, float]:
    """Intersect a gaze ray from an eye on the camera axis with the screen plane.

    The eye sits ``eye_distance_cm`` in front of the camera; gaze must point
    toward the screen (positive z).
    """
    gx, gy, gz = (float(v) for v in g)
    if gz <= 0:
        raise ValueError("gaze does not point toward the screen plane")
    return (eye_distance_cm * gx / gz, eye_distance_cm * gy / gz)


def pretrain_gaze_estimator(syn: Manifest, cfg, net_cfg: nets.NetConfig = nets.NetConfig()):
    """Fit the direction backbone to synthetic gaze labels with a 1 - cos loss.

    Returns ``(E, mean_angular_error_deg)`` measured on the training set in
    evaluation mode after the last step.
    """
    if syn.label_kind != "gaze3d" or len(syn) == 0:
        raise ManifestError(f"expected a non-empty gaze3d manifest, got {syn.label_kind}")
    torch.manual_seed(substream(cfg.seed, "torch/E"))
    E = nets.init_parameters(nets.build_gaze_backbone(net_cfg, 3), substream(cfg.seed, "init/E"))
    X = nets.load_stack(syn, net_cfg.input_size)
    Y = torch.tensor([r.gaze3d for r in syn.records], dtype=torch.float32)
    opt = cfg.adam(E.parameters())
    E.train()
    for step in range(1, cfg.steps + 1):
        idx = batch_indices(len(X), cfg.batch_size, substream(cfg.seed, "batch/E"), step)
        pred = E(X[idx])
        loss = (1.0 - (pred * Y[idx]).sum(dim=1)).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step == 1 or step % 100 == 0:
            log.info("E step %d loss %.6f", step, loss.item())
    E.eval()
    err = evaluate_direction_error(E, X, Y.numpy())
    return E, err


@torch.no_grad()
def evaluate_direction_error(E, X: torch.Tensor, Y: np.ndarray, chunk: int = 16) -> float:
    E.eval()
    pred = torch.cat([E(X[i:i + chunk]) for i in range(0, len(X), chunk)]).double().numpy()
    return float(np.mean(angular_error_batch(pred, Y.astype(np.float64))))


# Device calibration -----------------------------------------------------------


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    orientation: str
    landmark_scale: tuple[float, float] = (1.0, 1.0)
    landmark_shift: tuple[float, float] = (0.0, 0.0)
    output_scale: tuple[float, float] = (1.0, 1.0)
    output_shift: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if 0.0 in self.landmark_scale or 0.0 in self.output_scale:
            raise ValueError("calibration scales must be non-zero")

    @property
    def key(self) -> tuple[str, str]:
        return (self.device_id, self.orientation)

    def as_vector(self) -> tuple[float, ...]:
        return (*self.landmark_scale, *self.landmark_shift, *self.output_scale, *self.output_shift)

    @classmethod
    def from_vector(cls, device_id: str, orientation: str, v) -> DeviceProfile:
        v = [float(x) for x in v]
        return cls(device_id, orientation, (v[0], v[1]), (v[2], v[3]), (v[4], v[5]), (v[6], v[7]))


def apply_device_calibration(raw, p: DeviceProfile, stage: str):
    """``scale * raw + shift`` with the profile's landmark or output parameters."""
    if stage == "landmark":
        scale, shift = p.landmark_scale, p.landmark_shift
    elif stage == "output":
        scale, shift = p.output_scale, p.output_shift
    else:
        raise ValueError(f"stage must be 'landmark' or 'output', got {stage!r}")
    raw = np.asarray(raw, dtype=np.float64)
    return np.asarray(scale) * raw + np.asarray(shift)


def invert_device_calibration(calibrated, p: DeviceProfile, stage: str):
    if stage == "landmark":
        scale, shift = p.landmark_scale, p.landmark_shift
    elif stage == "output":
        scale, shift = p.output_scale, p.output_shift
    else:
        raise ValueError(f"stage must be 'landmark' or 'output', got {stage!r}")
    return (np.asarray(calibrated, dtype=np.float64) - np.asarray(shift)) / np.asarray(scale)


def save_profiles(profiles: Sequence[DeviceProfile], path) -> None:
    lines = []
    for p in profiles:
        nums = " ".join(repr(float(v)) for v in p.as_vector())
        lines.append(f"{p.device_id}\t{p.orientation}\t{nums}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def load_profiles(path) -> list[DeviceProfile]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or len(parts[2].split()) != 8:
            raise ValueError(f"{path}:{lineno}: expected 'device<TAB>orientation<TAB>8 numbers'")
        out.append(DeviceProfile.from_vector(parts[0], parts[1], parts[2].split()))
    return out


# Single-eye estimator ---------------------------------------------------------


@dataclass(frozen=True)
class EstimatorInputs:
    eye_image: np.ndarray
    rotation_angle: float
    eye_corners: tuple[tuple[float, float], tuple[float, float]]
    device_id: str = ""
    orientation: str = "portrait"

    def __post_init__(self):
        c = np.asarray(self.eye_corners, dtype=np.float64)
        if c.shape != (2, 2):
            raise ValueError("eye_corners must be two (x, y) points")
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("eye_corners must be normalized to [0, 1]")


class SingleEyeEstimator(nn.Module):
    """Eye image features and calibrated eye-corner/angle inputs, fused late.

    Image path: backbone features -> FC1(100). Landmark path: 4 corner
    coordinates and the scaled rotation angle -> FC2(32) -> FC3(32).
    Fusion: concat -> FC4(64) -> FC5(64) -> linear 2D output, then the
    per-device output calibration.
    """

    def __init__(self, net_cfg: nets.NetConfig, device_keys: Sequence[tuple[str, str]] = ()):
        super().__init__()
        probe = nets.build_gaze_backbone(net_cfg, 3)
        self.backbone = nets.build_gaze_backbone(net_cfg, probe.feature_width)
        fw = self.backbone.feature_width
        self.fc1 = nn.Linear(fw, 100)
        self.fc2 = nn.Linear(5, 32)
        self.fc3 = nn.Linear(32, 32)
        self.fc4 = nn.Linear(132, 64)
        self.fc5 = nn.Linear(64, 64)
        self.out = nn.Linear(64, 2)
        self.device_keys = [tuple(k) for k in device_keys]
        self.profiles = nn.Parameter(torch.tensor([IDENTITY_PROFILE] * len(self.device_keys), dtype=torch.float32).reshape(-1, 8))
        self.input_spec = (3, net_cfg.input_size, net_cfg.input_size)
        self.output_spec = (2,)

    def profile_rows(self, keys: Sequence[tuple[str, str]], allow_unknown: bool = False) -> torch.Tensor:
        index = {k: i for i, k in enumerate(self.device_keys)}
        identity = torch.tensor(IDENTITY_PROFILE, dtype=self.profiles.dtype)
        rows = []
        for k in keys:
            k = tuple(k)
            if k in index:
                rows.append(self.profiles[index[k]])
            elif allow_unknown:
                rows.append(identity)
            else:
                raise UnknownDeviceError(f"no device profile for device={k[0]!r} orientation={k[1]!r}")
        if not rows:
            return self.profiles.new_zeros((0, 8))
        return torch.stack(rows)

    def raw(self, images, corners, rot_deg, prof):
        """Head output before output calibration; ``prof`` holds profile rows."""
        lm_scale, lm_shift = prof[:, 0:2], prof[:, 2:4]
        c = corners.reshape(-1, 2, 2) * lm_scale[:, None, :] + lm_shift[:, None, :]
        aux = torch.cat([c.reshape(-1, 4), (rot_deg * ANGLE_SCALE).reshape(-1, 1)], dim=1)
        img = torch.relu(self.fc1(self.backbone(images)))
        lm = torch.relu(self.fc3(torch.relu(self.fc2(aux))))
        h = torch.relu(self.fc4(torch.cat([img, lm], dim=1)))
        h = torch.relu(self.fc5(h))
        return self.out(h)

    def forward(self, images, corners, rot_deg, keys, allow_unknown: bool = False):
        prof = self.profile_rows(keys, allow_unknown).to(images.dtype)
        raw = self.raw(images, corners, rot_deg, prof)
        return raw * prof[:, 4:6] + prof[:, 6:8]

    def device_profiles(self) -> list[DeviceProfile]:
        vals = self.profiles.detach().double().numpy()
        return [DeviceProfile.from_vector(d, o, v) for (d, o), v in zip(self.device_keys, vals)]

    def set_profiles(self, profiles: Sequence[DeviceProfile]) -> None:
        self.device_keys = [p.key for p in profiles]
        with torch.no_grad():
            self.profiles = nn.Parameter(torch.tensor([p.as_vector() for p in profiles], dtype=torch.float32).reshape(-1, 8))


def build_single_eye_estimator(net_cfg: nets.NetConfig = nets.NetConfig(), device_keys=(), seed: int = 0) -> SingleEyeEstimator:
    model = SingleEyeEstimator(net_cfg, device_keys)
    nets.init_parameters(model, seed)
    # linear layers of the fusion head get PyTorch's default fan-in scaling;
    # N(0, 0.02) starves these small dense layers of signal
    gen = torch.Generator().manual_seed(substream(seed, "fc"))
    with torch.no_grad():
        for lin in (model.fc1, model.fc2, model.fc3, model.fc4, model.fc5, model.out):
            bound = 1.0 / math.sqrt(lin.in_features)
            lin.weight.copy_(torch.rand(lin.weight.shape, generator=gen) * 2 * bound - bound)
    return model


@dataclass
class EstimatorBatch:
    images: torch.Tensor
    corners: torch.Tensor
    rot_deg: torch.Tensor
    keys: list[tuple[str, str]]
    labels: torch.Tensor | None

    def __len__(self):
        return len(self.keys)

    def take(self, idx) -> EstimatorBatch:
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        return EstimatorBatch(self.images[idx_t], self.corners[idx_t], self.rot_deg[idx_t],
                              [self.keys[i] for i in idx],
                              None if self.labels is None else self.labels[idx_t])


def _corners(rec: FrameRecord) -> list[float]:
    pts = rec.landmarks[:2]
    flat = [float(v) for pt in pts for v in pt]
    if any(v < 0 or v > 1 for v in flat):
        raise ManifestError(f"{rec.image}: eye corners must be frame-normalized to [0, 1]")
    return flat


def manifest_batch(m: Manifest, size: int, labels: bool = True) -> EstimatorBatch:
    m.require(fields=ESTIMATOR_FIELDS)
    if labels and len(m) and m.label_kind != "screen2d":
        raise ManifestError(f"estimator needs screen2d labels, got {m.label_kind}")
    if len(m) == 0:
        return EstimatorBatch(torch.zeros((0, 3, size, size)), torch.zeros((0, 4)), torch.zeros(0), [], torch.zeros((0, 2)) if labels else None)
    imgs = nets.to_batch(np.stack([load_image(m.path_of(r), size) for r in m.records]))
    corners = torch.tensor([_corners(r) for r in m.records], dtype=torch.float32)
    rot = torch.tensor([r.rot_deg for r in m.records], dtype=torch.float32)
    keys = [(r.device, r.orientation) for r in m.records]
    lab = torch.tensor([r.screen2d for r in m.records], dtype=torch.float32) if labels else None
    return EstimatorBatch(imgs, corners, rot, keys, lab)


def euclidean_loss(pred, target, squared: bool = False):
    d2 = ((pred - target) ** 2).sum(dim=1)
    return d2.mean() if squared else torch.sqrt(d2 + 1e-12).mean()


@torch.no_grad()
def predict_batch(model: SingleEyeEstimator, batch: EstimatorBatch, allow_unknown: bool = False, chunk: int = 32) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(batch), chunk):
        part = batch.take(list(range(i, min(i + chunk, len(batch)))))
        out.append(model(part.images, part.corners, part.rot_deg, part.keys, allow_unknown).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, 2))


def mean_error(model, batch: EstimatorBatch) -> float:
    pred = predict_batch(model, batch)
    return float(np.mean(np.linalg.norm(pred - batch.labels.double().numpy(), axis=1)))


@dataclass
class EstimatorRun:
    model: SingleEyeEstimator
    profiles: list[DeviceProfile]
    history: list[tuple[int, float, float | None]]
    initial_train_error: float
    final_train_error: float
    final_val_error: float | None


def train_estimator(train: Manifest | Sequence[Manifest], val: Manifest | None, cfg,
                    net_cfg: nets.NetConfig = nets.NetConfig(), squared_loss: bool = False,
                    eval_every: int = 0) -> EstimatorRun:
    """Train a single-eye estimator and its device profiles jointly.

    ``train`` may be a list of manifests (for example real plus refined
    frames); they are concatenated. Every (device, orientation) pair seen in
    the training data gets a profile initialised at identity.
    """
    parts = [train] if isinstance(train, Manifest) else list(train)
    batches = [manifest_batch(m, net_cfg.input_size) for m in parts]
    data = EstimatorBatch(
        torch.cat([b.images for b in batches]), torch.cat([b.corners for b in batches]),
        torch.cat([b.rot_deg for b in batches]), [k for b in batches for k in b.keys],
        torch.cat([b.labels for b in batches]),
    )
    if len(data) == 0:
        raise ManifestError("estimator training set is empty")
    val_batch = manifest_batch(val, net_cfg.input_size) if val is not None and len(val) else None
    keys = sorted(set(data.keys))
    torch.manual_seed(substream(cfg.seed, "torch/estimator"))
    model = build_single_eye_estimator(net_cfg, keys, substream(cfg.seed, "init/estimator"))
    opt = cfg.adam(model.parameters())

    initial = mean_error(model, data)
    history: list[tuple[int, float, float | None]] = []
    for step in range(1, cfg.steps + 1):
        idx = batch_indices(len(data), cfg.batch_size, substream(cfg.seed, "batch/estimator"), step)
        b = data.take(list(idx))
        model.train()
        pred = model(b.images, b.corners, b.rot_deg, b.keys)
        loss = euclidean_loss(pred, b.labels, squared_loss)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        val_err = None
        if val_batch is not None and eval_every and step % eval_every == 0:
            val_err = mean_error(model, val_batch)
        history.append((step, float(loss.item()), val_err))
        if step == 1 or step % 100 == 0:
            log.info("estimator step %d loss %.4f", step, loss.item())
    final = mean_error(model, data)
    final_val = mean_error(model, val_batch) if val_batch is not None else None
    model.eval()
    return EstimatorRun(model, model.device_profiles(), history, initial, final, final_val)


def save_estimator(model: SingleEyeEstimator, ckpt_path, profiles_path) -> None:
    save_profiles(model.device_profiles(), profiles_path)
    nets.save_checkpoint(ckpt_path, {"estimator": model})


def load_estimator(ckpt_path, profiles_path, net_cfg: nets.NetConfig = nets.NetConfig()) -> SingleEyeEstimator:
    profiles = load_profiles(profiles_path)
    model = SingleEyeEstimator(net_cfg, [p.key for p in profiles])
    nets.load_checkpoint(ckpt_path, {"estimator": model})
    model.eval()
    return model


def predict_manifest(model: SingleEyeEstimator, m: Manifest, net_cfg: nets.NetConfig = nets.NetConfig(),
                     allow_unknown: bool = False) -> np.ndarray:
    return predict_batch(model, manifest_batch(m, net_cfg.input_size, labels=False), allow_unknown)


def predict_single(model: SingleEyeEstimator, x: EstimatorInputs, allow_unknown: bool = False) -> np.ndarray:
    batch = EstimatorBatch(
        nets.to_batch(x.eye_image),
        torch.from_numpy(np.asarray(x.eye_corners, dtype=np.float32).reshape(1, 4)),
        torch.tensor([float(x.rotation_angle)], dtype=torch.float32),
        [(x.device_id, x.orientation)],
        None,
    )
    return predict_batch(model, batch, allow_unknown)[0]


@dataclass(frozen=True)
class TwoEyePrediction:
    point: tuple[float, float]
    single_eye: bool = False
    eye_used: str = "both"


def combine_two_eye(right_pred, left_pred) -> TwoEyePrediction:
    """Average two on-screen predictions, falling back to whichever exists."""
    if right_pred is None and left_pred is None:
        raise ValueError("no eye prediction available")
    if left_pred is None:
        return TwoEyePrediction((float(right_pred[0]), float(right_pred[1])), True, "right")
    if right_pred is None:
        return TwoEyePrediction((float(left_pred[0]), float(left_pred[1])), True, "left")
    mean = (np.asarray(right_pred, dtype=np.float64) + np.asarray(left_pred, dtype=np.float64)) / 2.0
    return TwoEyePrediction((float(mean[0]), float(mean[1])))


def predict_two_eye(right_model, left_model, right_in: EstimatorInputs | None, left_in: EstimatorInputs | None,
                    allow_unknown: bool = False) -> TwoEyePrediction:
    right = predict_single(right_model, right_in, allow_unknown) if right_in is not None else None
    left = predict_single(left_model, left_in, allow_unknown) if left_in is not None else None
    return combine_two_eye(right, left)
