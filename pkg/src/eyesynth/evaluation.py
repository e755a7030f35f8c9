"""Error metrics, per-device tables, factor-binned curves and their plots."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.signal import convolve2d

from .data import FrameRecord, Manifest

FACTORS = ("abs_tilt", "abs_pan", "abs_roll", "sharpness", "face_mask_ratio")
FACTOR_LABELS = {
    "abs_tilt": "|head tilt| (deg)",
    "abs_pan": "|head pan| (deg)",
    "abs_roll": "|head roll| (deg)",
    "sharpness": "eye-region sharpness (Laplacian variance)",
    "face_mask_ratio": "face mask ratio",
}


log = logging.getLogger(__name__)


class EvaluationError(ValueError):
    pass


def _mean(values) -> float:
    # exactly rounded sum: results do not depend on frame order
    return math.fsum(values) / len(values)


def _points(x, name) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2:
        raise EvaluationError(f"{name}: expected (N, 2) points, got shape {a.shape}")
    return a


def per_frame_errors(preds, labels) -> np.ndarray:
    p = _points(preds, "preds")
    y = _points(labels, "labels")
    if len(p) != len(y):
        raise EvaluationError(f"length mismatch: {len(p)} predictions vs {len(y)} labels")
    d = p - y
    return np.sqrt(d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1])


def mean_euclidean_error(preds, labels) -> float:
    """Mean distance (cm) between predicted and true screen points."""
    err = per_frame_errors(preds, labels)
    if len(err) == 0:
        raise EvaluationError("no frames to evaluate")
    return _mean(err)


def labels_of(frames: Sequence[FrameRecord]) -> np.ndarray:
    if any(f.screen2d is None for f in frames):
        raise EvaluationError("every evaluated frame needs a screen2d label")
    return np.array([f.screen2d for f in frames], dtype=np.float64).reshape(-1, 2)


@dataclass(frozen=True)
class DeviceRow:
    device: str
    count: int
    mean_error: float | None


def slice_by_device(frames: Sequence[FrameRecord], preds, devices: Sequence[str] = ()) -> list[DeviceRow]:
    """One row per requested device; with no devices, one row over all frames."""
    err = per_frame_errors(preds, labels_of(frames))
    if not devices:
        return [DeviceRow("all", len(err), _mean(err) if len(err) else None)]
    dev = np.array([f.device for f in frames], dtype=object)
    rows = []
    for d in devices:
        sel = err[dev == d]
        rows.append(DeviceRow(d, int(len(sel)), _mean(sel) if len(sel) else None))
    return rows


@dataclass(frozen=True)
class BinSpec:
    factor: str
    edges: tuple[float, ...]

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise EvaluationError(f"unknown factor {self.factor!r}; expected one of {FACTORS}")
        e = np.asarray(self.edges, dtype=np.float64)
        if len(e) < 2 or not np.all(np.isfinite(e)) or np.any(np.diff(e) <= 0):
            raise EvaluationError("bin edges must be at least two strictly increasing finite values")
        object.__setattr__(self, "edges", tuple(float(v) for v in e))


@dataclass(frozen=True)
class Bin:
    lower: float
    upper: float
    mean_error: float | None
    count: int


@dataclass(frozen=True)
class BinnedCurve:
    factor: str
    bins: tuple[Bin, ...]
    out_of_range: int

    @property
    def counts(self) -> np.ndarray:
        return np.array([b.count for b in self.bins], dtype=np.int64)


def factor_values(frames: Sequence[FrameRecord], factor: str) -> np.ndarray:
    attr = {
        "abs_tilt": "tilt", "abs_pan": "pan", "abs_roll": "roll",
        "sharpness": "sharpness", "face_mask_ratio": "mask_ratio",
    }[factor]
    vals = [getattr(f, attr) for f in frames]
    if any(v is None for v in vals):
        raise EvaluationError(f"factor {factor!r} needs field {attr!r} on every frame")
    arr = np.array(vals, dtype=np.float64)
    return np.abs(arr) if factor.startswith("abs_") else arr


def assign_bins(values, edges) -> np.ndarray:
    """Bin index per value, -1 when out of range.

    Bins are half-open ``[e_i, e_{i+1})`` except the last, which is closed.
    """
    v = np.asarray(values, dtype=np.float64)
    e = np.asarray(edges, dtype=np.float64)
    idx = np.searchsorted(e, v, side="right") - 1
    idx[v == e[-1]] = len(e) - 2
    idx[(v < e[0]) | (v > e[-1]) | ~np.isfinite(v)] = -1
    return idx


def bin_errors(frames: Sequence[FrameRecord], preds, spec: BinSpec) -> BinnedCurve:
    err = per_frame_errors(preds, labels_of(frames))
    idx = assign_bins(factor_values(frames, spec.factor), spec.edges)
    bins = []
    for i in range(len(spec.edges) - 1):
        sel = err[idx == i]
        bins.append(Bin(spec.edges[i], spec.edges[i + 1], _mean(sel) if len(sel) else None, int(len(sel))))
    return BinnedCurve(spec.factor, tuple(bins), int(np.sum(idx < 0)))


def quantile_edges(values, n_bins: int = 8) -> tuple[float, ...]:
    """Equal-count bin edges; ties collapse duplicate edges."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) == 0:
        raise EvaluationError("cannot derive bin edges from no values")
    e = np.unique(np.quantile(v, np.linspace(0.0, 1.0, n_bins + 1)))
    if len(e) < 2:
        e = np.array([e[0], e[0] + 1.0])
    return tuple(float(x) for x in e)


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def sharpness_of(eye_img) -> float:
    """Variance of the 3x3 Laplacian over the grayscale image (valid region)."""
    img = np.asarray(eye_img, dtype=np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    if min(gray.shape) < 3:
        return 0.0
    return float(np.var(convolve2d(gray, _LAPLACIAN, mode="valid")))


def emit_curve_plot(curve: BinnedCurve, out, baseline: BinnedCurve | None = None,
                    labels: tuple[str, str] = ("ours", "baseline"), title: str | None = None) -> Path:
    """Plot mean error per bin with marker area proportional to the bin count."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    populated = [b for b in curve.bins if b.count > 0]
    if not populated:
        raise EvaluationError("curve has no populated bins")
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    series = [(curve, labels[0], "tab:blue", "o")]
    if baseline is not None:
        series.append((baseline, labels[1], "tab:orange", "s"))
    max_count = max(b.count for c, *_ in series for b in c.bins)
    with plt.style.context("default"):
        fig, ax = plt.subplots(figsize=(12, 8), dpi=100)
        xs_all = []
        for c, name, color, marker in series:
            pts = [b for b in c.bins if b.count > 0]
            xs = [(b.lower + b.upper) / 2 for b in pts]
            ys = [b.mean_error for b in pts]
            sizes = [600.0 * b.count / max_count for b in pts]
            xs_all += xs
            ax.plot(xs, ys, color=color, linewidth=1.5, label=name)
            ax.scatter(xs, ys, s=sizes, color=color, marker=marker, alpha=0.6, edgecolors="black")
        lo, hi = min(b.lower for b in populated), max(b.upper for b in populated)
        pad = 0.02 * (hi - lo) if hi > lo else 1.0
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_xlabel(FACTOR_LABELS.get(curve.factor, curve.factor))
        ax.set_ylabel("mean error (cm)")
        ax.set_title(title or f"Prediction error vs {FACTOR_LABELS.get(curve.factor, curve.factor)}")
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best")
        fig.savefig(out, format="png", dpi=100, metadata={"Software": None})
        plt.close(fig)
    return out


@dataclass(frozen=True)
class ModelRow:
    method: str
    training_data: str
    errors: dict[str, float | None]
    coverage: int
    missing: int


@dataclass(frozen=True)
class ComparisonTable:
    columns: tuple[str, ...]
    rows: tuple[ModelRow, ...]

    def to_tsv(self) -> str:
        head = ["method", "training_data", *self.columns]
        lines = ["\t".join(head)]
        for r in self.rows:
            cells = [r.method, r.training_data]
            cells += ["" if r.errors[c] is None else f"{r.errors[c]:.6f}" for c in self.columns]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"


def compare_models(eval_set: Manifest, predictions: Sequence[tuple[str, str, Manifest]],
                   devices: Sequence[str] = ()) -> ComparisonTable:
    """Score prediction manifests (records carrying ``pred2d``) against ``eval_set``.

    Frames are matched by image path. Frames present in the evaluation set
    but missing from a prediction manifest are counted in ``missing``.
    """
    truth = {r.image: r for r in eval_set.records}
    columns = ("all", *devices)
    rows = []
    for name, tag, pm in predictions:
        pairs = [(truth[r.image], r.pred2d) for r in pm.records if r.image in truth and r.pred2d is not None]
        if not pairs:
            raise EvaluationError(f"prediction set {name!r} shares no frames with the evaluation set")
        frames = [f for f, _ in pairs]
        preds = np.array([p for _, p in pairs], dtype=np.float64)
        errors: dict[str, float | None] = {"all": mean_euclidean_error(preds, labels_of(frames))}
        for row in slice_by_device(frames, preds, devices) if devices else []:
            errors[row.device] = row.mean_error
        missing = len(truth) - len(pairs)
        if missing:
            log.warning("prediction set %r covers %d of %d evaluation frames", name, len(pairs), len(truth))
        rows.append(ModelRow(name, tag, errors, len(pairs), missing))
    return ComparisonTable(columns, tuple(rows))
