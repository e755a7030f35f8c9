"""Adversarial, cycle and gaze-cycle objectives for the translation networks."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields

import torch


class LossInputError(ValueError):
    pass


def _tensor(x) -> torch.Tensor:
    t = x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
    if t.numel() == 0:
        raise LossInputError("empty score array")
    return t


def lsgan_discriminator_loss(scores_true_domain, scores_fake, real_label: float = 0.9):
    """Least-squares discriminator loss: push true-domain scores to
    ``real_label`` and scores of translated images to 0."""
    t = _tensor(scores_true_domain)
    f = _tensor(scores_fake)
    return ((t - real_label) ** 2).mean() + (f ** 2).mean()


def lsgan_generator_loss(scores_of_generated, real_label: float = 0.9):
    s = _tensor(scores_of_generated)
    return ((s - real_label) ** 2).mean()


def cycle_loss(s, s_rec, r, r_rec):
    """Mean absolute reconstruction error of both translation cycles."""
    s, s_rec, r, r_rec = (x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)
                          for x in (s, s_rec, r, r_rec))
    if s.shape != s_rec.shape or r.shape != r_rec.shape:
        raise LossInputError(f"shape mismatch: {tuple(s.shape)}/{tuple(s_rec.shape)}, "
                             f"{tuple(r.shape)}/{tuple(r_rec.shape)}")
    return (s_rec - s).abs().mean() + (r_rec - r).abs().mean()


def gaze_cycle_loss(E, s, s_rec):
    """Mean squared distance between the frozen estimator's predictions on
    the originals and on their reconstructions.

    Gradients reach ``s_rec`` only; ``E`` must already be frozen.
    """
    if s.shape != s_rec.shape:
        raise LossInputError(f"shape mismatch: {tuple(s.shape)} vs {tuple(s_rec.shape)}")
    if any(p.requires_grad for p in E.parameters()):
        raise LossInputError("gaze estimator parameters must be frozen")
    with torch.no_grad():
        target = E(s)
    pred = E(s_rec)
    return ((pred - target) ** 2).sum(dim=1).mean()


@dataclass(frozen=True)
class LossWeights:
    adv_G: float = 1.0
    adv_F: float = 1.0
    cycle: float = 1.0
    gaze_cycle: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class LossBundle:
    lsgan_G: float
    lsgan_F: float
    lsgan_DS: float
    lsgan_DR: float
    cycle: float
    gaze_cycle: float
    total: float

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in astuple(self))


def weighted_objective(lsgan_G, lsgan_F, cycle, gaze_cycle, weights: LossWeights):
    """Generator-side objective; works on floats or tensors.

    Zero-weighted terms are dropped rather than multiplied, so they cannot
    inject NaN from an infinite component.
    """
    terms = zip((weights.adv_G, weights.adv_F, weights.cycle, weights.gaze_cycle),
                (lsgan_G, lsgan_F, cycle, gaze_cycle))
    total = 0.0
    for w, v in terms:
        if w != 0:
            total = total + w * v
    return total


def total_loss(lsgan_G, lsgan_F, cycle, gaze_cycle, weights: LossWeights = LossWeights(),
               lsgan_DS=0.0, lsgan_DR=0.0) -> LossBundle:
    vals = [float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            for v in (lsgan_G, lsgan_F, lsgan_DS, lsgan_DR, cycle, gaze_cycle)]
    g, f, ds, dr, c, gz = vals
    return LossBundle(g, f, ds, dr, c, gz, float(weighted_objective(g, f, c, gz, weights)))
