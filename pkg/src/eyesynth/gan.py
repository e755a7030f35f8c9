"""Alternating adversarial training of the two refiners and two discriminators,
batch refinement of synthetic images and gaze-discrepancy screening."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import nets
from .data import Manifest, ManifestError, load_image, save_image, save_manifest
from .estimator import angular_error_batch
from .losses import (
    LossBundle,
    LossWeights,
    cycle_loss,
    gaze_cycle_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
    total_loss,
    weighted_objective,
)
from .seeds import batch_indices, substream

log = logging.getLogger(__name__)

NET_NAMES = ("G", "F", "D_S", "D_R")
HISTORY_COLUMNS = ("step", "lsgan_G", "lsgan_F", "lsgan_DS", "lsgan_DR", "cycle", "gaze_cycle", "total")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    adam_beta1: float = 0.1
    adam_beta2: float = 0.99
    batch_size: int = 4
    steps: int = 1000
    weights: LossWeights = field(default_factory=LossWeights)
    real_label: float = 0.9
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0 < self.real_label <= 1:
            raise ValueError(f"real_label must be in (0, 1], got {self.real_label}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")

    def adam(self, params) -> torch.optim.Adam:
        return torch.optim.Adam(params, lr=self.learning_rate, betas=(self.adam_beta1, self.adam_beta2))

    def with_(self, **kw) -> TrainConfig:
        return replace(self, **kw)


def build_translation_nets(net_cfg: nets.NetConfig, seed: int) -> dict[str, torch.nn.Module]:
    out = {
        "G": nets.build_refiner(net_cfg),
        "F": nets.build_refiner(net_cfg),
        "D_S": nets.build_discriminator(net_cfg),
        "D_R": nets.build_discriminator(net_cfg),
    }
    for name, net in out.items():
        nets.init_parameters(net, substream(seed, f"init/{name}"))
    return out


@dataclass
class RefinerRun:
    nets: dict[str, torch.nn.Module]
    history: list[LossBundle]
    checkpoints: list[Path]


def _set_requires_grad(modules, flag: bool) -> None:
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def _param_names(modules: dict[str, torch.nn.Module]) -> dict[int, str]:
    return {id(p): f"{k}.{n}" for k, m in modules.items() for n, p in m.named_parameters()}


def discriminator_step(models, s, r, opt_disc, cfg: TrainConfig):
    """Update D_S and D_R: D_R separates real r from G(s), D_S separates s from F(r)."""
    G, F, D_S, D_R = (models[k] for k in NET_NAMES)
    _set_requires_grad((D_S, D_R), True)
    with torch.no_grad():
        fake_r = G(s)
        fake_s = F(r)
    loss_DR = lsgan_discriminator_loss(D_R(r), D_R(fake_r), cfg.real_label)
    loss_DS = lsgan_discriminator_loss(D_S(s), D_S(fake_s), cfg.real_label)
    opt_disc.zero_grad(set_to_none=True)
    (loss_DR + loss_DS).backward()
    opt_disc.step()
    return loss_DS, loss_DR


def generator_step(models, E, s, r, opt_gen, cfg: TrainConfig):
    """Joint G/F update on the weighted objective with the discriminators held fixed."""
    G, F, D_S, D_R = (models[k] for k in NET_NAMES)
    w = cfg.weights
    _set_requires_grad((D_S, D_R), False)
    try:
        fake_r = G(s)
        rec_s = F(fake_r)
        fake_s = F(r)
        rec_r = G(fake_s)
        adv_G = lsgan_generator_loss(D_R(fake_r), cfg.real_label)
        adv_F = lsgan_generator_loss(D_S(fake_s), cfg.real_label)
        cyc = cycle_loss(s, rec_s, r, rec_r)
        if E is not None and w.gaze_cycle > 0:
            gz = gaze_cycle_loss(E, s, rec_s)
        elif E is not None:
            with torch.no_grad():
                gz = gaze_cycle_loss(E, s, rec_s)
        else:
            gz = torch.zeros(())
        objective = weighted_objective(adv_G, adv_F, cyc, gz, w)
        opt_gen.zero_grad(set_to_none=True)
        objective.backward()
        opt_gen.step()
    finally:
        _set_requires_grad((D_S, D_R), True)
    return adv_G, adv_F, cyc, gz


def train_step(models, E, s, r, opt_gen, opt_disc, cfg: TrainConfig) -> LossBundle:
    """One discriminator update followed by one joint G/F update."""
    loss_DS, loss_DR = discriminator_step(models, s, r, opt_disc, cfg)
    adv_G, adv_F, cyc, gz = generator_step(models, E, s, r, opt_gen, cfg)
    return total_loss(adv_G, adv_F, cyc, gz, cfg.weights, lsgan_DS=loss_DS, lsgan_DR=loss_DR)


def _history_line(step: int, b: LossBundle) -> str:
    vals = (b.lsgan_G, b.lsgan_F, b.lsgan_DS, b.lsgan_DR, b.cycle, b.gaze_cycle, b.total)
    return "\t".join([str(step)] + [repr(v) for v in vals]) + "\n"


def read_history(path) -> list[LossBundle]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line or line.startswith("step"):
            continue
        parts = line.split("\t")
        out.append(LossBundle(*(float(v) for v in parts[1:])))
    return out


def train_refiner(syn: Manifest, real: Manifest, E, cfg: TrainConfig = TrainConfig(),
                  net_cfg: nets.NetConfig = nets.NetConfig(), out_dir=None) -> RefinerRun:
    """Train G (synthetic to real), F (real to synthetic) and both discriminators.

    ``E`` is the pre-trained synthetic gaze estimator; it is frozen here and
    never updated. When ``out_dir`` is given, the loss history and the
    checkpoints (``step_XXXXXX.ckpt`` and ``refiner.ckpt``) are written there.
    """
    if len(syn) == 0 or len(real) == 0:
        raise ManifestError("train_refiner needs non-empty synthetic and real manifests")
    if syn.label_kind != "gaze3d":
        raise ManifestError(f"synthetic manifest must carry gaze3d labels, got {syn.label_kind}")
    if real.label_kind != "none":
        raise ManifestError(f"real manifest must be unlabeled, got {real.label_kind}")
    if E is not None:
        nets.freeze(E)

    torch.manual_seed(substream(cfg.seed, "torch"))
    models = build_translation_nets(net_cfg, cfg.seed)
    for m in models.values():
        m.train()
    gen_params = list(models["G"].parameters()) + list(models["F"].parameters())
    disc_params = list(models["D_S"].parameters()) + list(models["D_R"].parameters())
    opt_gen = cfg.adam(gen_params)
    opt_disc = cfg.adam(disc_params)
    names = _param_names(models)

    S = nets.load_stack(syn, net_cfg.input_size)
    R = nets.load_stack(real, net_cfg.input_size)

    out = Path(out_dir) if out_dir is not None else None
    hist_fh = None
    checkpoints: list[Path] = []

    def checkpoint(step: int, name: str | None = None) -> Path | None:
        if out is None:
            return None
        extra = nets.optimizer_arrays(opt_gen, names, "opt_gen")
        extra.update(nets.optimizer_arrays(opt_disc, names, "opt_disc"))
        extra["train.step"] = np.array([float(step)])
        path = out / (name or f"step_{step:06d}.ckpt")
        nets.save_checkpoint(path, models, extra)
        return path

    history: list[LossBundle] = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_fh = open(out / "loss_history.tsv", "w", encoding="utf-8", newline="\n")
        hist_fh.write("\t".join(HISTORY_COLUMNS) + "\n")
        checkpoints.append(checkpoint(0))
    try:
        for step in range(1, cfg.steps + 1):
            s = S[batch_indices(len(S), cfg.batch_size, substream(cfg.seed, "batch/syn"), step)]
            r = R[batch_indices(len(R), cfg.batch_size, substream(cfg.seed, "batch/real"), step)]
            bundle = train_step(models, E, s, r, opt_gen, opt_disc, cfg)
            if hist_fh is not None:
                hist_fh.write(_history_line(step, bundle))
                hist_fh.flush()
            history.append(bundle)
            if not bundle.is_finite():
                checkpoint(step, "diverged.ckpt")
                raise TrainingDivergedError(f"non-finite loss at step {step}: {bundle}")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                checkpoints.append(checkpoint(step))
            if step == 1 or step % 50 == 0:
                log.info("step %d cycle=%.4f gaze=%.5f total=%.4f", step, bundle.cycle, bundle.gaze_cycle, bundle.total)
    finally:
        if hist_fh is not None:
            hist_fh.close()
    if out is not None and cfg.steps > 0:
        checkpoints.append(checkpoint(cfg.steps, "refiner.ckpt"))
    for m in models.values():
        m.eval()
    return RefinerRun(models, history, [c for c in checkpoints if c is not None])


def load_refiners(path, net_cfg: nets.NetConfig = nets.NetConfig()) -> dict[str, torch.nn.Module]:
    models = build_translation_nets(net_cfg, 0)
    nets.load_checkpoint(path, models)
    for m in models.values():
        nets.freeze(m)
    return models


@torch.no_grad()
def translate(net, images: torch.Tensor, chunk: int = 8) -> torch.Tensor:
    net.eval()
    return torch.cat([net(images[i:i + chunk]) for i in range(0, len(images), chunk)]) if len(images) else images


@dataclass
class RefineReport:
    manifest: Manifest
    failures: list[tuple[str, str]]


def refine_batch(G, syn: Manifest, out_dir, size: int = 128, on_error: str = "continue") -> RefineReport:
    """Run G over every synthetic image and write a manifest of the results.

    Output records copy every field of the input record except ``image``.
    """
    if on_error not in ("continue", "abort"):
        raise ValueError("on_error must be 'continue' or 'abort'")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records, failures = [], []
    G.eval()
    for i, rec in enumerate(syn.records):
        name = f"images/{i:06d}_{Path(rec.image).stem}.png"
        try:
            img = load_image(syn.path_of(rec), size)
            with torch.no_grad():
                refined = nets.to_images(G(nets.to_batch(img)))[0]
            save_image(refined, out / name)
        except OSError as exc:
            if on_error == "abort":
                raise
            log.warning("refine failed for %s: %s", rec.image, exc)
            failures.append((rec.image, str(exc)))
            continue
        records.append(replace(rec, image=name))
    m = Manifest(tuple(records), root=out)
    save_manifest(m, out / "manifest.txt")
    return RefineReport(m, failures)


@dataclass
class ScreenReport:
    manifest: Manifest
    angles_deg: np.ndarray
    rejection_rate: float


def screen_refined(E, F, G, syn: Manifest, threshold_deg: float, size: int = 128, chunk: int = 8) -> ScreenReport:
    """Keep records whose gaze survives the synthetic-real-synthetic cycle:
    the angle between E(F(G(s))) and E(s) must not exceed ``threshold_deg``."""
    for net in (E, F, G):
        net.eval()
    angles = []
    with torch.no_grad():
        for i in range(0, len(syn), chunk):
            part = syn.with_records(syn.records[i:i + chunk])
            s = nets.load_stack(part, size)
            a = E(s).double().numpy()
            b = E(F(G(s))).double().numpy()
            angles.append(angular_error_batch(a, b))
    angles_arr = np.concatenate(angles) if angles else np.zeros(0)
    keep = [r for r, ang in zip(syn.records, angles_arr) if ang <= threshold_deg]
    rate = 0.0 if len(syn) == 0 else 1.0 - len(keep) / len(syn)
    if not math.isfinite(rate):
        rate = 0.0
    return ScreenReport(syn.with_records(keep), angles_arr, rate)
