"""Command-line entry point running one pipeline stage per subcommand.

Exit codes: 0 success, 1 validation or configuration error, 2 runtime
failure, 3 completed with a warning (nothing to process).
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import nets
from .data import FrameRecord, Manifest, ManifestError, load_image, load_manifest, save_image, save_manifest
from .seeds import substream

log = logging.getLogger("eyesynth")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_WARNING = 0, 1, 2, 3
STAGES = ("extract-textures", "pretrain-gaze", "train-refiner", "refine", "screen",
          "train-estimator", "evaluate", "plot")


class ConfigError(ValueError):
    pass


class MissingArtifactError(ConfigError):
    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path}; run the '{stage}' stage first")
        self.path, self.stage = path, stage


class StageWarning(Exception):
    """Stage finished but had nothing to do."""


DEFAULTS = {
    "run": {"seed": "0", "out": "runs/default", "allow_unknown_device": "false"},
    "nets": {"input_size": "128", "residual_blocks": "6", "refiner_channels": "32",
             "disc_channels": "64", "backbone_channels": "32"},
    "extract_textures": {"uv_size": "256", "border": "-1.0"},
    "pretrain_gaze": {"steps": "500", "learning_rate": "0.001", "batch_size": "32",
                      "adam_beta1": "0.1", "adam_beta2": "0.99"},
    "train_refiner": {"steps": "1000", "learning_rate": "0.00001", "batch_size": "4",
                      "adam_beta1": "0.1", "adam_beta2": "0.99", "real_label": "0.9",
                      "w_adv_g": "1.0", "w_adv_f": "1.0", "w_cycle": "1.0", "w_gaze_cycle": "1.0",
                      "checkpoint_every": "0"},
    "screen": {"threshold_deg": "5.0"},
    "train_estimator": {"steps": "500", "learning_rate": "0.01", "batch_size": "32",
                        "adam_beta1": "0.1", "adam_beta2": "0.99", "eye_distance_cm": "30.0",
                        "squared_loss": "false", "use_screened": "true"},
    "evaluate": {"devices": ""},
    "plot": {"n_bins": "8"},
}


class RunConfig:
    """Sectioned key=value configuration; relative paths resolve against the file."""

    def __init__(self, parser: configparser.ConfigParser, base: Path, text: str):
        self.cp = parser
        self.base = base
        self.text = text

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> RunConfig:
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        base = Path.cwd()
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file not found: {path}")
            try:
                cp.read(path, encoding="utf-8")
            except configparser.Error as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from None
            base = path.resolve().parent
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ConfigError(f"override {dotted!r} must look like section.key")
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, key, value)
        lines = []
        for section in sorted(cp.sections()):
            for key in sorted(cp[section]):
                lines.append(f"{section}.{key}={cp[section][key]}")
        return cls(cp, base, "\n".join(lines) + "\n")

    def get(self, section, key, fallback=None):
        return self.cp.get(section, key, fallback=fallback)

    def getint(self, section, key):
        try:
            return self.cp.getint(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer") from None

    def getfloat(self, section, key):
        try:
            return self.cp.getfloat(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number") from None

    def getbool(self, section, key):
        try:
            return self.cp.getboolean(section, key)
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be true/false") from None

    def path(self, section, key, required=True) -> Path | None:
        val = self.get(section, key)
        if not val:
            if required:
                raise ConfigError(f"[{section}] {key} is required")
            return None
        p = Path(val)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ConfigError(f"[{section}] {key}: path does not exist: {p}")
        return p

    @property
    def seed(self) -> int:
        return self.getint("run", "seed")

    @property
    def out(self) -> Path:
        p = Path(self.get("run", "out"))
        return p if p.is_absolute() else self.base / p

    def stage_seed(self, stage: str) -> int:
        return substream(self.seed, stage)

    def net_config(self) -> nets.NetConfig:
        try:
            return nets.NetConfig(
                input_size=self.getint("nets", "input_size"),
                residual_blocks=self.getint("nets", "residual_blocks"),
                refiner_channels=self.getint("nets", "refiner_channels"),
                disc_channels=self.getint("nets", "disc_channels"),
                backbone_channels=self.getint("nets", "backbone_channels"),
            )
        except nets.ConfigError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, section: str, stage: str):
        from .gan import TrainConfig
        from .losses import LossWeights

        kw = dict(
            learning_rate=self.getfloat(section, "learning_rate"),
            adam_beta1=self.getfloat(section, "adam_beta1"),
            adam_beta2=self.getfloat(section, "adam_beta2"),
            batch_size=self.getint(section, "batch_size"),
            steps=self.getint(section, "steps"),
            seed=self.stage_seed(stage),
        )
        try:
            if section == "train_refiner":
                kw["real_label"] = self.getfloat(section, "real_label")
                kw["checkpoint_every"] = self.getint(section, "checkpoint_every")
                kw["weights"] = LossWeights(
                    self.getfloat(section, "w_adv_g"), self.getfloat(section, "w_adv_f"),
                    self.getfloat(section, "w_cycle"), self.getfloat(section, "w_gaze_cycle"))
            return TrainConfig(**kw)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def content_hash(paths) -> str:
    """SHA-256 over the bytes of every file (recursing into directories) in sorted order."""
    h = hashlib.sha256()
    files = []
    for p in paths:
        p = Path(p)
        files += sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
    for f in files:
        h.update(f.name.encode("utf-8"))
        h.update(hashlib.sha256(f.read_bytes()).digest())
    return h.hexdigest()


def write_run_meta(out_dir: Path, cfg: RunConfig, stage: str, inputs) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    text = (f"stage={stage}\nconfig_sha256={cfg.digest()}\nglobal_seed={cfg.seed}\n"
            f"stage_seed={cfg.stage_seed(stage)}\ninputs_sha256={content_hash(inputs)}\n")
    (out_dir / "run_meta.txt").write_text(text, encoding="utf-8")


def write_metrics(out_dir: Path, values: dict) -> None:
    lines = [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items()]
    (out_dir / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


# Stage implementations ----------------------------------------------------------


def cmd_extract_textures(cfg: RunConfig, args) -> int:
    from .geometry import DEFAULT_CANONICAL_LANDMARKS, extract_uv_texture, load_canonical_landmarks

    faces = cfg.path("data", "faces_dir")
    canon_path = cfg.path("data", "canonical_landmarks", required=False)
    canon = load_canonical_landmarks(canon_path) if canon_path else DEFAULT_CANONICAL_LANDMARKS
    uv_size = cfg.getint("extract_textures", "uv_size")
    border = cfg.getfloat("extract_textures", "border")
    out = cfg.out / "textures"
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = sorted(p for p in faces.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    records, failures = [], []
    for img_path in images:
        try:
            lm = load_canonical_landmarks(img_path.with_suffix(".landmarks"))
            face = load_image(img_path, target=None)
            tex = extract_uv_texture(face, lm, canon, uv_size, source=str(img_path.name), border=border)
            name = f"images/{img_path.stem}_uv.png"
            save_image(tex.image, out / name)
            records.append(FrameRecord(image=name))
        except (OSError, ValueError) as exc:
            log.warning("texture extraction failed for %s: %s", img_path.name, exc)
            failures.append(f"{img_path.name}\t{exc}")
    save_manifest(Manifest(tuple(records), root=out), out / "manifest.txt")
    (out / "failures.txt").write_text("".join(f + "\n" for f in failures), encoding="utf-8")
    write_metrics(out, {"inputs": len(images), "textures": len(records), "failures": len(failures)})
    write_run_meta(out, cfg, "extract-textures", [faces])
    if not images:
        raise StageWarning(f"no face images found in {faces}")
    if not records:
        raise RuntimeError("every texture extraction failed; see failures.txt")
    return EXIT_OK


def cmd_pretrain_gaze(cfg: RunConfig, args) -> int:
    from .estimator import pretrain_gaze_estimator

    syn_path = cfg.path("data", "synthetic")
    syn = load_manifest(syn_path)
    syn.require(kind="gaze3d")
    tc = cfg.train_config("pretrain_gaze", "pretrain-gaze")
    net_cfg = cfg.net_config()
    E, err = pretrain_gaze_estimator(syn, tc, net_cfg)
    out = cfg.out / "pretrain_gaze"
    nets.save_checkpoint(out / "E.ckpt", {"E": E})
    write_metrics(out, {"train_mean_angular_error_deg": err, "steps": tc.steps, "images": len(syn)})
    write_run_meta(out, cfg, "pretrain-gaze", [syn_path])
    log.info("E train-set mean angular error %.3f deg", err)
    return EXIT_OK


def load_E(cfg: RunConfig):
    path = need(cfg.out / "pretrain_gaze" / "E.ckpt", "pretrain-gaze")
    E = nets.build_gaze_backbone(cfg.net_config(), 3)
    nets.load_checkpoint(path, {"E": E})
    return nets.freeze(E)


def cmd_train_refiner(cfg: RunConfig, args) -> int:
    from .gan import train_refiner

    E = load_E(cfg)
    syn_path, real_path = cfg.path("data", "synthetic"), cfg.path("data", "real")
    syn, real = load_manifest(syn_path), load_manifest(real_path)
    tc = cfg.train_config("train_refiner", "train-refiner")
    out = cfg.out / "train_refiner"
    run = train_refiner(syn, real, E, tc, cfg.net_config(), out_dir=out)
    last = run.history[-1] if run.history else None
    metrics = {"steps": tc.steps}
    if last is not None:
        metrics.update(first_cycle=run.history[0].cycle, last_cycle=last.cycle, last_gaze_cycle=last.gaze_cycle,
                       last_total=last.total)
    write_metrics(out, metrics)
    write_run_meta(out, cfg, "train-refiner", [syn_path, real_path, cfg.out / "pretrain_gaze" / "E.ckpt"])
    return EXIT_OK


def load_refiner_nets(cfg: RunConfig):
    from .gan import load_refiners

    path = need(cfg.out / "train_refiner" / "refiner.ckpt", "train-refiner")
    return load_refiners(path, cfg.net_config())


def cmd_refine(cfg: RunConfig, args) -> int:
    from .gan import refine_batch

    models = load_refiner_nets(cfg)
    syn_path = cfg.path("data", "synthetic")
    syn = load_manifest(syn_path)
    out = cfg.out / "refine"
    report = refine_batch(models["G"], syn, out, cfg.net_config().input_size,
                          on_error="abort" if args.abort_on_error else "continue")
    write_metrics(out, {"inputs": len(syn), "refined": len(report.manifest), "failures": len(report.failures)})
    write_run_meta(out, cfg, "refine", [syn_path, cfg.out / "train_refiner" / "refiner.ckpt"])
    return EXIT_OK if not report.failures else EXIT_RUNTIME


def cmd_screen(cfg: RunConfig, args) -> int:
    from .gan import screen_refined

    refined_path = need(cfg.out / "refine" / "manifest.txt", "refine")
    models = load_refiner_nets(cfg)
    E = load_E(cfg)
    syn_path = cfg.path("data", "synthetic")
    syn = load_manifest(syn_path)
    refined = load_manifest(refined_path)
    threshold = cfg.getfloat("screen", "threshold_deg")
    report = screen_refined(E, models["F"], models["G"], syn, threshold, cfg.net_config().input_size)
    kept = {r.image for r in report.manifest}
    # refined image names start with the index of their synthetic source record
    by_source = {syn.records[int(Path(r.image).name.split("_", 1)[0])].image: r for r in refined.records}
    out = cfg.out / "screen"
    keep_refined = refined.with_records(by_source[r.image] for r in syn.records
                                        if r.image in kept and r.image in by_source)
    out.mkdir(parents=True, exist_ok=True)
    save_manifest(Manifest(tuple(replace(r, image=str((refined.root / r.image).resolve())) for r in keep_refined),
                           root=out), out / "manifest.txt")
    (out / "angles.tsv").write_text(
        "".join(f"{r.image}\t{a!r}\n" for r, a in zip(syn.records, report.angles_deg.tolist())), encoding="utf-8")
    write_metrics(out, {"threshold_deg": threshold, "kept": len(keep_refined), "total": len(syn),
                        "rejection_rate": report.rejection_rate})
    write_run_meta(out, cfg, "screen", [syn_path, refined_path])
    return EXIT_OK


def refined_as_screen(m: Manifest, eye_distance_cm: float) -> Manifest:
    """Turn gaze3d-labeled refined frames into screen2d frames for estimator training."""
    from .estimator import gaze_to_screen

    recs = [replace(r, gaze3d=None, screen2d=gaze_to_screen(r.gaze3d, eye_distance_cm)) for r in m.records]
    return m.with_records(recs)


def _estimator_training_sets(cfg: RunConfig):
    right = load_manifest(cfg.path("data", "estimator_train_right"))
    left_path = cfg.path("data", "estimator_train_left", required=False)
    left = load_manifest(left_path) if left_path else None
    return right, left


def cmd_train_estimator(cfg: RunConfig, args) -> int:
    from .estimator import save_estimator, train_estimator

    right, left = _estimator_training_sets(cfg)
    net_cfg = cfg.net_config()
    tc = cfg.train_config("train_estimator", "train-estimator")
    squared = cfg.getbool("train_estimator", "squared_loss")
    eye_d = cfg.getfloat("train_estimator", "eye_distance_cm")
    refined = None
    if cfg.getbool("train_estimator", "use_screened") and (cfg.out / "screen" / "manifest.txt").exists():
        refined = load_manifest(cfg.out / "screen" / "manifest.txt")
    elif (cfg.out / "refine" / "manifest.txt").exists():
        refined = load_manifest(cfg.out / "refine" / "manifest.txt")
    regimes = {"R": []}
    if refined is not None and len(refined):
        regimes["RF"] = [refined_as_screen(refined, eye_d)]
    else:
        log.warning("no refined frames found; training the real-only (R) regime only")
    out = cfg.out / "train_estimator"
    metrics = {}
    inputs = [cfg.path("data", "estimator_train_right")]
    for tag, extra in regimes.items():
        for eye, m in (("right", right), ("left", left)):
            if m is None:
                continue
            run = train_estimator([m, *extra], None, tc.with_(seed=substream(tc.seed, f"{tag}/{eye}")), net_cfg,
                                  squared_loss=squared)
            d = out / tag
            d.mkdir(parents=True, exist_ok=True)
            save_estimator(run.model, d / f"{eye}.ckpt", d / f"{eye}_profiles.txt")
            metrics[f"{tag}_{eye}_initial_train_error_cm"] = run.initial_train_error
            metrics[f"{tag}_{eye}_final_train_error_cm"] = run.final_train_error
    write_metrics(out, metrics)
    write_run_meta(out, cfg, "train-estimator", inputs)
    return EXIT_OK


def _external_predictions(cfg: RunConfig):
    """``[data] external_predictions`` lists ``name|tag|path`` entries separated by ';'."""
    spec = cfg.get("data", "external_predictions", fallback="") or ""
    out = []
    for item in filter(None, (s.strip() for s in spec.split(";"))):
        parts = item.split("|")
        if len(parts) != 3:
            raise ConfigError(f"external prediction entry {item!r} must be name|tag|path")
        p = Path(parts[2])
        p = p if p.is_absolute() else cfg.base / p
        out.append((parts[0], parts[1], load_manifest(need(p, "external"), check_paths=False)))
    return out


def cmd_evaluate(cfg: RunConfig, args) -> int:
    from .estimator import combine_two_eye, load_estimator, predict_manifest
    from .evaluation import FACTORS, BinSpec, bin_errors, compare_models, factor_values, quantile_edges

    net_cfg = cfg.net_config()
    test_right_path = cfg.path("data", "estimator_test_right")
    test_right = load_manifest(test_right_path)
    test_left_path = cfg.path("data", "estimator_test_left", required=False)
    test_left = load_manifest(test_left_path) if test_left_path else None
    if test_left is not None and [r.screen2d for r in test_left] != [r.screen2d for r in test_right]:
        raise ConfigError("left and right test manifests must list the same frames in the same order")
    model_dir = need(cfg.out / "train_estimator", "train-estimator")
    out = cfg.out / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    allow = args.allow_unknown_device or cfg.getbool("run", "allow_unknown_device")
    predictions = []
    for tag in ("R", "RF"):
        d = model_dir / tag
        if not (d / "right.ckpt").exists():
            continue
        right = load_estimator(d / "right.ckpt", d / "right_profiles.txt", net_cfg)
        pr = predict_manifest(right, test_right, net_cfg, allow)
        if test_left is not None and (d / "left.ckpt").exists():
            left = load_estimator(d / "left.ckpt", d / "left_profiles.txt", net_cfg)
            pl = predict_manifest(left, test_left, net_cfg, allow)
            pts = [combine_two_eye(a, b).point for a, b in zip(pr, pl)]
            method = "two-eye"
        else:
            pts = [tuple(map(float, p)) for p in pr]
            method = "single-eye"
        pm = test_right.with_records(replace(r, pred2d=p) for r, p in zip(test_right.records, pts))
        save_manifest(pm, out / f"predictions_{tag}.txt")
        predictions.append((f"{method}-{tag}", tag, pm))
    if not predictions:
        raise MissingArtifactError(model_dir / "R" / "right.ckpt", "train-estimator")
    predictions += _external_predictions(cfg)
    devices = [d.strip() for d in cfg.get("evaluate", "devices").split(",") if d.strip()]
    table = compare_models(test_right, predictions, devices)
    (out / "comparison.tsv").write_text(table.to_tsv(), encoding="utf-8")

    n_bins = cfg.getint("plot", "n_bins")
    for factor in FACTORS:
        edges = quantile_edges(factor_values(test_right.records, factor), n_bins)
        lines = ["method\tlower\tupper\tmean_error_cm\tcount"]
        for name, _, pm in predictions[:2]:
            frames = list(test_right.records)
            curve = bin_errors(frames, [r.pred2d for r in pm.records], BinSpec(factor, edges))
            for b in curve.bins:
                err = "" if b.mean_error is None else repr(b.mean_error)
                lines.append(f"{name}\t{b.lower!r}\t{b.upper!r}\t{err}\t{b.count}")
        (out / f"curve_{factor}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_run_meta(out, cfg, "evaluate", [test_right_path, model_dir])
    print(table.to_tsv(), end="")
    return EXIT_OK


def read_curve_tsv(path):
    from .evaluation import Bin, BinnedCurve

    factor = Path(path).stem.removeprefix("curve_")
    rows: dict[str, list] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        name, lo, hi, err, count = line.split("\t")
        rows.setdefault(name, []).append(Bin(float(lo), float(hi), float(err) if err else None, int(count)))
    return {name: BinnedCurve(factor, tuple(bins), 0) for name, bins in rows.items()}


def cmd_plot(cfg: RunConfig, args) -> int:
    from .evaluation import FACTORS, emit_curve_plot

    ev = need(cfg.out / "evaluate", "evaluate")
    out = cfg.out / "plot"
    inputs = []
    for factor in FACTORS:
        path = need(ev / f"curve_{factor}.tsv", "evaluate")
        inputs.append(path)
        curves = read_curve_tsv(path)
        names = list(curves)
        # the refined-data model is "ours"; the real-only model is the comparison
        ours = next((n for n in names if n.endswith("-RF")), names[0])
        base = next((n for n in names if n != ours), None)
        emit_curve_plot(curves[ours], out / f"{factor}.png", curves[base] if base else None,
                        labels=(ours, base or ""))
    write_run_meta(out, cfg, "plot", inputs)
    return EXIT_OK


COMMANDS = {
    "extract-textures": cmd_extract_textures,
    "pretrain-gaze": cmd_pretrain_gaze,
    "train-refiner": cmd_train_refiner,
    "refine": cmd_refine,
    "screen": cmd_screen,
    "train-estimator": cmd_train_estimator,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value run configuration")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="override [run] out")
    common.add_argument("--allow-unknown-device", action="store_true",
                        help="use an identity calibration for devices without a learned profile")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any config key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="eyesynth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        p = sub.add_parser(name, parents=[common])
        if name == "refine":
            p.add_argument("--abort-on-error", action="store_true")
    mk = sub.add_parser("make-fixture", help="write the procedural smoke fixture")
    mk.add_argument("dest")
    mk.add_argument("--seed", type=int, default=0)
    mk.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "make-fixture":
        from .fixtures import make_smoke_fixture

        make_smoke_fixture(args.dest, seed=args.seed)
        return EXIT_OK
    try:
        overrides = {}
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
            overrides[key] = val
        if args.seed is not None:
            overrides["run.seed"] = str(args.seed)
        if args.out is not None:
            overrides["run.out"] = str(Path(args.out).resolve())
        cfg = RunConfig.load(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except StageWarning as exc:
        log.warning("%s", exc)
        print(f"warning: {exc}", file=sys.stderr)
        return EXIT_WARNING
    except (ConfigError, ManifestError, nets.ConfigError, nets.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.exception("stage %s failed", args.command)
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
