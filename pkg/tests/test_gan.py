import numpy as np
import pytest
import torch

from eyesynth import gan, nets
from eyesynth.data import FrameRecord, Manifest, ManifestError, load_image, save_manifest
from eyesynth.losses import LossWeights

SMALL = nets.NetConfig.reduced(4, input_size=32, residual_blocks=1)


def snapshot(*modules):
    return [p.detach().clone() for m in modules for p in m.parameters()]


def same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def small_E(seed=0):
    return nets.init_parameters(nets.build_gaze_backbone(SMALL, 3), seed)


def fast_cfg(**kw):
    base = dict(steps=3, learning_rate=1e-3, batch_size=2, seed=5)
    base.update(kw)
    return gan.TrainConfig(**base)


@pytest.fixture
def models_and_batch(tiny_sets):
    syn, real = tiny_sets
    models = gan.build_translation_nets(SMALL, 3)
    s = nets.load_stack(syn, 32)[:2]
    r = nets.load_stack(real, 32)[:2]
    return models, s, r


def test_train_config_validation():
    with pytest.raises(ValueError):
        gan.TrainConfig(real_label=0.0)
    with pytest.raises(ValueError):
        gan.TrainConfig(real_label=1.2)
    with pytest.raises(ValueError):
        gan.TrainConfig(steps=-1)
    with pytest.raises(ValueError):
        LossWeights(cycle=-1.0)
    cfg = gan.TrainConfig()
    assert (cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.real_label) == (1e-5, 0.1, 0.99, 0.9)


def test_discriminator_step_leaves_generators_unchanged(models_and_batch):
    models, s, r = models_and_batch
    cfg = fast_cfg()
    opt_d = cfg.adam(list(models["D_S"].parameters()) + list(models["D_R"].parameters()))
    g_before = snapshot(models["G"], models["F"])
    d_before = snapshot(models["D_S"], models["D_R"])
    gan.discriminator_step(models, s, r, opt_d, cfg)
    assert same(g_before, snapshot(models["G"], models["F"]))
    assert not same(d_before, snapshot(models["D_S"], models["D_R"]))


def test_generator_step_leaves_discriminators_unchanged(models_and_batch):
    models, s, r = models_and_batch
    cfg = fast_cfg()
    opt_g = cfg.adam(list(models["G"].parameters()) + list(models["F"].parameters()))
    E = nets.freeze(small_E())
    g_before = snapshot(models["G"], models["F"])
    d_before = snapshot(models["D_S"], models["D_R"])
    gan.generator_step(models, E, s, r, opt_g, cfg)
    assert same(d_before, snapshot(models["D_S"], models["D_R"]))
    assert not same(g_before, snapshot(models["G"], models["F"]))
    # discriminators stay trainable for the next update
    assert all(p.requires_grad for m in ("D_S", "D_R") for p in models[m].parameters())


def test_train_refiner_keeps_E_bitwise_frozen(tiny_sets):
    syn, real = tiny_sets
    E = small_E(1)
    before = snapshot(E) + [b.clone() for b in E.buffers()]
    gan.train_refiner(syn, real, E, fast_cfg(), SMALL)
    after = snapshot(E) + [b.clone() for b in E.buffers()]
    assert same(before, after)


def test_deterministic_history_and_weights(tiny_sets, tmp_path):
    syn, real = tiny_sets
    a = gan.train_refiner(syn, real, small_E(), fast_cfg(), SMALL, out_dir=tmp_path / "a")
    b = gan.train_refiner(syn, real, small_E(), fast_cfg(), SMALL, out_dir=tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a/loss_history.tsv").read_bytes() == (tmp_path / "b/loss_history.tsv").read_bytes()
    assert (tmp_path / "a/refiner.ckpt").read_bytes() == (tmp_path / "b/refiner.ckpt").read_bytes()
    c = gan.train_refiner(syn, real, small_E(), fast_cfg(seed=6), SMALL)
    assert c.history != a.history


def test_loss_history_format(tiny_sets, tmp_path):
    syn, real = tiny_sets
    run = gan.train_refiner(syn, real, small_E(), fast_cfg(), SMALL, out_dir=tmp_path)
    lines = (tmp_path / "loss_history.tsv").read_text().splitlines()
    assert lines[0].split("\t") == list(gan.HISTORY_COLUMNS)
    assert [int(line.split("\t")[0]) for line in lines[1:]] == [1, 2, 3]
    assert all(len(line.split("\t")) == 8 for line in lines)
    back = gan.read_history(tmp_path / "loss_history.tsv")
    assert back == run.history
    for b in back:
        assert b.is_finite()
        assert b.total == pytest.approx(b.lsgan_G + b.lsgan_F + b.cycle + b.gaze_cycle, rel=1e-12)


def test_zero_steps_writes_initial_checkpoint_only(tiny_sets, tmp_path):
    syn, real = tiny_sets
    run = gan.train_refiner(syn, real, small_E(), fast_cfg(steps=0), SMALL, out_dir=tmp_path)
    assert run.history == []
    assert [p.name for p in run.checkpoints] == ["step_000000.ckpt"]
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["step_000000.ckpt"]
    assert (tmp_path / "loss_history.tsv").read_text().splitlines() == ["\t".join(gan.HISTORY_COLUMNS)]


def test_checkpoint_schedule_and_reload(tiny_sets, tmp_path):
    syn, real = tiny_sets
    run = gan.train_refiner(syn, real, small_E(), fast_cfg(steps=4, checkpoint_every=2), SMALL, out_dir=tmp_path)
    assert [p.name for p in run.checkpoints] == ["step_000000.ckpt", "step_000002.ckpt", "step_000004.ckpt",
                                                 "refiner.ckpt"]
    loaded = gan.load_refiners(tmp_path / "refiner.ckpt", SMALL)
    x = nets.load_stack(syn, 32)[:2]
    with torch.no_grad():
        assert torch.equal(loaded["G"](x), run.nets["G"](x))
    arrays = nets.load_arrays(tmp_path / "refiner.ckpt")
    assert arrays["train.step"][0] == 4.0
    assert any(k.startswith("opt_gen.") for k in arrays) and any(k.startswith("opt_disc.") for k in arrays)


def test_non_finite_loss_aborts_with_diagnostic_checkpoint(tiny_sets, tmp_path):
    syn, real = tiny_sets
    E = small_E()
    with torch.no_grad():
        next(E.parameters()).fill_(float("nan"))
    with pytest.raises(gan.TrainingDivergedError, match="step 1"):
        gan.train_refiner(syn, real, E, fast_cfg(), SMALL, out_dir=tmp_path)
    assert (tmp_path / "diverged.ckpt").is_file()
    assert not (tmp_path / "refiner.ckpt").exists()


def test_manifest_preconditions(tiny_sets):
    syn, real = tiny_sets
    with pytest.raises(ManifestError):
        gan.train_refiner(syn.with_records([]), real, None, fast_cfg(), SMALL)
    with pytest.raises(ManifestError):
        gan.train_refiner(syn, syn, None, fast_cfg(), SMALL)
    with pytest.raises(ManifestError):
        gan.train_refiner(real, real, None, fast_cfg(), SMALL)


def test_refine_batch_labels_range_and_determinism(tiny_sets, tmp_path):
    syn, _ = tiny_sets
    G = gan.build_translation_nets(SMALL, 0)["G"]
    rep = gan.refine_batch(G, syn, tmp_path / "a", size=32)
    assert rep.failures == []
    assert len(rep.manifest) == len(syn)
    for a, b in zip(syn.records, rep.manifest.records):
        assert a.gaze3d == b.gaze3d and a.landmarks == b.landmarks and a.device == b.device
        img = load_image(rep.manifest.path_of(b), None)
        assert img.shape == (32, 32, 3)
        assert img.min() >= -1.0 and img.max() <= 1.0
    rep2 = gan.refine_batch(G, syn, tmp_path / "b", size=32)
    for a, b in zip(rep.manifest.records, rep2.manifest.records):
        assert rep.manifest.path_of(a).read_bytes() == rep2.manifest.path_of(b).read_bytes()
    assert (tmp_path / "a/manifest.txt").read_bytes() == (tmp_path / "b/manifest.txt").read_bytes()


def test_refine_batch_io_failures(tiny_sets, tmp_path):
    syn, _ = tiny_sets
    bad = tmp_path / "src"
    bad.mkdir()
    (bad / "broken.png").write_bytes(b"not an image")
    recs = [FrameRecord(image=str(syn.path_of(r)), gaze3d=r.gaze3d) for r in syn.records[:2]]
    recs.insert(1, FrameRecord(image="broken.png", gaze3d=syn.records[2].gaze3d))
    m = Manifest(tuple(recs), root=bad)
    save_manifest(m, bad / "manifest.txt")
    G = torch.nn.Identity()
    rep = gan.refine_batch(G, m, tmp_path / "out", size=32)
    assert [f[0] for f in rep.failures] == ["broken.png"]
    assert len(rep.manifest) == 2
    with pytest.raises(OSError):
        gan.refine_batch(G, m, tmp_path / "out2", size=32, on_error="abort")
    with pytest.raises(ValueError):
        gan.refine_batch(G, m, tmp_path / "out3", on_error="skip")


def test_screen_thresholds(tiny_sets):
    syn, _ = tiny_sets
    models = gan.build_translation_nets(SMALL, 0)
    E = nets.freeze(small_E(2))
    E.eval()
    everything = gan.screen_refined(E, models["F"], models["G"], syn, 180.0, size=32)
    assert len(everything.manifest) == len(syn) and everything.rejection_rate == 0.0
    strict = gan.screen_refined(E, models["F"], models["G"], syn, 0.0, size=32)
    n_discrepant = int(np.sum(everything.angles_deg > 0))
    assert n_discrepant > 0
    assert len(strict.manifest) == len(syn) - n_discrepant
    assert strict.rejection_rate == pytest.approx(n_discrepant / len(syn))


def test_screen_identity_cycle_rejects_nothing(tiny_sets):
    syn, _ = tiny_sets
    E = nets.freeze(small_E(2))
    ident = torch.nn.Identity()
    for thr in (0.0, 1.0, 180.0):
        rep = gan.screen_refined(E, ident, ident, syn, thr, size=32)
        assert rep.rejection_rate == 0.0
        assert rep.manifest.records == syn.records
        assert np.all(rep.angles_deg == 0.0)
