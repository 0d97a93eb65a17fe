"""Trainer tests: schedule shape, determinism, accumulation math, exact resume."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from rngt.errors import ConfigMismatchError, TrainingDivergedError
from rngt.losses import PerceptualFeatures
from rngt.model import ModelConfig, RngModel
from rngt.trainer import (
    SceneDataset,
    TrainConfig,
    load_checkpoint,
    lr_schedule,
    make_optimizer,
    save_checkpoint,
    step_batches,
    train,
    train_step,
)

TINY_MODEL = ModelConfig(
    layers=2, dim=64, heads=4, patch_size=8, registers=2, resolution=32, head_channels=(24, 12, 8)
)


def tiny_config(**overrides) -> TrainConfig:
    base = dict(
        steps=6,
        warmup_steps=2,
        peak_lr=1e-3,
        accumulation=2,
        dataset_size=3,
        views_per_scene=8,
        checkpoint_interval=100,
        model=TINY_MODEL,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    cfg = tiny_config()
    ds = SceneDataset(
        tmp_path_factory.mktemp("scenes"), cfg.dataset_size, cfg.seed, 32, cfg.views_per_scene
    )
    ds.ensure_generated()
    return ds


# -- learning-rate schedule -----------------------------------------------------


def test_lr_schedule_starts_at_zero():
    assert lr_schedule(0, TrainConfig()) == 0.0


def test_lr_schedule_peaks_at_warmup_end():
    cfg = TrainConfig()
    assert lr_schedule(cfg.warmup_steps, cfg) == pytest.approx(6e-4, rel=1e-12)


def test_lr_schedule_cosine_tail_is_tiny():
    cfg = TrainConfig()  # desk defaults: 5000 steps, 300 warmup
    assert lr_schedule(cfg.steps - 1, cfg) <= 1e-6 * cfg.peak_lr


def test_lr_schedule_continuous_at_junction():
    cfg = TrainConfig()
    before = lr_schedule(cfg.warmup_steps - 1, cfg)
    at = lr_schedule(cfg.warmup_steps, cfg)
    assert at - before < 2 * cfg.peak_lr / cfg.warmup_steps


def test_lr_schedule_rejects_out_of_range():
    cfg = TrainConfig()
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)
    with pytest.raises(ValueError):
        lr_schedule(cfg.steps, cfg)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(steps=10, warmup_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(peak_lr=0.0)


# -- dataset ---------------------------------------------------------------------


def test_dataset_files_and_reload(dataset):
    views = dataset.load_scene(0)
    assert len(views) == 8
    v = views[0]
    assert v.rgb.shape == (32, 32, 3)
    assert np.array_equal(v.mask, v.depth > 0)
    again = dataset.load_scene(0)
    assert again is views  # lru-cached


def test_dataset_deterministic_across_instances(tmp_path, dataset):
    other = SceneDataset(tmp_path / "b", dataset.size, dataset.seed, 32, dataset.views)
    other.ensure_generated()
    a = dataset.load_scene(1)[0]
    b = other.load_scene(1)[0]
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)


def test_step_batches_deterministic(dataset):
    cfg = tiny_config()
    a = step_batches(cfg, dataset, step=3)
    b = step_batches(cfg, dataset, step=3)
    assert len(a) == cfg.accumulation
    for ma, mb in zip(a, b):
        assert len(ma) == 3 * cfg.scenes_per_micro
        for ea, eb in zip(ma, mb):
            assert np.array_equal(ea.target.rgb, eb.target.rgb)


# -- train_step -------------------------------------------------------------------


def run_steps(cfg, dataset, n, model=None, optimizer=None, start=0):
    model = model or RngModel(cfg.model)
    optimizer = optimizer or make_optimizer(model, cfg)
    perceptual = PerceptualFeatures(cfg.model.seed)
    reports = []
    for step in range(start, start + n):
        reports.append(
            train_step(model, optimizer, step_batches(cfg, dataset, step), cfg, step, perceptual)
        )
    return model, optimizer, reports


def test_training_is_deterministic(dataset):
    cfg = tiny_config()
    _, _, a = run_steps(cfg, dataset, 3)
    _, _, b = run_steps(cfg, dataset, 3)
    for ra, rb in zip(a, b):
        assert ra.total == rb.total
        assert ra.to_json() == rb.to_json()


def test_zero_learning_rate_keeps_weights(dataset):
    cfg = tiny_config(peak_lr=1e-30, warmup_steps=1)
    model = RngModel(cfg.model)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    optimizer = make_optimizer(model, cfg)
    perceptual = PerceptualFeatures(cfg.model.seed)
    # step 0 has lr exactly 0 from the warmup ramp
    train_step(model, optimizer, step_batches(cfg, dataset, 0), cfg, 0, perceptual)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k]), k


def test_fused_and_separate_forwards_agree(dataset):
    cfg_fused = tiny_config()
    cfg_plain = tiny_config(fuse_targets=False)
    _, _, fused = run_steps(cfg_fused, dataset, 2)
    _, _, plain = run_steps(cfg_plain, dataset, 2)
    for rf, rp in zip(fused, plain):
        assert rf.total == pytest.approx(rp.total, rel=1e-4)


def test_accumulation_equivalence_in_float64(dataset):
    """Accumulating 2 half-batches averages to the same gradient as one full batch."""
    cfg = tiny_config()
    batches = step_batches(cfg, dataset, 0)
    perceptual = PerceptualFeatures(cfg.model.seed).double()

    def grads(micro_batches):
        model = RngModel(cfg.model).double()
        from rngt.trainer import _forward_micro

        for mb in micro_batches:
            loss, _ = _forward_micro(model, mb, cfg, perceptual)
            (loss / len(micro_batches)).backward()
        return [p.grad.clone() for p in model.parameters()]

    two = grads([batches[0], batches[1]])
    one = grads([batches[0] + batches[1]])
    # identical up to float64 reassociation
    for g2, g1 in zip(two, one):
        assert torch.allclose(g2, g1, atol=1e-12, rtol=1e-9)


def test_divergence_raises(dataset):
    cfg = tiny_config()
    model = RngModel(cfg.model)
    with torch.no_grad():
        model.patch_embed.weight.fill_(float("nan"))
    optimizer = make_optimizer(model, cfg)
    with pytest.raises(TrainingDivergedError):
        train_step(
            model, optimizer, step_batches(cfg, dataset, 0), cfg, 0, PerceptualFeatures(cfg.model.seed)
        )


# -- checkpointing ------------------------------------------------------------------


def test_checkpoint_save_load_save_byte_identical(tmp_path, dataset):
    cfg = tiny_config()
    model, optimizer, _ = run_steps(cfg, dataset, 2)
    p1, p2 = tmp_path / "a.rngt", tmp_path / "b.rngt"
    save_checkpoint(p1, model, optimizer, 2, cfg)
    loaded_model, loaded_opt, step, _ = load_checkpoint(p1)
    assert step == 2
    save_checkpoint(p2, loaded_model, loaded_opt, step, cfg)
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_reproduces_uninterrupted_run_exactly(tmp_path, dataset):
    cfg = tiny_config()
    # uninterrupted reference: 4 steps
    _, _, ref = run_steps(cfg, dataset, 4)
    # interrupted: 2 steps, checkpoint, reload, 2 more
    model, optimizer, _ = run_steps(cfg, dataset, 2)
    path = tmp_path / "resume.rngt"
    save_checkpoint(path, model, optimizer, 2, cfg)
    model2, opt2, step, _ = load_checkpoint(path)
    _, _, cont = run_steps(cfg, dataset, 2, model=model2, optimizer=opt2, start=step)
    assert cont[0].total == ref[2].total
    assert cont[1].total == ref[3].total
    assert cont[0].to_json() == ref[2].to_json()


def test_load_checkpoint_rejects_other_config(tmp_path, dataset):
    cfg = tiny_config()
    model, optimizer, _ = run_steps(cfg, dataset, 1)
    path = tmp_path / "c.rngt"
    save_checkpoint(path, model, optimizer, 1, cfg)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected=tiny_config(peak_lr=2e-3))


def test_train_entrypoint_writes_log_and_checkpoint(tmp_path):
    cfg = tiny_config(steps=2, warmup_steps=1, checkpoint_interval=2, dataset_size=2)
    out = tmp_path / "ckpt.rngt"
    log = tmp_path / "log.jsonl"
    model = train(cfg, tmp_path / "data", out, log_path=log, progress=False)
    assert out.exists()
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 2
    import json

    entry = json.loads(lines[0])
    assert {"step", "lr", "total", "rgb_mse", "rgb_perceptual", "pmap", "cam"} <= set(entry)
    loaded, _, step, _ = load_checkpoint(out)
    assert step == 2
    assert loaded.fingerprint() == model.fingerprint()


def test_overfit_smoke_loss_decreases(tmp_path):
    """Loss trend on a small fixed scene set decreases across step windows."""
    cfg = tiny_config(
        steps=360, warmup_steps=20, peak_lr=2e-3, dataset_size=2, checkpoint_interval=10000
    )
    ds = SceneDataset(tmp_path / "scenes", cfg.dataset_size, cfg.seed, 32, cfg.views_per_scene)
    ds.ensure_generated()
    _, _, reports = run_steps(cfg, ds, cfg.steps)
    totals = np.array([r.total for r in reports])
    windows = totals.reshape(3, 120).mean(axis=1)
    assert np.all(np.diff(windows) < 0), windows
