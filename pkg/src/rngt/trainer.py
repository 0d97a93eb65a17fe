"""Optimization loop: warmup + cosine schedule, gradient accumulation, checkpoints.

All randomness is a pure function of (seed, step): each step derives its scene
and view choices from a fresh ``SeedSequence([seed, step, ...])``, so resuming
from a checkpoint reproduces the uninterrupted run bit-exactly without saving
RNG state.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .container import load_container, save_container
from .errors import ConfigMismatchError, TrainingDivergedError
from .geometry import CameraPose, depth_to_pointmap
from .losses import LossReport, LossWeights, PerceptualFeatures, total_loss
from .model import ModelConfig, ModelOutputs, RngModel
from .scenegen import (
    RenderedView,
    TrainingExample,
    make_scene,
    render_rgbd,
    sample_batch,
    sample_cameras,
)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    warmup_steps: int = 300
    peak_lr: float = 6e-4
    accumulation: int = 2  # forward micro-steps per optimizer update
    scenes_per_micro: int = 1
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_interval: int = 1000
    dataset_size: int = 500
    views_per_scene: int = 25
    fuse_targets: bool = True  # share the source pass across a scene's targets
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError("warmup must be shorter than the run")
        if self.peak_lr <= 0:
            raise ValueError("peak learning rate must be positive")
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    def to_json(self) -> dict:
        data = asdict(self)
        data["adam_betas"] = list(self.adam_betas)
        data["loss"] = asdict(self.loss)
        data["model"] = self.model.to_json()
        return data

    @classmethod
    def from_json(cls, data: dict) -> TrainConfig:
        data = dict(data)
        data["adam_betas"] = tuple(data.get("adam_betas", (0.9, 0.95)))
        data["loss"] = LossWeights(**data.get("loss", {}))
        data["model"] = ModelConfig.from_json(data["model"]) if "model" in data else ModelConfig()
        return cls(**data)


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to peak_lr, then cosine decay to zero at the final step."""
    if not 0 <= step < cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps})")
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (cfg.steps - cfg.warmup_steps)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class SceneDataset:
    """Procedural scenes rendered once to disk as RNGT containers.

    Scene i is fully determined by (seed, i): its primitives, its camera ring
    and therefore its renders.  One file per scene with tensors rgb.<v>,
    depth.<v>, pose.<v> (4x4 camera-to-world) and intrinsics; point maps and
    masks are derived on load.
    """

    def __init__(self, directory, size: int, seed: int, resolution: int, views: int = 25):
        self.directory = Path(directory)
        self.size = size
        self.seed = seed
        self.resolution = resolution
        self.views = views
        self._load = lru_cache(maxsize=32)(self._load_uncached)

    def scene_seed(self, index: int) -> int:
        return int(np.random.SeedSequence([self.seed, index]).generate_state(1)[0])

    def path(self, index: int) -> Path:
        return self.directory / f"scene_{index:05d}.rngt"

    def ensure_generated(self, progress: bool = False) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        for i in range(self.size):
            if self.path(i).exists():
                continue
            self._write_scene(i)
            if progress and (i + 1) % 50 == 0:
                print(f"dataset: {i + 1}/{self.size} scenes rendered", flush=True)

    def _write_scene(self, index: int) -> None:
        sseed = self.scene_seed(index)
        scene = make_scene(sseed)
        poses = sample_cameras(sseed + 1, self.views, resolution=self.resolution)
        tensors: dict[str, np.ndarray] = {}
        first = poses[0]
        tensors["intrinsics"] = np.array([first.fx, first.fy, first.cx, first.cy], dtype=np.float32)
        for v, pose in enumerate(poses):
            view = render_rgbd(scene, pose)
            tensors[f"rgb.{v}"] = view.rgb.astype(np.float32)
            tensors[f"depth.{v}"] = view.depth.astype(np.float32)
            mat = np.eye(4, dtype=np.float32)
            mat[:3, :3] = pose.rotation
            mat[:3, 3] = pose.center
            tensors[f"pose.{v}"] = mat
        meta = {
            "kind": "scene",
            "scene_seed": sseed,
            "resolution": self.resolution,
            "views": self.views,
        }
        save_container(self.path(index), tensors, meta)

    def _load_uncached(self, index: int) -> tuple[RenderedView, ...]:
        tensors, meta = load_container(self.path(index))
        res = meta["resolution"]
        fx, fy, cx, cy = (float(x) for x in tensors["intrinsics"])
        views = []
        for v in range(meta["views"]):
            mat = tensors[f"pose.{v}"].astype(np.float64)
            pose = CameraPose(mat[:3, :3], mat[:3, 3], fx, fy, cx, cy, res, res)
            depth = tensors[f"depth.{v}"].astype(np.float64)
            views.append(
                RenderedView(
                    pose=pose,
                    rgb=tensors[f"rgb.{v}"].astype(np.float64),
                    depth=depth,
                    pointmap=depth_to_pointmap(depth, pose),
                    mask=depth > 0,
                )
            )
        return tuple(views)

    def load_scene(self, index: int) -> tuple[RenderedView, ...]:
        return self._load(index)

    def scene(self, index: int):
        """The analytic scene geometry behind entry ``index``."""
        return make_scene(self.scene_seed(index))


def step_batches(cfg: TrainConfig, dataset: SceneDataset, step: int) -> list[list[TrainingExample]]:
    """The micro-batches consumed by optimizer step ``step`` (pure in (seed, step))."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, 17]))
    micro_batches = []
    for _ in range(cfg.accumulation):
        examples: list[TrainingExample] = []
        for _ in range(cfg.scenes_per_micro):
            scene_index = int(rng.integers(0, dataset.size))
            batch_seed = int(rng.integers(0, 2**31 - 1))
            examples.extend(sample_batch(list(dataset.load_scene(scene_index)), batch_seed))
        micro_batches.append(examples)
    return micro_batches


def _stack_sources(examples: list[TrainingExample]) -> torch.Tensor:
    return torch.from_numpy(
        np.ascontiguousarray(np.stack([v.rgb for v in examples[0].sources]), dtype=np.float32)
    )


def _forward_micro(
    model: RngModel, examples: list[TrainingExample], cfg: TrainConfig, perceptual: PerceptualFeatures
) -> tuple[torch.Tensor, list[LossReport]]:
    """Mean loss over the examples of one micro-batch, plus per-example reports.

    With ``fuse_targets`` examples sharing the same source views run as one
    multi-target forward (isolated targets; see attention masking), which is
    equivalent to per-example joint forwards but shares the source-side work.
    """
    reports = []
    losses = []
    for group in _group_by_sources(examples, fuse=cfg.fuse_targets):
        if len(group) > 1:
            images = _stack_sources(group)
            poses = [ex.target.pose for ex in group]
            rotations, centers, rgb, pmap, conf = model.forward_multi(images, poses)
            per_example = [
                ModelOutputs(rotations, centers, rgb[t], pmap[t], conf[t])
                for t in range(len(group))
            ]
        else:
            per_example = [model.forward_joint(_stack_sources(group), group[0].target.pose)]
        for outputs, ex in zip(per_example, group):
            report = total_loss(outputs, ex, cfg.loss, perceptual)
            losses.append(report.tensor)
            reports.append(report)
    return torch.stack(losses).mean(), reports


def _group_by_sources(
    examples: list[TrainingExample], fuse: bool
) -> list[list[TrainingExample]]:
    if not fuse:
        return [[ex] for ex in examples]
    groups: dict[int, list[TrainingExample]] = {}
    for ex in examples:
        groups.setdefault(id(ex.sources), []).append(ex)
    return list(groups.values())


def _mean_report(reports: list[LossReport]) -> LossReport:
    n = len(reports)
    return LossReport(
        total=sum(r.total for r in reports) / n,
        rgb_mse=sum(r.rgb_mse for r in reports) / n,
        rgb_perceptual=sum(r.rgb_perceptual for r in reports) / n,
        pmap=sum(r.pmap for r in reports) / n,
        cam=sum(r.cam for r in reports) / n,
    )


def train_step(
    model: RngModel,
    optimizer: torch.optim.Optimizer,
    micro_batches: list[list[TrainingExample]],
    cfg: TrainConfig,
    step: int,
    perceptual: PerceptualFeatures,
) -> LossReport:
    """One optimizer update: accumulate mean gradients over the micro-batches."""
    lr = lr_schedule(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    reports: list[LossReport] = []
    for examples in micro_batches:
        loss, micro_reports = _forward_micro(model, examples, cfg, perceptual)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: " + json.dumps(micro_reports[0].to_json())
            )
        (loss / len(micro_batches)).backward()
        reports.extend(micro_reports)
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    return _mean_report(reports)


def make_optimizer(model: RngModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.peak_lr, betas=cfg.adam_betas, eps=cfg.adam_eps
    )


def train(
    cfg: TrainConfig,
    dataset_dir,
    out_path,
    log_path=None,
    resume_path=None,
    progress: bool = True,
) -> RngModel:
    """Full training run; writes periodic checkpoints and a JSON-lines loss log."""
    dataset = SceneDataset(
        dataset_dir, cfg.dataset_size, cfg.seed, cfg.model.resolution, cfg.views_per_scene
    )
    dataset.ensure_generated(progress=progress)
    if resume_path:
        model, optimizer, start_step, _ = load_checkpoint(resume_path, expected=cfg)
    else:
        model = RngModel(cfg.model)
        optimizer = make_optimizer(model, cfg)
        start_step = 0
    perceptual = PerceptualFeatures(cfg.model.seed)
    log_fh = open(log_path, "a") if log_path else None
    try:
        for step in range(start_step, cfg.steps):
            batches = step_batches(cfg, dataset, step)
            report = train_step(model, optimizer, batches, cfg, step, perceptual)
            if log_fh:
                entry = {"step": step, "lr": lr_schedule(step, cfg)}
                entry.update(report.to_json())
                log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                log_fh.flush()
            if progress and (step + 1) % 100 == 0:
                print(f"step {step + 1}/{cfg.steps} total={report.total:.4f}", flush=True)
            done = step + 1
            if done % cfg.checkpoint_interval == 0 or done == cfg.steps:
                save_checkpoint(out_path, model, optimizer, done, cfg)
    finally:
        if log_fh:
            log_fh.close()
    return model


# -- checkpointing -----------------------------------------------------------


def save_checkpoint(
    path, model: RngModel, optimizer: torch.optim.Optimizer, step: int, cfg: TrainConfig
) -> None:
    """Serialize weights + Adam moments + step into one RNGT container."""
    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    names = [n for n, _ in model.named_parameters()]
    params = list(model.parameters())
    opt_state = optimizer.state_dict()["state"]
    adam_steps = {}
    for i, name in enumerate(names):
        if i in opt_state:
            entry = opt_state[i]
            tensors[f"opt.{name}.exp_avg"] = entry["exp_avg"].cpu().numpy()
            tensors[f"opt.{name}.exp_avg_sq"] = entry["exp_avg_sq"].cpu().numpy()
            adam_steps[name] = int(entry["step"])
    meta = {
        "kind": "checkpoint",
        "step": step,
        "model_config": cfg.model.to_json(),
        "train_config": cfg.to_json(),
        "adam_steps": adam_steps,
        "fingerprint": model.fingerprint(),
    }
    save_container(path, tensors, meta)


def load_checkpoint(
    path, expected: TrainConfig | None = None
) -> tuple[RngModel, torch.optim.Optimizer, int, dict]:
    """Restore (model, optimizer, next step, metadata); training resumes bit-exactly."""
    tensors, meta = load_container(path)
    if meta.get("kind") != "checkpoint":
        raise ConfigMismatchError("container does not hold a checkpoint")
    cfg = TrainConfig.from_json(meta["train_config"])
    if expected is not None and expected != cfg:
        raise ConfigMismatchError("checkpoint training config differs from the requested one")
    model = RngModel(cfg.model)
    state = {k[len("model."):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model.")}
    if set(state) != set(model.state_dict()):
        raise ConfigMismatchError("checkpoint weights do not match the model architecture")
    model.load_state_dict(state)
    optimizer = make_optimizer(model, cfg)
    adam_steps = meta.get("adam_steps", {})
    opt_state = {}
    for i, (name, param) in enumerate(model.named_parameters()):
        key_avg = f"opt.{name}.exp_avg"
        if key_avg in tensors:
            opt_state[i] = {
                "step": torch.tensor(float(adam_steps[name])),
                "exp_avg": torch.from_numpy(tensors[key_avg]),
                "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"]),
            }
    sd = optimizer.state_dict()
    sd["state"] = opt_state
    optimizer.load_state_dict(sd)
    return model, optimizer, int(meta["step"]), meta
