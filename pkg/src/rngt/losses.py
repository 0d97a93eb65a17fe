"""Multi-task training objective: RGB, confidence-weighted point map, camera poses.

total = rgb_mse + lambda_perceptual * rgb_perceptual
      + lambda_pmap * pointmap + lambda_cam * camera
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .geometry import CameraPose
from .scenegen import TrainingExample


@dataclass(frozen=True)
class LossWeights:
    lambda_pmap: float = 0.2
    lambda_cam: float = 1.0
    lambda_perceptual: float = 0.5
    alpha: float = 0.2  # confidence regularizer weight
    huber_eps: float = 0.1

    def __post_init__(self):
        if min(self.lambda_pmap, self.lambda_cam, self.lambda_perceptual, self.alpha, self.huber_eps) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossReport:
    total: float
    rgb_mse: float
    rgb_perceptual: float
    pmap: float
    cam: float
    tensor: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "rgb_mse": self.rgb_mse,
            "rgb_perceptual": self.rgb_perceptual,
            "pmap": self.pmap,
            "cam": self.cam,
        }


class PerceptualFeatures(nn.Module):
    """Frozen random multi-scale conv features; a deterministic stand-in for a
    pretrained perceptual network.

    Three scales (full, 1/2, 1/4), each passed through its own fixed random
    3x3 conv bank with a smooth nonlinearity.  The weights depend only on the
    seed, so the induced feature distance is reproducible.
    """

    def __init__(self, seed: int = 0, channels: int = 16, scales: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.scales = scales
        weights, biases = [], []
        for s in range(scales):
            w = torch.randn(channels, 3, 3, 3, generator=gen) / (3.0 * np.sqrt(3.0))
            b = torch.randn(channels, generator=gen) * 0.1
            weights.append(w)
            biases.append(b)
        for i, (w, b) in enumerate(zip(weights, biases)):
            self.register_buffer(f"weight_{i}", w)
            self.register_buffer(f"bias_{i}", b)

    def features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """Image (H, W, 3) in [0,1] -> list of feature maps, one per scale."""
        x = image.permute(2, 0, 1)[None]  # (1, 3, H, W)
        out = []
        for i in range(self.scales):
            if i > 0:
                x = F.avg_pool2d(x, 2)
            w = getattr(self, f"weight_{i}").to(x.dtype)
            b = getattr(self, f"bias_{i}").to(x.dtype)
            out.append(F.gelu(F.conv2d(x, w, b, padding=1)))
        return out


def rgb_loss(
    pred: torch.Tensor, gt: torch.Tensor, perceptual: PerceptualFeatures
) -> tuple[torch.Tensor, torch.Tensor]:
    """(mse, perceptual distance) between two (H, W, 3) images in [0, 1]."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    mse = torch.mean((pred - gt) ** 2)
    dist = pred.new_zeros(())
    f_pred = perceptual.features(pred)
    f_gt = perceptual.features(gt)
    for a, b in zip(f_pred, f_gt):
        dist = dist + torch.mean(torch.abs(a - b))
    return mse, dist / len(f_pred)


def pointmap_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    confidence: torch.Tensor,
    mask: torch.Tensor,
    alpha: float = 0.2,
) -> torch.Tensor:
    """Confidence-weighted point regression with spatial-gradient matching.

    mean over foreground pixels of
        conf * |P - P^| + conf * (|dxP - dxP^| + |dyP - dyP^|) - alpha * log conf
    where |.| is the per-pixel Euclidean norm, spatial gradients are forward
    differences (counted only where both pixels are foreground), and conf is
    the predicting network's per-pixel confidence (strictly positive).
    """
    if pred.shape != gt.shape:
        raise ValueError("point map shapes differ")
    if bool((confidence <= 0).any()):
        raise ValueError("confidence must be strictly positive")
    mask = mask.bool()
    n_fg = int(mask.sum())
    if n_fg == 0:
        return pred.new_zeros(())
    residual = torch.linalg.vector_norm(pred - gt, dim=-1)
    total = (confidence * residual)[mask].sum()

    for axis in (0, 1):
        d_pred = torch.diff(pred, dim=axis)
        d_gt = torch.diff(gt, dim=axis)
        valid = mask.narrow(axis, 0, mask.shape[axis] - 1) & mask.narrow(axis, 1, mask.shape[axis] - 1)
        grad_res = torch.linalg.vector_norm(d_pred - d_gt, dim=-1)
        conf_base = confidence.narrow(axis, 0, confidence.shape[axis] - 1)
        total = total + (conf_base * grad_res)[valid].sum()

    total = total - alpha * torch.log(confidence)[mask].sum()
    return total / n_fg


def huber(x: torch.Tensor, eps: float) -> torch.Tensor:
    """Elementwise Huber penalty: x^2/(2*eps) inside [-eps, eps], |x| - eps/2 outside."""
    absx = torch.abs(x)
    return torch.where(absx <= eps, x * x / (2.0 * eps), absx - eps / 2.0)


def rotation_to_6d(rotation: torch.Tensor) -> torch.Tensor:
    """First two columns of a rotation matrix, flattened: (..., 6)."""
    return torch.cat([rotation[..., :, 0], rotation[..., :, 1]], dim=-1)


def camera_loss_terms(
    pred_rotations: torch.Tensor,
    pred_centers: torch.Tensor,
    gt_rotations: torch.Tensor,
    gt_centers: torch.Tensor,
    eps: float = 0.1,
) -> torch.Tensor:
    """Huber pose loss over per-view 9-vectors [6D rotation ; center].

    Per view the Huber penalty is averaged over the 9 residual elements;
    views are summed.
    """
    if pred_rotations.shape != gt_rotations.shape or pred_centers.shape != gt_centers.shape:
        raise ValueError("pose count mismatch")
    resid = torch.cat(
        [
            rotation_to_6d(gt_rotations) - rotation_to_6d(pred_rotations),
            gt_centers - pred_centers,
        ],
        dim=-1,
    )
    return huber(resid, eps).mean(dim=-1).sum()


def camera_loss(pred: list[CameraPose], gt: list[CameraPose], eps: float = 0.1) -> float:
    """Pose-list convenience wrapper around :func:`camera_loss_terms`."""
    if len(pred) != len(gt):
        raise ValueError("pose count mismatch")
    pr = torch.tensor(np.stack([p.rotation for p in pred]))
    pc = torch.tensor(np.stack([p.center for p in pred]))
    gr = torch.tensor(np.stack([p.rotation for p in gt]))
    gc = torch.tensor(np.stack([p.center for p in gt]))
    return float(camera_loss_terms(pr, pc, gr, gc, eps))


def total_loss(
    outputs,
    example: TrainingExample,
    weights: LossWeights,
    perceptual: PerceptualFeatures,
) -> LossReport:
    """Compose the full objective for one training example.

    ``outputs`` is a ModelOutputs (or anything with rotations/centers/rgb/
    pointmap/confidence tensors).  Background pixels contribute to the RGB
    terms but are excluded from the point-map term by the target mask.
    The returned report carries float components plus the differentiable
    scalar in ``report.tensor``.
    """
    dtype = outputs.rgb.dtype
    gt_rgb = torch.from_numpy(example.target.rgb).to(dtype)
    gt_pmap = torch.from_numpy(example.target.pointmap).to(dtype)
    gt_mask = torch.from_numpy(example.target.mask)
    mse, perc = rgb_loss(outputs.rgb, gt_rgb, perceptual)
    pmap = pointmap_loss(outputs.pointmap, gt_pmap, outputs.confidence, gt_mask, weights.alpha)
    gt_rot = torch.from_numpy(np.stack([p.rotation for p in example.source_poses])).to(dtype)
    gt_ctr = torch.from_numpy(np.stack([p.center for p in example.source_poses])).to(dtype)
    cam = camera_loss_terms(outputs.rotations, outputs.centers, gt_rot, gt_ctr, weights.huber_eps)
    total = (
        mse
        + weights.lambda_perceptual * perc
        + weights.lambda_pmap * pmap
        + weights.lambda_cam * cam
    )
    return LossReport(
        float(total.detach()),
        float(mse.detach()),
        float(perc.detach()),
        float(pmap.detach()),
        float(cam.detach()),
        tensor=total,
    )
