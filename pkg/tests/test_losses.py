"""Loss tests: analytic values, finite-difference gradient oracles, Huber reference.

Gradient checks run in float64 with central differences (h = 1e-5) and demand
relative error <= 1e-3 against autograd.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from rngt.losses import (
    LossReport,
    LossWeights,
    PerceptualFeatures,
    camera_loss,
    camera_loss_terms,
    huber,
    pointmap_loss,
    rgb_loss,
    rotation_to_6d,
    total_loss,
)

H = 1e-5


def central_difference_grad(f, x: torch.Tensor) -> np.ndarray:
    """Finite-difference gradient of scalar f at x (float64, elementwise)."""
    x = x.detach().clone()
    grad = np.zeros(x.numel())
    flat = x.reshape(-1)
    for i in range(x.numel()):
        orig = flat[i].item()
        flat[i] = orig + H
        up = float(f(x))
        flat[i] = orig - H
        down = float(f(x))
        flat[i] = orig
        grad[i] = (up - down) / (2 * H)
    return grad.reshape(x.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture(scope="module")
def perceptual():
    return PerceptualFeatures(seed=3)


# -- rgb loss -----------------------------------------------------------------


def test_rgb_loss_zero_for_identical(perceptual):
    img = torch.rand(12, 12, 3, dtype=torch.float64)
    mse, perc = rgb_loss(img, img, perceptual)
    assert float(mse) == 0.0
    assert float(perc) == 0.0


def test_rgb_loss_constant_offset_is_c_squared(perceptual):
    gt = torch.rand(10, 10, 3, dtype=torch.float64) * 0.5
    c = 0.125
    mse, _ = rgb_loss(gt + c, gt, perceptual)
    assert float(mse) == pytest.approx(c * c, rel=1e-12)


def test_rgb_loss_rejects_shape_mismatch(perceptual):
    with pytest.raises(ValueError):
        rgb_loss(torch.rand(4, 4, 3), torch.rand(5, 5, 3), perceptual)


def test_rgb_loss_perceptual_deterministic():
    a = PerceptualFeatures(seed=7)
    b = PerceptualFeatures(seed=7)
    img1, img2 = torch.rand(8, 8, 3), torch.rand(8, 8, 3)
    assert torch.equal(rgb_loss(img1, img2, a)[1], rgb_loss(img1, img2, b)[1])
    c = PerceptualFeatures(seed=8)
    assert not torch.equal(rgb_loss(img1, img2, a)[1], rgb_loss(img1, img2, c)[1])


def test_rgb_loss_gradient_matches_finite_differences(perceptual):
    rng = torch.Generator().manual_seed(1)
    for _ in range(10):
        gt = torch.rand(6, 6, 3, dtype=torch.float64, generator=rng)
        pred0 = torch.rand(6, 6, 3, dtype=torch.float64, generator=rng)

        def f(p):
            mse, perc = rgb_loss(p, gt, perceptual)
            return mse + 0.5 * perc

        pred = pred0.clone().requires_grad_(True)
        value = f(pred)
        value.backward()
        fd = central_difference_grad(f, pred0)
        assert rel_err(pred.grad.numpy(), fd) <= 1e-3


# -- pointmap loss ---------------------------------------------------------------


def test_pointmap_loss_perfect_prediction_unit_confidence():
    gt = torch.rand(8, 8, 3, dtype=torch.float64)
    conf = torch.ones(8, 8, dtype=torch.float64)
    mask = torch.ones(8, 8, dtype=torch.bool)
    assert float(pointmap_loss(gt, gt, conf, mask, alpha=0.2)) == 0.0


def test_pointmap_loss_perfect_prediction_confidence_e():
    gt = torch.rand(8, 8, 3, dtype=torch.float64)
    conf = torch.full((8, 8), math.e, dtype=torch.float64)
    mask = torch.ones(8, 8, dtype=torch.bool)
    # residuals vanish, so the loss is exactly -alpha * log(e) = -0.2
    assert float(pointmap_loss(gt, gt, conf, mask, alpha=0.2)) == pytest.approx(-0.2, rel=1e-12)


def test_pointmap_loss_rejects_nonpositive_confidence():
    gt = torch.rand(4, 4, 3)
    conf = torch.zeros(4, 4)
    with pytest.raises(ValueError):
        pointmap_loss(gt, gt, conf, torch.ones(4, 4, dtype=torch.bool))


def test_pointmap_loss_gradients_match_finite_differences():
    rng = torch.Generator().manual_seed(2)
    for trial in range(10):
        gt = torch.rand(5, 5, 3, dtype=torch.float64, generator=rng)
        pred0 = gt + 0.3 * torch.randn(5, 5, 3, dtype=torch.float64, generator=rng)
        conf0 = 0.5 + torch.rand(5, 5, dtype=torch.float64, generator=rng)
        mask = torch.rand(5, 5, generator=rng) > 0.2
        mask[2, 2] = True  # keep the mask non-empty

        def f_pred(p):
            return pointmap_loss(p, gt, conf0, mask, alpha=0.2)

        def f_conf(c):
            return pointmap_loss(pred0, gt, c, mask, alpha=0.2)

        pred = pred0.clone().requires_grad_(True)
        pointmap_loss(pred, gt, conf0, mask, alpha=0.2).backward()
        assert rel_err(pred.grad.numpy(), central_difference_grad(f_pred, pred0)) <= 1e-3

        conf = conf0.clone().requires_grad_(True)
        pointmap_loss(pred0, gt, conf, mask, alpha=0.2).backward()
        assert rel_err(conf.grad.numpy(), central_difference_grad(f_conf, conf0)) <= 1e-3


def test_pointmap_loss_optimal_confidence_sweep():
    """Minimizing over a constant confidence lands at alpha / (residual + grad residual)."""
    gt = torch.zeros(3, 3, 3, dtype=torch.float64)
    pred = gt.clone()
    pred[..., 0] += 0.25  # constant offset: residual 0.25 per pixel, zero gradients
    mask = torch.ones(3, 3, dtype=torch.bool)
    alpha = 0.2
    sigmas = np.linspace(0.05, 5.0, 2000)
    losses = [
        float(pointmap_loss(pred, gt, torch.full((3, 3), s, dtype=torch.float64), mask, alpha))
        for s in sigmas
    ]
    best = sigmas[int(np.argmin(losses))]
    assert best == pytest.approx(alpha / 0.25, rel=0.01)


# -- camera loss ------------------------------------------------------------------


def scalar_huber_reference(x: float, eps: float) -> float:
    return x * x / (2 * eps) if abs(x) <= eps else abs(x) - eps / 2


def test_huber_matches_scalar_reference():
    rng = np.random.default_rng(3)
    xs = np.concatenate([rng.normal(scale=0.05, size=50), rng.normal(scale=2.0, size=50)])
    ours = huber(torch.tensor(xs), eps=0.1).numpy()
    ref = np.array([scalar_huber_reference(x, 0.1) for x in xs])
    assert np.max(np.abs(ours - ref)) < 1e-12


def test_huber_small_residual_closed_form():
    r = 0.04
    value = huber(torch.tensor(r, dtype=torch.float64), eps=0.1)
    assert float(value) == pytest.approx(r * r / 0.2, rel=1e-12)


def test_camera_loss_zero_for_identical():
    from rngt.scenegen import sample_cameras

    poses = sample_cameras(0, 4)
    assert camera_loss(poses, poses) == 0.0


def test_camera_loss_invariant_under_relabeling():
    from rngt.scenegen import sample_cameras

    gt = sample_cameras(1, 4)
    pred = sample_cameras(2, 4)
    base = camera_loss(pred, gt)
    perm = [2, 0, 3, 1]
    relabeled = camera_loss([pred[i] for i in perm], [gt[i] for i in perm])
    assert relabeled == pytest.approx(base, rel=1e-12)


def test_camera_loss_gradients_match_finite_differences():
    rng = torch.Generator().manual_seed(4)
    for _ in range(10):
        gt_rot = torch.eye(3, dtype=torch.float64).expand(3, 3, 3)
        gt_ctr = torch.randn(3, 3, dtype=torch.float64, generator=rng)
        pred_ctr0 = torch.randn(3, 3, dtype=torch.float64, generator=rng)

        def f(c):
            return camera_loss_terms(gt_rot, c, gt_rot, gt_ctr, eps=0.1)

        pred = pred_ctr0.clone().requires_grad_(True)
        f(pred).backward()
        assert rel_err(pred.grad.numpy(), central_difference_grad(f, pred_ctr0)) <= 1e-3


def test_rotation_to_6d_layout():
    r = torch.eye(3)
    assert torch.equal(rotation_to_6d(r), torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]))


# -- total loss --------------------------------------------------------------------


def make_example_and_outputs(perfect: bool):
    from rngt.model import ModelOutputs
    from rngt.scenegen import make_scene, render_views, sample_batch, sample_cameras

    scene = make_scene(5)
    views = render_views(scene, sample_cameras(5, 8, resolution=32))
    ex = sample_batch(views, seed=0)[0]
    rot = torch.tensor(np.stack([p.rotation for p in ex.source_poses]))
    ctr = torch.tensor(np.stack([p.center for p in ex.source_poses]))
    rgb = torch.tensor(ex.target.rgb)
    pmap = torch.tensor(ex.target.pointmap)
    conf = torch.ones(32, 32, dtype=torch.float64)
    if not perfect:
        rgb = torch.clamp(rgb + 0.05, 0.0, 1.0)
        pmap = pmap + 0.1
        ctr = ctr + 0.2
    return ModelOutputs(rot, ctr, rgb, pmap, conf), ex


def test_total_loss_zero_for_perfect_prediction(perceptual):
    outputs, ex = make_example_and_outputs(perfect=True)
    report = total_loss(outputs, ex, LossWeights(), perceptual)
    assert report.total == 0.0
    assert report.rgb_mse == 0.0 and report.cam == 0.0 and report.pmap == 0.0


def test_total_loss_is_weighted_sum_of_parts(perceptual):
    outputs, ex = make_example_and_outputs(perfect=False)
    w = LossWeights()
    report = total_loss(outputs, ex, w, perceptual)
    expected = (
        report.rgb_mse
        + w.lambda_perceptual * report.rgb_perceptual
        + w.lambda_pmap * report.pmap
        + w.lambda_cam * report.cam
    )
    assert report.total == pytest.approx(expected, abs=1e-12)


def test_total_loss_zero_weights_reduce_to_rgb(perceptual):
    outputs, ex = make_example_and_outputs(perfect=False)
    w = LossWeights(lambda_pmap=0.0, lambda_cam=0.0)
    report = total_loss(outputs, ex, w, perceptual)
    assert report.total == pytest.approx(
        report.rgb_mse + w.lambda_perceptual * report.rgb_perceptual, abs=1e-12
    )


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_pmap=-0.1)
