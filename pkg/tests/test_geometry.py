"""Geometry tests: Plücker maps, normalization, Chamfer, up-direction recovery.

Derived expectations are computed by independent oracles (manual cross
products, brute-force nearest neighbors, inject-and-recover constructions).
"""

from __future__ import annotations

import math

import numpy as np
import pytest

from rngt.errors import DegenerateScaleError, InvalidCameraError, RollNotApplicableError
from rngt.geometry import (
    CANONICAL_CENTER,
    CameraPose,
    PointCloud,
    canonical_pose,
    chamfer_distance,
    depth_to_pointmap,
    look_at_pose,
    normalize_cameras,
    plucker_map,
    pointmap_to_depth,
    recover_up_direction,
    relative_pose,
    rotate_poses_about_x,
    rotation_about_x,
)


def identity_pose(center=(0.0, 0.0, -1.0), width=33, height=33):
    return CameraPose(np.eye(3), np.array(center), 20.0, 20.0, width / 2, height / 2, width, height)


def random_pose(rng, width=33, height=33):
    center = rng.normal(size=3) * 2.0 + np.array([0.0, 0.0, -3.0])
    return look_at_pose(center, 25.0, 27.0, width / 2 + 0.3, height / 2 - 0.2, width, height)


# -- CameraPose invariants ----------------------------------------------------


def test_pose_rejects_non_orthonormal_rotation():
    bad = np.eye(3)
    bad[0, 1] = 1e-3
    with pytest.raises(InvalidCameraError):
        CameraPose(bad, np.zeros(3), 10, 10, 16, 16, 32, 32)


def test_pose_rejects_reflection():
    refl = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(InvalidCameraError):
        CameraPose(refl, np.zeros(3), 10, 10, 16, 16, 32, 32)


def test_pose_rejects_bad_intrinsics():
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3), np.zeros(3), -1.0, 10, 16, 16, 32, 32)
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3), np.zeros(3), 10, 10, 40.0, 16, 32, 32)


# -- Plücker maps -------------------------------------------------------------


def test_plucker_origin_camera_center_pixel():
    # Camera at the world origin: every moment vanishes; the principal ray is +z.
    pose = identity_pose(center=(0.0, 0.0, 0.0))
    pm = plucker_map(pose)
    assert np.allclose(pm.directions[16, 16], [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(pm.moments, 0.0, atol=1e-12)


def test_plucker_canonical_camera_center_pixel():
    pose = identity_pose()  # canonical: [I | (0,0,-1)], principal point at pixel (16,16)
    pm = plucker_map(pose)
    assert np.allclose(pm.directions[16, 16], [0.0, 0.0, 1.0], atol=1e-12)
    assert np.allclose(pm.moments[16, 16], [0.0, 0.0, 0.0], atol=1e-12)


def test_plucker_moment_matches_manual_cross_product():
    # Independent oracle: componentwise cross product formula.
    rng = np.random.default_rng(3)
    pose = random_pose(rng)
    pm = plucker_map(pose)
    c = pose.center
    d = pm.directions
    expected = np.stack(
        [
            c[1] * d[..., 2] - c[2] * d[..., 1],
            c[2] * d[..., 0] - c[0] * d[..., 2],
            c[0] * d[..., 1] - c[1] * d[..., 0],
        ],
        axis=-1,
    )
    assert np.allclose(pm.moments, expected, atol=1e-12)
    # Point on the +x axis with a +z ray: m = (1,0,0) x (0,0,1) = (0,-1,0).
    simple = np.cross([1.0, 0.0, 0.0], [0.0, 0.0, 1.0])
    assert np.allclose(simple, [0.0, -1.0, 0.0])


def test_plucker_invariants_unit_direction_and_orthogonal_moment():
    rng = np.random.default_rng(11)
    for _ in range(5):
        pm = plucker_map(random_pose(rng))
        norms = np.linalg.norm(pm.directions, axis=-1)
        assert np.max(np.abs(norms - 1.0)) < 1e-6
        dots = np.sum(pm.directions * pm.moments, axis=-1)
        assert np.max(np.abs(dots)) < 1e-6


def test_plucker_rejects_degenerate_intrinsics():
    with pytest.raises(InvalidCameraError):
        CameraPose(np.eye(3), np.zeros(3), 0.0, 10, 16, 16, 32, 32)


# -- camera normalization -----------------------------------------------------


def test_normalize_canonical_input_is_identity():
    poses = [identity_pose(), look_at_pose((2.0, 0.5, 1.0), 20, 20, 16.5, 16.5, 33, 33)]
    normed, sim = normalize_cameras(poses)
    assert sim.is_identity
    assert np.array_equal(normed[0].rotation, np.eye(3))
    assert np.array_equal(normed[0].center, CANONICAL_CENTER)
    assert np.array_equal(normed[1].rotation, poses[1].rotation)
    assert np.array_equal(normed[1].center, poses[1].center)


def test_normalize_pure_scaling():
    pose = identity_pose(center=(0.0, 0.0, -2.0))
    normed, sim = normalize_cameras([pose])
    assert sim.scale == pytest.approx(0.5)
    assert np.allclose(sim.rotation, np.eye(3))
    assert np.allclose(sim.translation, 0.0, atol=1e-15)
    assert np.array_equal(normed[0].center, CANONICAL_CENTER)


def test_normalize_first_pose_exactly_canonical():
    rng = np.random.default_rng(5)
    poses = [random_pose(rng) for _ in range(3)]
    normed, _ = normalize_cameras(poses)
    assert np.array_equal(normed[0].rotation, np.eye(3))
    assert np.array_equal(normed[0].center, CANONICAL_CENTER)


def test_normalize_is_idempotent():
    rng = np.random.default_rng(6)
    poses = [random_pose(rng) for _ in range(4)]
    once, _ = normalize_cameras(poses)
    twice, sim = normalize_cameras(once)
    assert sim.is_identity
    for a, b in zip(once, twice):
        assert np.array_equal(a.rotation, b.rotation)
        assert np.array_equal(a.center, b.center)


def test_normalize_preserves_relative_poses():
    # Independent oracle: relative rotation/translation computed directly.
    rng = np.random.default_rng(7)
    poses = [random_pose(rng) for _ in range(2)]
    rel_before = relative_pose(poses[0], poses[1])
    normed, sim = normalize_cameras(poses)
    rel_after = relative_pose(normed[0], normed[1])
    assert np.allclose(rel_before.rotation, rel_after.rotation, atol=1e-9)
    dir_before = rel_before.translation / np.linalg.norm(rel_before.translation)
    dir_after = rel_after.translation / np.linalg.norm(rel_after.translation)
    assert np.allclose(dir_before, dir_after, atol=1e-9)
    assert np.allclose(rel_after.translation, rel_before.translation * sim.scale, atol=1e-9)


def test_normalize_rejects_first_camera_at_origin():
    pose = identity_pose(center=(0.0, 0.0, 0.0))
    with pytest.raises(DegenerateScaleError):
        normalize_cameras([pose])


# -- depth <-> point map ------------------------------------------------------


def test_depth_one_at_center_pixel_hits_origin():
    pose = identity_pose()
    depth = np.zeros((33, 33))
    depth[16, 16] = 1.0
    points = depth_to_pointmap(depth, pose)
    assert np.allclose(points[16, 16], [0.0, 0.0, 0.0], atol=1e-12)


def test_all_zero_depth_gives_zero_points():
    pose = identity_pose()
    points = depth_to_pointmap(np.zeros((33, 33)), pose)
    assert np.array_equal(points, np.zeros((33, 33, 3)))


def test_project_backproject_round_trip():
    rng = np.random.default_rng(8)
    for _ in range(3):
        pose = random_pose(rng)
        depth = rng.uniform(1.0, 4.0, size=(pose.height, pose.width))
        points = depth_to_pointmap(depth, pose)
        uv, z = pose.project(points.reshape(-1, 3))
        uu, vv = np.meshgrid(np.arange(pose.width) + 0.5, np.arange(pose.height) + 0.5)
        expected = np.stack([uu.ravel(), vv.ravel()], axis=-1)
        assert np.max(np.abs(uv - expected)) < 1e-4
        assert np.all(z > 0)


def test_pointmap_to_depth_is_camera_z():
    pose = identity_pose(center=(0.0, 0.0, -2.0))
    depth = np.full((33, 33), 2.0)
    points = depth_to_pointmap(depth, pose)
    z = pointmap_to_depth(points, pose)
    # Ray-length depth 2.0 maps to camera z = 2.0 only on the principal ray.
    assert z[16, 16] == pytest.approx(2.0, abs=1e-12)
    assert np.all(z <= 2.0 + 1e-12)


# -- Chamfer distance ---------------------------------------------------------


def brute_force_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    return 0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean()


def test_chamfer_identical_clouds_is_zero():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer_distance(pts, pts) == 0.0


def test_chamfer_single_pair():
    assert chamfer_distance(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0, 0.0, 0.0]])) == pytest.approx(1.0)


def test_chamfer_matches_brute_force_exactly():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(64, 3))
    b = rng.normal(size=(64, 3))
    assert chamfer_distance(a, b) == pytest.approx(brute_force_chamfer(a, b), abs=1e-12)


def test_chamfer_symmetry_and_rigid_invariance():
    rng = np.random.default_rng(10)
    a = rng.normal(size=(40, 3))
    b = rng.normal(size=(55, 3))
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-12)
    rot = rotation_about_x(0.7)
    shift = np.array([0.3, -1.2, 0.5])
    assert chamfer_distance(a @ rot.T + shift, b @ rot.T + shift) == pytest.approx(
        chamfer_distance(a, b), abs=1e-6
    )


def test_chamfer_rejects_empty_cloud():
    with pytest.raises(ValueError):
        chamfer_distance(np.zeros((0, 3)), np.ones((3, 3)))


def test_point_cloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.array([[np.nan, 0.0, 0.0]]))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((2, 3)), colors=np.full((2, 3), 1.5))


# -- up-direction recovery ----------------------------------------------------


def ring_of_cameras(n=8, radius=2.5):
    poses = []
    for k in range(n):
        phi = 2.0 * math.pi * k / n
        elev = 0.35 * math.sin(3.0 * phi + 0.61)
        center = radius * np.array(
            [math.cos(phi) * math.cos(elev), math.sin(elev), math.sin(phi) * math.cos(elev)]
        )
        poses.append(look_at_pose(center, 20, 20, 16.5, 16.5, 33, 33))
    return poses


def test_recover_up_roll_free_input_is_zero():
    angle = recover_up_direction(ring_of_cameras())
    assert abs(math.degrees(angle)) < 0.1


def test_recover_up_inject_and_recover_17_degrees():
    poses = rotate_poses_about_x(ring_of_cameras(), math.radians(17.0))
    angle = recover_up_direction(poses)
    assert math.degrees(angle) == pytest.approx(-17.0, abs=0.5)


def test_recover_up_shift_property():
    base = ring_of_cameras()
    base_angle = recover_up_direction(base)
    shifted = recover_up_direction(rotate_poses_about_x(base, math.radians(9.0)))
    assert math.degrees(shifted - (base_angle - math.radians(9.0))) == pytest.approx(0.0, abs=0.5)


def test_recover_up_excludes_cameras_on_search_axis():
    # A camera on the x-axis conflates roll with the searched rotation; with
    # only such cameras the objective is unconstrained.
    on_axis = [
        look_at_pose((2.5, 0.0, 0.0), 20, 20, 16.5, 16.5, 33, 33),
        look_at_pose((-2.5, 0.0, 0.0), 20, 20, 16.5, 16.5, 33, 33),
    ]
    with pytest.raises(RollNotApplicableError):
        recover_up_direction(on_axis)
    # Mixed with informative cameras the recovery still works.
    poses = rotate_poses_about_x(ring_of_cameras() + on_axis[:1], math.radians(12.0))
    assert math.degrees(recover_up_direction(poses)) == pytest.approx(-12.0, abs=0.5)


def test_recover_up_requires_looking_at_origin():
    stray = look_at_pose((2.0, 1.0, 2.0), 20, 20, 16.5, 16.5, 33, 33, target=(1.0, 0.0, 0.0))
    with pytest.raises(RollNotApplicableError):
        recover_up_direction(ring_of_cameras() + [stray])


def test_recover_up_needs_two_poses():
    with pytest.raises(RollNotApplicableError):
        recover_up_direction(ring_of_cameras()[:1])


def test_canonical_pose_helper():
    pose = canonical_pose(identity_pose(center=(3.0, 1.0, 2.0)))
    assert np.array_equal(pose.rotation, np.eye(3))
    assert np.array_equal(pose.center, CANONICAL_CENTER)
