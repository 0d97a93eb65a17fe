"""Camera models, Plücker ray maps, world-frame normalization and point-cloud utilities.

Conventions used throughout the package:

* Extrinsics are camera-to-world.  The camera looks along its local +z axis,
  local x is image right, local y is image down (so the camera's "up" vector
  in world space is ``-R @ (0, 1, 0)``).
* Pixel (u, v) samples the ray through (u + 0.5, v + 0.5) in pixel units.
* Depth is Euclidean distance along the ray from the camera center.
* The canonical first camera is ``[I | (0, 0, -1)]``: identity rotation,
  unit distance from the origin on the -z axis, looking at the origin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    DegenerateScaleError,
    InvalidCameraError,
    RollNotApplicableError,
)

CANONICAL_CENTER = np.array([0.0, 0.0, -1.0])

_WORLD_UP = np.array([0.0, 1.0, 0.0])
_POLE_FALLBACK_UP = np.array([1.0, 0.0, 0.0])


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world rigid transform plus pinhole intrinsics."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    center: np.ndarray  # (3,) world units
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        center = np.asarray(self.center, dtype=np.float64)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "center", center)
        if rotation.shape != (3, 3) or center.shape != (3,):
            raise InvalidCameraError("rotation must be (3,3) and center (3,)")
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(center)):
            raise InvalidCameraError("non-finite pose entries")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) > 1e-6:
            raise InvalidCameraError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise InvalidCameraError("rotation determinant is not +1")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidCameraError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidCameraError("principal point outside the image")

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in world space (local +z)."""
        return self.rotation[:, 2].copy()

    @property
    def up_vector(self) -> np.ndarray:
        """Camera "up" in world space; -y in the local frame (image y points down)."""
        return -self.rotation[:, 1]

    def with_extrinsics(self, rotation: np.ndarray, center: np.ndarray) -> CameraPose:
        return CameraPose(
            rotation, center, self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )

    def pixel_rays(self) -> np.ndarray:
        """Unit ray directions in world space, one per pixel; shape (H, W, 3)."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)],
            axis=-1,
        )
        d_world = d_cam @ self.rotation.T
        return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points (N, 3) to pixel coordinates (N, 2) and camera z (N,)."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = (pts - self.center) @ self.rotation
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * cam[:, 0] / z + self.cx
            v = self.fy * cam[:, 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def looks_at_origin(self, tol: float = 0.1) -> bool:
        """True if the optical axis passes within ``tol`` of the world origin."""
        return float(np.linalg.norm(np.cross(self.center, self.optical_axis))) <= tol


def canonical_pose(template: CameraPose) -> CameraPose:
    """The fixed first-view pose [I | (0,0,-1)] with ``template``'s intrinsics."""
    return template.with_extrinsics(np.eye(3), CANONICAL_CENTER.copy())


def intrinsics_for_fov(resolution: int, fov_deg: float) -> tuple[float, float, float, float]:
    """(fx, fy, cx, cy) of a square pinhole camera with the given horizontal FOV."""
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2.0)
    return f, f, resolution / 2.0, resolution / 2.0


def look_at_pose(
    center: np.ndarray,
    fx: float,
    fy: float,
    cx: float,
    cy: float,
    width: int,
    height: int,
    target: np.ndarray | None = None,
) -> CameraPose:
    """Roll-free camera at ``center`` looking at ``target`` (default world origin).

    The camera up vector is aligned with the projection of world +y onto the
    image plane; cameras on the +-y pole fall back to +x as the up reference.
    """
    center = np.asarray(center, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    z = target - center
    norm = np.linalg.norm(z)
    if norm < 1e-12:
        raise InvalidCameraError("camera center coincides with the look-at target")
    z = z / norm
    up_ref = _WORLD_UP
    u = up_ref - np.dot(up_ref, z) * z
    if np.linalg.norm(u) < 1e-6:
        up_ref = _POLE_FALLBACK_UP
        u = up_ref - np.dot(up_ref, z) * z
    u = u / np.linalg.norm(u)
    y = -u  # image y points down
    x = np.cross(y, z)
    rotation = np.stack([x, y, z], axis=1)
    return CameraPose(rotation, center, fx, fy, cx, cy, width, height)


@dataclass(frozen=True)
class PluckerMap:
    """Per-pixel ray encoding: unit direction d and moment m = center x d."""

    directions: np.ndarray  # (H, W, 3), unit norm
    moments: np.ndarray  # (H, W, 3)

    def as_array(self) -> np.ndarray:
        """Stacked (H, W, 6) array: direction channels then moment channels."""
        return np.concatenate([self.directions, self.moments], axis=-1)


def plucker_map(pose: CameraPose) -> PluckerMap:
    """Plücker ray map of every pixel of ``pose``."""
    directions = pose.pixel_rays()
    moments = np.cross(np.broadcast_to(pose.center, directions.shape), directions)
    return PluckerMap(directions, moments)


@dataclass(frozen=True)
class Similarity:
    """World similarity p' = scale * rotation @ p + translation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)
    scale: float

    def transform_points(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * (pts @ self.rotation.T) + self.translation

    def transform_pose(self, pose: CameraPose) -> CameraPose:
        rotation = self.rotation @ pose.rotation
        center = self.scale * (self.rotation @ pose.center) + self.translation
        return pose.with_extrinsics(rotation, center)

    @property
    def is_identity(self) -> bool:
        return (
            self.scale == 1.0
            and np.array_equal(self.rotation, np.eye(3))
            and np.array_equal(self.translation, np.zeros(3))
        )


def normalize_cameras(poses: list[CameraPose]) -> tuple[list[CameraPose], Similarity]:
    """Map the first pose to the canonical [I | (0,0,-1)] frame.

    Every pose is transformed by the same similarity (relative poses are
    preserved); the scale puts the first camera at unit distance from the
    world origin.  The first output pose is constructed exactly canonical.
    """
    if not poses:
        raise ValueError("need at least one pose")
    first = poses[0]
    dist = float(np.linalg.norm(first.center))
    if dist < 1e-9:
        raise DegenerateScaleError("first camera center is at the world origin")
    rotation = first.rotation.T
    scale = 1.0 / dist
    translation = CANONICAL_CENTER - scale * (rotation @ first.center)
    sim = Similarity(rotation, translation, scale)
    out = [canonical_pose(first)]
    out.extend(sim.transform_pose(p) for p in poses[1:])
    return out, sim


def depth_to_pointmap(depth: np.ndarray, pose: CameraPose) -> np.ndarray:
    """World points p = center + depth * ray for every pixel; zero where depth is 0.

    ``depth`` is Euclidean distance along the (unit) pixel ray.  Background
    pixels (depth exactly 0) map to the zero vector and are meant to be
    excluded by a validity mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != (pose.height, pose.width):
        raise ValueError(f"depth shape {depth.shape} does not match camera size")
    rays = pose.pixel_rays()
    points = pose.center + depth[..., None] * rays
    return np.where(depth[..., None] > 0, points, 0.0)


def pointmap_to_depth(pointmap: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Per-pixel camera-z depth of a world point map under ``pose``."""
    pts = np.asarray(pointmap, dtype=np.float64)
    return (pts - pose.center) @ pose.rotation[:, 2]


@dataclass(frozen=True)
class PointCloud:
    """World-space points with optional colors in [0,1] and confidences."""

    points: np.ndarray  # (N, 3)
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]
    confidences: np.ndarray | None = None  # (N,)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", points)
        if not np.all(np.isfinite(points)):
            raise ValueError("point cloud contains NaN/Inf")
        if self.colors is not None:
            colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if colors.shape[0] != points.shape[0]:
                raise ValueError("colors count does not match points")
            if not np.all(np.isfinite(colors)) or colors.min(initial=0.0) < 0.0 or colors.max(initial=0.0) > 1.0:
                raise ValueError("colors must be finite and within [0, 1]")
            object.__setattr__(self, "colors", colors)
        if self.confidences is not None:
            conf = np.asarray(self.confidences, dtype=np.float64).reshape(-1)
            if conf.shape[0] != points.shape[0]:
                raise ValueError("confidences count does not match points")
            if not np.all(np.isfinite(conf)):
                raise ValueError("confidences contain NaN/Inf")
            object.__setattr__(self, "confidences", conf)

    def __len__(self) -> int:
        return self.points.shape[0]


def merge_clouds(clouds: list[PointCloud]) -> PointCloud:
    """Concatenate clouds; colors/confidences kept only if present on every part."""
    clouds = [c for c in clouds if len(c) > 0]
    if not clouds:
        return PointCloud(np.zeros((0, 3)))
    points = np.concatenate([c.points for c in clouds])
    colors = None
    if all(c.colors is not None for c in clouds):
        colors = np.concatenate([c.colors for c in clouds])
    conf = None
    if all(c.confidences is not None for c in clouds):
        conf = np.concatenate([c.confidences for c in clouds])
    return PointCloud(points, colors, conf)


def _cloud_points(cloud) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    return pts.reshape(-1, 3)


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point clouds.

    0.5 * mean_{x in A} min_{y in B} |x - y|  +  0.5 * mean_{y in B} min_x |x - y|,
    with plain (not squared) Euclidean distances.
    """
    pa, pb = _cloud_points(a), _cloud_points(b)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise ValueError("chamfer_distance requires non-empty clouds")
    d_ab, _ = cKDTree(pb).query(pa, k=1)
    d_ba, _ = cKDTree(pa).query(pb, k=1)
    return 0.5 * float(np.mean(d_ab)) + 0.5 * float(np.mean(d_ba))


def rotation_about_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotate_poses_about_x(poses: list[CameraPose], angle_rad: float) -> list[CameraPose]:
    rot = rotation_about_x(angle_rad)
    return [p.with_extrinsics(rot @ p.rotation, rot @ p.center) for p in poses]


def _roll_angles(
    axes: np.ndarray, ups: np.ndarray, angle_rad: float
) -> tuple[np.ndarray, np.ndarray]:
    """Signed roll of each camera after rotating all poses about world x.

    Roll is the angle between the camera up vector and the plane spanned by
    world up (+-y) and the optical axis.  Returns (rolls, valid); a camera is
    invalid where that plane degenerates (axis parallel to +-y).
    """
    rot = rotation_about_x(angle_rad)
    z = axes @ rot.T
    u = ups @ rot.T
    n = np.cross(z, _WORLD_UP)
    n_norm = np.linalg.norm(n, axis=-1)
    valid = n_norm > 1e-9
    n_hat = np.where(valid[:, None], n / np.maximum(n_norm, 1e-30)[:, None], 0.0)
    rolls = np.arcsin(np.clip(np.sum(u * n_hat, axis=-1), -1.0, 1.0))
    return rolls, valid


def recover_up_direction(
    poses: list[CameraPose],
    grid_step_deg: float = 0.5,
    refine_tol_deg: float = 0.05,
    look_at_tol: float = 0.1,
) -> float:
    """Angle (radians) of the world-x rotation that minimizes total camera roll.

    Assumes every pose looks toward the world origin and that the input
    images were captured with aligned up-directions; under those conditions
    the object's true up lies in the world yz-plane and a single rotation
    about x removes the residual roll of all cameras.  The returned angle is
    found by a grid search over [-90, 90] degrees followed by golden-section
    refinement, and is meant to be applied to the poses via
    ``rotate_poses_about_x``.

    Cameras whose optical axis is parallel to the search axis (x) conflate
    roll with the searched rotation and are excluded from the objective;
    so are cameras looking along world +-y, whose roll is undefined.
    """
    if len(poses) < 2:
        raise RollNotApplicableError("need at least two poses")
    for i, p in enumerate(poses):
        if not p.looks_at_origin(look_at_tol):
            raise RollNotApplicableError(f"pose {i} does not look at the world origin")

    axes = np.stack([p.optical_axis for p in poses])
    ups = np.stack([p.up_vector for p in poses])

    on_search_axis = np.linalg.norm(np.cross(axes, np.array([1.0, 0.0, 0.0])), axis=-1) < 1e-6
    usable = ~on_search_axis
    if not np.any(usable):
        raise RollNotApplicableError("every camera looks along the search axis; roll is unconstrained")
    axes, ups = axes[usable], ups[usable]

    def objective(angle_rad: float) -> float:
        rolls, valid = _roll_angles(axes, ups, angle_rad)
        if not np.any(valid):
            return np.inf
        return float(np.sum(rolls[valid] ** 2))

    grid = np.deg2rad(np.arange(-90.0, 90.0 + 1e-9, grid_step_deg))
    values = np.array([objective(a) for a in grid])
    best = int(np.argmin(values))
    if not np.isfinite(values[best]):
        raise RollNotApplicableError("roll undefined for every camera at every angle")

    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    return _golden_section(objective, lo, hi, np.deg2rad(refine_tol_deg))


def _golden_section(f, lo: float, hi: float, tol: float) -> float:
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - ratio * (hi - lo)
    x2 = lo + ratio * (hi - lo)
    f1, f2 = f(x1), f(x2)
    while hi - lo > tol:
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - ratio * (hi - lo)
            f1 = f(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + ratio * (hi - lo)
            f2 = f(x2)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class _RelativePose:
    rotation: np.ndarray
    translation: np.ndarray


def relative_pose(a: CameraPose, b: CameraPose) -> _RelativePose:
    """Pose of camera ``b`` expressed in camera ``a``'s frame."""
    rotation = a.rotation.T @ b.rotation
    translation = a.rotation.T @ (b.center - a.center)
    return _RelativePose(rotation, translation)
