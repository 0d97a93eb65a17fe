"""Procedural scenes: analytic primitives, camera sampling, RGBD rendering, batches.

Scenes are unions of spheres, axis-aligned boxes and y-axis capped cylinders,
scaled to fit inside the unit ball at the origin.  Rendering is a one-ray-per-
pixel closest-hit caster with Lambertian shading (two fixed directional lights
plus ambient) over a white background, so that depth values are exactly the
analytic ray-surface intersection distances.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import (
    CameraPose,
    Similarity,
    depth_to_pointmap,
    intrinsics_for_fov,
    look_at_pose,
    normalize_cameras,
)

BACKGROUND_RGB = np.array([1.0, 1.0, 1.0])
AMBIENT = 0.25
# Directional lights: (unit direction toward the light, intensity).
LIGHTS = (
    (np.array([0.5, 0.7, -0.5]) / np.linalg.norm([0.5, 0.7, -0.5]), 0.75),
    (np.array([-0.6, 0.3, 0.6]) / np.linalg.norm([-0.6, 0.3, 0.6]), 0.35),
)

DEFAULT_RADIUS_RANGE = (1.8, 3.2)
DEFAULT_FOV_DEG = 50.0
_EPS = 1e-9


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    albedo: np.ndarray

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.center)) + self.radius


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center +- half_extents."""

    center: np.ndarray
    half_extents: np.ndarray
    albedo: np.ndarray

    @property
    def bound(self) -> float:
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extents))


@dataclass(frozen=True)
class Cylinder:
    """Capped cylinder with axis along world y."""

    center: np.ndarray
    radius: float
    half_height: float
    albedo: np.ndarray

    @property
    def bound(self) -> float:
        return float(
            np.linalg.norm(self.center) + np.hypot(self.radius, self.half_height)
        )


Primitive = Sphere | Box | Cylinder


@dataclass(frozen=True)
class ProceduralScene:
    primitives: tuple[Primitive, ...]
    seed: int

    def __post_init__(self):
        if not 1 <= len(self.primitives) <= 6:
            raise ValueError("scene must contain 1..6 primitives")
        for p in self.primitives:
            if p.bound > 1.0 + 1e-9:
                raise ValueError("primitive extends outside the unit ball")


def make_scene(seed: int) -> ProceduralScene:
    """Deterministic random scene of 1-6 primitives inside the unit ball."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(1, 7))
    prims: list[Primitive] = []
    for _ in range(count):
        kind = rng.choice(["sphere", "box", "cylinder"])
        direction = rng.normal(size=3)
        direction /= max(np.linalg.norm(direction), 1e-12)
        center = direction * rng.uniform(0.0, 0.55)
        albedo = rng.uniform(0.15, 0.95, size=3)
        if kind == "sphere":
            prims.append(Sphere(center, float(rng.uniform(0.12, 0.40)), albedo))
        elif kind == "box":
            prims.append(Box(center, rng.uniform(0.10, 0.35, size=3), albedo))
        else:
            prims.append(
                Cylinder(
                    center,
                    float(rng.uniform(0.10, 0.30)),
                    float(rng.uniform(0.12, 0.35)),
                    albedo,
                )
            )
    # Rescale so the whole union sits strictly inside the unit ball.
    extent = max(p.bound for p in prims)
    if extent > 0.95:
        s = 0.95 / extent
        prims = [_scale_primitive(p, s) for p in prims]
    return ProceduralScene(tuple(prims), seed)


def _scale_primitive(p: Primitive, s: float) -> Primitive:
    if isinstance(p, Sphere):
        return replace(p, center=p.center * s, radius=p.radius * s)
    if isinstance(p, Box):
        return replace(p, center=p.center * s, half_extents=p.half_extents * s)
    return replace(p, center=p.center * s, radius=p.radius * s, half_height=p.half_height * s)


def default_intrinsics(resolution: int, fov_deg: float = DEFAULT_FOV_DEG) -> tuple[float, float, float, float]:
    """(fx, fy, cx, cy) for a square image with the dataset's default FOV."""
    return intrinsics_for_fov(resolution, fov_deg)


def sample_cameras(
    seed: int,
    n: int,
    radius_range: tuple[float, float] = DEFAULT_RADIUS_RANGE,
    resolution: int = 64,
    fov_deg: float = DEFAULT_FOV_DEG,
) -> list[CameraPose]:
    """Roll-free look-at cameras at uniform random directions and radii."""
    r_min, r_max = radius_range
    if r_min <= 1.0:
        raise ValueError("r_min must exceed 1 (cameras must stay outside the unit ball)")
    if n < 1:
        raise ValueError("need at least one camera")
    rng = np.random.default_rng(seed)
    fx, fy, cx, cy = default_intrinsics(resolution, fov_deg)
    poses = []
    while len(poses) < n:
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        if norm < 1e-8:
            continue
        center = direction / norm * rng.uniform(r_min, r_max)
        poses.append(look_at_pose(center, fx, fy, cx, cy, resolution, resolution))
    return poses


# --- ray casting -----------------------------------------------------------


def _intersect_sphere(p: Sphere, origin: np.ndarray, dirs: np.ndarray):
    oc = origin - p.center
    b = dirs @ oc
    c = float(oc @ oc) - p.radius**2
    disc = b * b - c
    hit = disc >= 0.0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > _EPS, t0, t1)
    hit &= t > _EPS
    t = np.where(hit, t, np.inf)
    t_fin = np.where(hit, t, 0.0)
    normals = (origin + t_fin[..., None] * dirs - p.center) / p.radius
    return t, normals


def _intersect_box(p: Box, origin: np.ndarray, dirs: np.ndarray):
    lo = p.center - p.half_extents
    hi = p.center + p.half_extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
    t_lo = (lo - origin) * inv
    t_hi = (hi - origin) * inv
    t1 = np.minimum(t_lo, t_hi)
    t2 = np.maximum(t_lo, t_hi)
    # Rays parallel to a slab: inside gives (-inf, inf), outside no hit.
    parallel = np.abs(dirs) < 1e-15
    inside = (origin >= lo) & (origin <= hi)
    t1 = np.where(parallel, np.where(inside, -np.inf, np.inf), t1)
    t2 = np.where(parallel, np.where(inside, np.inf, -np.inf), t2)
    t_near = t1.max(axis=-1)
    t_far = t2.min(axis=-1)
    hit = (t_near <= t_far) & (t_far > _EPS)
    t = np.where(t_near > _EPS, t_near, t_far)
    t = np.where(hit, t, np.inf)
    # Normal: the axis realizing t_near (entry face), signed by ray direction.
    axis = np.argmax(t1, axis=-1)
    normals = np.zeros(dirs.shape)
    rows = np.arange(dirs.shape[0])
    normals[rows, axis] = -np.sign(dirs[rows, axis])
    return t, normals


def _intersect_cylinder(p: Cylinder, origin: np.ndarray, dirs: np.ndarray):
    o = origin - p.center
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dz * dz
    b = o[0] * dx + o[2] * dz
    c = o[0] * o[0] + o[2] * o[2] - p.radius**2
    disc = b * b - a * c
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.maximum(disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        ts0 = (-b - sq) / a
        ts1 = (-b + sq) / a
    t_side = np.full(dirs.shape[0], np.inf)
    side_norm = np.zeros(dirs.shape)
    for ts in (ts0, ts1):
        y = o[1] + ts * dy
        valid = ok & (ts > _EPS) & (np.abs(y) <= p.half_height) & (ts < t_side)
        t_side = np.where(valid, ts, t_side)
    y_hit = o[1] + t_side * dy
    px = o[0] + t_side * dx
    pz = o[2] + t_side * dz
    finite = np.isfinite(t_side)
    side_norm[finite, 0] = px[finite] / p.radius
    side_norm[finite, 2] = pz[finite] / p.radius

    # Caps at y = +-half_height.
    t_cap = np.full(dirs.shape[0], np.inf)
    cap_sign = np.zeros(dirs.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        for sign in (1.0, -1.0):
            tc = (sign * p.half_height - o[1]) / dy
            x = o[0] + tc * dx
            z = o[2] + tc * dz
            valid = (np.abs(dy) > 1e-15) & (tc > _EPS) & (x * x + z * z <= p.radius**2) & (tc < t_cap)
            t_cap = np.where(valid, tc, t_cap)
            cap_sign = np.where(valid, sign, cap_sign)

    use_cap = t_cap < t_side
    t = np.where(use_cap, t_cap, t_side)
    normals = side_norm.copy()
    normals[use_cap] = 0.0
    normals[use_cap, 1] = cap_sign[use_cap]
    return t, normals


def _intersect(p: Primitive, origin: np.ndarray, dirs: np.ndarray):
    if isinstance(p, Sphere):
        return _intersect_sphere(p, origin, dirs)
    if isinstance(p, Box):
        return _intersect_box(p, origin, dirs)
    return _intersect_cylinder(p, origin, dirs)


@dataclass(frozen=True)
class RenderedView:
    """One RGBD render: pose, rgb in [0,1], ray-length depth (0 = background)."""

    pose: CameraPose
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    pointmap: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool

    def transformed(self, sim: Similarity) -> RenderedView:
        """The same view expressed in a similarity-transformed world frame."""
        pose = sim.transform_pose(self.pose)
        pointmap = np.where(
            self.mask[..., None], sim.transform_points(self.pointmap), 0.0
        )
        return RenderedView(pose, self.rgb, self.depth * sim.scale, pointmap, self.mask)


def shade(albedo: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Lambertian shading with the module's fixed lights; clamped to [0,1]."""
    light = np.full(normals.shape[:-1], AMBIENT)
    for direction, intensity in LIGHTS:
        light = light + intensity * np.maximum(0.0, normals @ direction)
    return np.clip(albedo * light[..., None], 0.0, 1.0)


def render_rgbd(scene: ProceduralScene, pose: CameraPose, supersample: int = 1) -> RenderedView:
    """Closest-hit render of ``scene`` from ``pose``.

    ``supersample`` > 1 averages an s*s grid of rays per pixel for RGB only;
    depth, mask and point map always come from the pixel-center ray so they
    stay exactly on analytic surfaces.
    """
    h, w = pose.height, pose.width
    dirs = pose.pixel_rays().reshape(-1, 3)
    t, normals, albedo = _closest_hit(scene, pose.center, dirs)
    hit = np.isfinite(t)
    rgb = np.where(hit[:, None], shade(albedo, normals), BACKGROUND_RGB)

    if supersample > 1:
        s = supersample
        fine = CameraPose(
            pose.rotation, pose.center, pose.fx * s, pose.fy * s,
            pose.cx * s, pose.cy * s, w * s, h * s,
        )
        fd = fine.pixel_rays().reshape(-1, 3)
        ft, fn, fa = _closest_hit(scene, pose.center, fd)
        f_rgb = np.where(np.isfinite(ft)[:, None], shade(fa, fn), BACKGROUND_RGB)
        rgb = f_rgb.reshape(h, s, w, s, 3).mean(axis=(1, 3)).reshape(-1, 3)

    depth = np.where(hit, t, 0.0).reshape(h, w)
    view = RenderedView(
        pose=pose,
        rgb=rgb.reshape(h, w, 3),
        depth=depth,
        pointmap=depth_to_pointmap(depth, pose),
        mask=hit.reshape(h, w),
    )
    return view


def _closest_hit(scene: ProceduralScene, origin: np.ndarray, dirs: np.ndarray):
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_n = np.zeros((n, 3))
    best_a = np.zeros((n, 3))
    for prim in scene.primitives:
        t, normals = _intersect(prim, origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[:, None], normals, best_n)
        best_a = np.where(closer[:, None], prim.albedo, best_a)
    return best_t, best_n, best_a


def render_views(scene: ProceduralScene, poses: list[CameraPose]) -> list[RenderedView]:
    return [render_rgbd(scene, p) for p in poses]


# --- analytic surface sampling (ground truth for Chamfer evaluation) -------


def _inside_any(points: np.ndarray, scene: ProceduralScene, skip: int) -> np.ndarray:
    inside = np.zeros(points.shape[0], dtype=bool)
    for j, p in enumerate(scene.primitives):
        if j == skip:
            continue
        rel = points - p.center
        if isinstance(p, Sphere):
            inside |= np.linalg.norm(rel, axis=-1) < p.radius - 1e-9
        elif isinstance(p, Box):
            inside |= np.all(np.abs(rel) < p.half_extents - 1e-9, axis=-1)
        else:
            inside |= (np.hypot(rel[:, 0], rel[:, 2]) < p.radius - 1e-9) & (
                np.abs(rel[:, 1]) < p.half_height - 1e-9
            )
    return inside


def _primitive_area(p: Primitive) -> float:
    if isinstance(p, Sphere):
        return 4.0 * np.pi * p.radius**2
    if isinstance(p, Box):
        a, b, c = 2.0 * p.half_extents
        return 2.0 * (a * b + b * c + a * c)
    return 2.0 * np.pi * p.radius * (2.0 * p.half_height + p.radius)


def _sample_on_primitive(p: Primitive, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(p, Sphere):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        return p.center + p.radius * d
    if isinstance(p, Box):
        areas = np.array([p.half_extents[1] * p.half_extents[2],
                          p.half_extents[0] * p.half_extents[2],
                          p.half_extents[0] * p.half_extents[1]])
        face_axis = rng.choice(3, size=n, p=areas / areas.sum())
        sign = rng.choice([-1.0, 1.0], size=n)
        pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * p.half_extents
        pts[np.arange(n), face_axis] = sign * p.half_extents[face_axis]
        return p.center + pts
    side_area = 2.0 * np.pi * p.radius * 2.0 * p.half_height
    cap_area = 2.0 * np.pi * p.radius**2
    on_side = rng.uniform(size=n) < side_area / (side_area + cap_area)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = p.radius * np.sqrt(rng.uniform(size=n))
    pts = np.empty((n, 3))
    pts[:, 0] = np.where(on_side, p.radius * np.cos(phi), r * np.cos(phi))
    pts[:, 2] = np.where(on_side, p.radius * np.sin(phi), r * np.sin(phi))
    cap_sign = rng.choice([-1.0, 1.0], size=n)
    pts[:, 1] = np.where(
        on_side, rng.uniform(-p.half_height, p.half_height, size=n), cap_sign * p.half_height
    )
    return p.center + pts


def surface_points(scene: ProceduralScene, n: int, seed: int = 0) -> np.ndarray:
    """~n points on the visible union surface (area-weighted, occluded interior culled)."""
    rng = np.random.default_rng(seed)
    areas = np.array([_primitive_area(p) for p in scene.primitives])
    counts = np.maximum(1, np.round(n * areas / areas.sum()).astype(int))
    chunks = []
    for j, (p, c) in enumerate(zip(scene.primitives, counts)):
        pts = _sample_on_primitive(p, int(c), rng)
        chunks.append(pts[~_inside_any(pts, scene, skip=j)])
    return np.concatenate(chunks)


# --- training batches -------------------------------------------------------


@dataclass(frozen=True)
class TrainingExample:
    """4 source views + 1 target view in the normalized (canonical) frame."""

    sources: tuple[RenderedView, ...]
    target: RenderedView
    similarity: Similarity

    @property
    def source_poses(self) -> list[CameraPose]:
        return [v.pose for v in self.sources]


def sample_batch(views: list[RenderedView], seed: int) -> list[TrainingExample]:
    """Draw 7 distinct views: 4 shared sources and 3 targets -> 3 examples.

    All examples share the same normalized source views (the first source is
    transformed to the canonical pose, and every pose/point map of the example
    is expressed in that frame).
    """
    if len(views) < 7:
        raise ValueError("need at least 7 views to sample a batch")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(views), size=7, replace=False)
    source_views = [views[i] for i in idx[:4]]
    norm_poses, sim = normalize_cameras([v.pose for v in source_views])
    # Take poses from normalize_cameras so the first one is exactly canonical.
    norm_sources = tuple(
        replace(v.transformed(sim), pose=p) for v, p in zip(source_views, norm_poses)
    )
    return [
        TrainingExample(norm_sources, views[i].transformed(sim), sim)
        for i in idx[4:]
    ]
