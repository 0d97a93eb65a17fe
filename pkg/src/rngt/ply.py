"""Binary little-endian PLY export/import for confidence-tagged point clouds.

Vertices carry float x,y,z, uchar red,green,blue and a float confidence.
Clouds without colors are written white; missing confidences are written as 1.
"""

from __future__ import annotations

import numpy as np

from .geometry import PointCloud

_HEADER = """ply
format binary_little_endian 1.0
element vertex {count}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property float confidence
end_header
"""

_VERTEX_DTYPE = np.dtype(
    [
        ("x", "<f4"),
        ("y", "<f4"),
        ("z", "<f4"),
        ("red", "u1"),
        ("green", "u1"),
        ("blue", "u1"),
        ("confidence", "<f4"),
    ]
)


def write_ply(cloud: PointCloud) -> bytes:
    n = len(cloud)
    rec = np.zeros(n, dtype=_VERTEX_DTYPE)
    pts = cloud.points.astype("<f4")
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    colors = cloud.colors if cloud.colors is not None else np.ones((n, 3))
    rgb = np.clip(np.round(colors * 255.0), 0, 255).astype("u1")
    rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    conf = cloud.confidences if cloud.confidences is not None else np.ones(n)
    rec["confidence"] = conf.astype("<f4")
    return _HEADER.format(count=n).encode("ascii") + rec.tobytes()


def read_ply(data: bytes) -> PointCloud:
    end = data.find(b"end_header\n")
    if end < 0:
        raise ValueError("not a PLY file: missing end_header")
    header = data[:end].decode("ascii").splitlines()
    if not header or header[0] != "ply":
        raise ValueError("not a PLY file: missing magic")
    if "format binary_little_endian 1.0" not in header:
        raise ValueError("only binary little-endian PLY is supported")
    count = None
    for line in header:
        if line.startswith("element vertex"):
            count = int(line.split()[-1])
    if count is None:
        raise ValueError("missing vertex element")
    body = data[end + len(b"end_header\n"):]
    expected = count * _VERTEX_DTYPE.itemsize
    if len(body) < expected:
        raise ValueError("truncated PLY payload")
    rec = np.frombuffer(body[:expected], dtype=_VERTEX_DTYPE)
    points = np.stack([rec["x"], rec["y"], rec["z"]], axis=-1).astype(np.float64)
    colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=-1) / 255.0
    return PointCloud(points, colors, rec["confidence"].astype(np.float64))
