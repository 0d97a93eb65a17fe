"""HTTP inference service: reconstruct once per session, render many times.

POST /sessions uploads the source images and runs the reconstruction stage;
the resulting per-block K/V cache lives behind an opaque session id.  Renders
and point-cloud accumulation are cache reads: they never mutate the cache, so
renders on one session may run concurrently, while accumulation appends are
serialized per session.  Poses on the wire are camera-to-world (rotation as 9
row-major floats, center as 3 floats); intrinsics come from the model config.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
import torch
from fastapi import FastAPI, HTTPException, Response
from PIL import Image
from pydantic import BaseModel, Field

from .attention import SceneCache
from .container import write_container
from .errors import InvalidCameraError
from .evaluation import filter_by_confidence
from .geometry import CameraPose, PointCloud, merge_clouds, pointmap_to_depth
from .model import RngModel
from .ply import write_ply

MAX_REQUEST_BYTES = 32 * 1024 * 1024


class PoseJson(BaseModel):
    rotation: list[float] = Field(..., min_length=9, max_length=9, description="row-major 3x3")
    center: list[float] = Field(..., min_length=3, max_length=3)


class CreateSessionRequest(BaseModel):
    images: list[str] = Field(..., description="base64-encoded PNG source views")


class CreateSessionResponse(BaseModel):
    id: str
    poses: list[PoseJson]
    source_pointmaps_url: str


class RenderRequest(BaseModel):
    pose: PoseJson


class RenderResponse(BaseModel):
    pose: PoseJson  # echo of the request pose
    rgb_png: str
    maps_rngt: str  # RNGT container: depth, pointmap, confidence


class AccumulateRequest(BaseModel):
    pose: PoseJson
    conf_quantile: float = Field(0.3, ge=0.0, le=1.0)


class AccumulateResponse(BaseModel):
    points_added: int
    total_points: int


class SessionInfo(BaseModel):
    id: str
    source_views: int
    total_points: int
    cache_hash: str
    created_at: float


class ServiceConfig(BaseModel):
    resolution: int
    n_sources: int
    registers: int
    layers: int
    fov_deg: float
    fingerprint: str


@dataclass
class Session:
    id: str
    cache: SceneCache
    poses: list[CameraPose]
    source_pointmaps: bytes
    created_at: float = field(default_factory=time.time)
    last_used: float = field(default_factory=time.time)
    cloud: PointCloud = field(default_factory=lambda: PointCloud(np.zeros((0, 3))))
    accumulate_lock: threading.Lock = field(default_factory=threading.Lock)


class SessionStore:
    """In-memory session table with LRU eviction above ``capacity``."""

    def __init__(self, capacity: int = 16):
        self.capacity = capacity
        self._sessions: dict[str, Session] = {}
        self._lock = threading.Lock()

    def add(self, session: Session) -> None:
        with self._lock:
            self._sessions[session.id] = session
            while len(self._sessions) > self.capacity:
                oldest = min(self._sessions.values(), key=lambda s: s.last_used)
                del self._sessions[oldest.id]

    def get(self, session_id: str) -> Session:
        with self._lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
            session.last_used = time.time()
            return session

    def delete(self, session_id: str) -> None:
        with self._lock:
            if session_id not in self._sessions:
                raise HTTPException(status_code=404, detail=f"unknown session {session_id!r}")
            del self._sessions[session_id]

    def __len__(self) -> int:
        with self._lock:
            return len(self._sessions)


def _decode_png(data_b64: str, resolution: int) -> np.ndarray:
    try:
        raw = base64.b64decode(data_b64, validate=True)
        img = Image.open(io.BytesIO(raw)).convert("RGB")
    except Exception:
        raise HTTPException(status_code=400, detail="image is not decodable PNG data")
    if img.size != (resolution, resolution):
        raise HTTPException(
            status_code=400,
            detail=f"expected {resolution}x{resolution} images, got {img.size[0]}x{img.size[1]}",
        )
    return np.asarray(img, dtype=np.float32) / 255.0


def _encode_png(rgb: np.ndarray) -> str:
    img = Image.fromarray(np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _pose_from_json(pose: PoseJson, model: RngModel) -> CameraPose:
    rotation = np.array(pose.rotation, dtype=np.float64).reshape(3, 3)
    center = np.array(pose.center, dtype=np.float64)
    fx, fy, cx, cy = model.config.default_intrinsics()
    res = model.config.resolution
    try:
        return CameraPose(rotation, center, fx, fy, cx, cy, res, res)
    except InvalidCameraError as exc:
        raise HTTPException(status_code=422, detail=f"invalid pose: {exc}")


def _pose_to_json(pose: CameraPose) -> PoseJson:
    return PoseJson(rotation=pose.rotation.reshape(-1).tolist(), center=pose.center.tolist())


def create_app(model: RngModel, max_sessions: int = 16) -> FastAPI:
    model = model.eval().requires_grad_(False)
    app = FastAPI(title="rngt inference service")
    store = SessionStore(max_sessions)
    app.state.store = store
    app.state.model = model
    fingerprint = model.fingerprint()

    @app.get("/config", response_model=ServiceConfig)
    def get_config():
        cfg = model.config
        return ServiceConfig(
            resolution=cfg.resolution,
            n_sources=cfg.n_sources,
            registers=cfg.registers,
            layers=cfg.layers,
            fov_deg=cfg.fov_deg,
            fingerprint=fingerprint,
        )

    @app.post("/sessions", response_model=CreateSessionResponse, status_code=201)
    def create_session(request: CreateSessionRequest):
        cfg = model.config
        if sum(len(s) for s in request.images) > MAX_REQUEST_BYTES:
            raise HTTPException(status_code=413, detail="request too large")
        if len(request.images) != cfg.n_sources:
            raise HTTPException(
                status_code=400,
                detail=f"expected {cfg.n_sources} source views, got {len(request.images)}",
            )
        images = np.stack([_decode_png(s, cfg.resolution) for s in request.images])
        with torch.no_grad():
            cache, poses = model.forward_stage1(images)
            rgbs, pmaps, confs = model.forward_stage2(poses, cache)
        tensors = {}
        for i, pose in enumerate(poses):
            tensors[f"pointmap.{i}"] = pmaps[i].numpy()
            tensors[f"confidence.{i}"] = confs[i].numpy()
            tensors[f"depth.{i}"] = pointmap_to_depth(pmaps[i].numpy(), pose).astype(np.float32)
        blob = write_container(tensors, {"kind": "source-pointmaps", "views": len(poses)})
        session = Session(
            id=uuid.uuid4().hex,
            cache=cache,
            poses=poses,
            source_pointmaps=blob,
        )
        store.add(session)
        return CreateSessionResponse(
            id=session.id,
            poses=[_pose_to_json(p) for p in poses],
            source_pointmaps_url=f"/sessions/{session.id}/source_pointmaps",
        )

    @app.get("/sessions/{session_id}", response_model=SessionInfo)
    def session_info(session_id: str):
        session = store.get(session_id)
        return SessionInfo(
            id=session.id,
            source_views=len(session.poses),
            total_points=len(session.cloud),
            cache_hash=session.cache.content_hash(),
            created_at=session.created_at,
        )

    @app.get("/sessions/{session_id}/source_pointmaps")
    def source_pointmaps(session_id: str):
        session = store.get(session_id)
        return Response(content=session.source_pointmaps, media_type="application/octet-stream")

    def _render(session: Session, pose_json: PoseJson):
        pose = _pose_from_json(pose_json, model)
        with torch.no_grad():
            rgb, pmap, conf = model.forward_stage2(pose, session.cache)
        return pose, rgb.numpy(), pmap.numpy(), conf.numpy()

    @app.post("/sessions/{session_id}/render", response_model=RenderResponse)
    def render(session_id: str, request: RenderRequest):
        session = store.get(session_id)
        pose, rgb, pmap, conf = _render(session, request.pose)
        tensors = {
            "depth": pointmap_to_depth(pmap, pose).astype(np.float32),
            "pointmap": pmap,
            "confidence": conf,
        }
        blob = write_container(tensors, {"kind": "render-maps"})
        return RenderResponse(
            pose=request.pose,
            rgb_png=_encode_png(rgb),
            maps_rngt=base64.b64encode(blob).decode("ascii"),
        )

    @app.post("/sessions/{session_id}/accumulate", response_model=AccumulateResponse)
    def accumulate(session_id: str, request: AccumulateRequest):
        session = store.get(session_id)
        _, rgb, pmap, conf = _render(session, request.pose)
        added = filter_by_confidence(pmap, conf, rgb, request.conf_quantile)
        if len(added) == 0:
            raise HTTPException(status_code=422, detail="confidence quantile removed every point")
        with session.accumulate_lock:
            session.cloud = merge_clouds([session.cloud, added])
            total = len(session.cloud)
        return AccumulateResponse(points_added=len(added), total_points=total)

    @app.get("/sessions/{session_id}/pointcloud")
    def pointcloud(session_id: str):
        session = store.get(session_id)
        with session.accumulate_lock:
            blob = write_ply(session.cloud)
        return Response(content=blob, media_type="application/octet-stream")

    @app.delete("/sessions/{session_id}", status_code=204)
    def delete_session(session_id: str):
        store.delete(session_id)

    return app
