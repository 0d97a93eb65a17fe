"""The full network: tokenizers, interleaved frame/global trunk, and decode heads.

Source images become patch tokens through a trainable linear embedding; the
target view enters purely as a Plücker ray map pushed through a linear layer.
Each view is prefixed with a camera token and R register tokens (the first
source view gets its own special embeddings, every other view shares one set).
After L layers of (frame attention -> MLP -> masked global attention -> MLP),
a camera head reads the source camera tokens and two convolutional upsampling
heads decode the target ray tokens into an RGB image and a point map with a
per-pixel confidence channel.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .attention import (
    SceneCache,
    SelfAttention,
    TokenLayout,
    build_kv_cache,
    frame_attention,
    masked_global_attention,
    query_with_cache,
)
from .errors import ConfigMismatchError
from .geometry import CameraPose, intrinsics_for_fov, plucker_map


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    dim: int = 128
    heads: int = 4
    patch_size: int = 8
    registers: int = 4
    resolution: int = 64
    head_channels: tuple[int, ...] = (48, 24, 12)
    mlp_ratio: int = 4
    n_sources: int = 4
    fov_deg: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.resolution % self.patch_size:
            raise ValueError("resolution must be divisible by patch size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        stages = int(math.log2(self.patch_size))
        if 2**stages != self.patch_size:
            raise ValueError("patch size must be a power of two")
        if len(self.head_channels) != stages:
            raise ValueError(f"head_channels must have {stages} entries for patch size {self.patch_size}")
        object.__setattr__(self, "head_channels", tuple(self.head_channels))

    @property
    def grid(self) -> int:
        return self.resolution // self.patch_size

    @property
    def patches(self) -> int:
        return self.grid * self.grid

    @property
    def tokens_per_view(self) -> int:
        return 1 + self.registers + self.patches

    def default_intrinsics(self) -> tuple[float, float, float, float]:
        return intrinsics_for_fov(self.resolution, self.fov_deg)

    def to_json(self) -> dict:
        data = asdict(self)
        data["head_channels"] = list(self.head_channels)
        return data

    @classmethod
    def from_json(cls, data: dict) -> ModelConfig:
        data = dict(data)
        data["head_channels"] = tuple(data["head_channels"])
        return cls(**data)


def sincos_position_encoding(dim: int, grid: int) -> torch.Tensor:
    """2D sine/cosine positional encoding for a grid of patch tokens: (grid*grid, dim)."""
    if dim % 4:
        raise ValueError("dim must be divisible by 4 for 2D sin/cos encodings")
    quarter = dim // 4
    omega = 1.0 / (100.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))
    coords = torch.arange(grid, dtype=torch.float64)
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    parts = []
    for pos in (yy.reshape(-1), xx.reshape(-1)):
        angle = pos[:, None] * omega[None, :]
        parts.extend([torch.sin(angle), torch.cos(angle)])
    return torch.cat(parts, dim=1).float()


def gram_schmidt_6d(v6: torch.Tensor) -> torch.Tensor:
    """Map a 6D rotation parameterization to a proper rotation matrix.

    The two 3-vectors are orthonormalized (first vector normalized, second
    made orthogonal, third by cross product) and used as matrix columns.
    Near-zero or collinear inputs fall back to completing a valid frame from
    the least-aligned coordinate axis.  Computed in float64 so the result is
    orthonormal within 1e-6 even for float32 inputs.
    """
    in_dtype = v6.dtype
    v6 = v6.double()
    a1, a2 = v6[..., 0:3], v6[..., 3:6]
    eye = torch.zeros_like(a1)
    eye[..., 0] = 1.0
    a1 = torch.where(a1.norm(dim=-1, keepdim=True) < 1e-8, eye, a1)
    b1 = a1 / a1.norm(dim=-1, keepdim=True)

    v2 = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    # Collinear fallback: project the coordinate axis least aligned with b1.
    axis_idx = b1.abs().argmin(dim=-1, keepdim=True)
    fallback = torch.zeros_like(b1).scatter(-1, axis_idx, 1.0)
    fallback = fallback - (b1 * fallback).sum(-1, keepdim=True) * b1
    v2 = torch.where(v2.norm(dim=-1, keepdim=True) < 1e-8, fallback, v2)
    b2 = v2 / v2.norm(dim=-1, keepdim=True)
    b3 = torch.cross(b1, b2, dim=-1)
    return torch.stack([b1, b2, b3], dim=-1).to(in_dtype)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * ratio)
        self.fc2 = nn.Linear(dim * ratio, dim)
        self.act = nn.GELU()

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class TrunkLayer(nn.Module):
    """One (frame attention + MLP, global attention + MLP) pair, pre-norm residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.frame_norm = nn.LayerNorm(dim)
        self.frame_attn = SelfAttention(dim, heads)
        self.frame_mlp_norm = nn.LayerNorm(dim)
        self.frame_mlp = Mlp(dim, mlp_ratio)
        self.global_norm = nn.LayerNorm(dim)
        self.global_attn = SelfAttention(dim, heads)
        self.global_mlp_norm = nn.LayerNorm(dim)
        self.global_mlp = Mlp(dim, mlp_ratio)


class CameraHead(nn.Module):
    """Cross-view pose head: attention blocks over the per-view camera tokens.

    Poses are supervised relative to the first view, so decoding view i needs
    the pair (token_i, token_first) with multiplicative interaction; a couple
    of self-attention blocks over the V camera tokens provide exactly that,
    followed by a per-token MLP to the 9-number pose parameterization.
    """

    def __init__(self, dim: int, heads: int, blocks: int = 2):
        super().__init__()
        self.norms1 = nn.ModuleList(nn.LayerNorm(dim) for _ in range(blocks))
        self.attns = nn.ModuleList(SelfAttention(dim, heads) for _ in range(blocks))
        self.norms2 = nn.ModuleList(nn.LayerNorm(dim) for _ in range(blocks))
        self.mlps = nn.ModuleList(Mlp(dim, 2) for _ in range(blocks))
        self.out_norm = nn.LayerNorm(dim)
        self.out = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 9))
        # Start predictions at the canonical first-view pose.
        with torch.no_grad():
            self.out[-1].bias.copy_(
                torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0])
            )

    def forward(self, cam_tokens: torch.Tensor) -> torch.Tensor:
        x = cam_tokens
        for n1, attn, n2, mlp in zip(self.norms1, self.attns, self.norms2, self.mlps):
            x = x + attn(n1(x))
            x = x + mlp(n2(x))
        return self.out(self.out_norm(x))


class ConvDecoder(nn.Module):
    """Token grid -> full-resolution map by repeated (2x upsample, 3x3 conv, GELU).

    An optional full-resolution skip input (the target's Plücker ray map) is
    projected and added before the output convolution, giving the decoder
    exact per-pixel ray geometry that the patch-rate tokens cannot carry.
    """

    def __init__(self, dim: int, channels: tuple[int, ...], out_channels: int, skip_channels: int = 0):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        convs = []
        prev = dim
        for c in channels:
            # Replicate padding keeps spatially constant inputs constant.
            convs.append(nn.Conv2d(prev, c, kernel_size=3, padding=1, padding_mode="replicate"))
            prev = c
        self.convs = nn.ModuleList(convs)
        self.act = nn.GELU()
        self.skip_proj = nn.Conv2d(skip_channels, prev, kernel_size=1) if skip_channels else None
        self.out = nn.Conv2d(prev, out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor, skip: torch.Tensor | None = None) -> torch.Tensor:
        for conv in self.convs:
            x = self.act(conv(self.up(x)))
        if skip is not None and self.skip_proj is not None:
            x = self.act(x + self.skip_proj(skip))
        return self.out(x)


@dataclass
class ModelOutputs:
    """Single-target forward outputs (tensors + convenience CameraPose list)."""

    rotations: torch.Tensor  # (V, 3, 3) predicted source rotations
    centers: torch.Tensor  # (V, 3) predicted source centers
    rgb: torch.Tensor  # (H, W, 3) in [0, 1]
    pointmap: torch.Tensor  # (H, W, 3)
    confidence: torch.Tensor  # (H, W), strictly positive
    poses: list[CameraPose] = field(default_factory=list)


class RngModel(nn.Module):
    """Reconstruction trunk + render heads over cached or joint token sequences."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng():
            torch.manual_seed(config.seed)
            dim, ps = config.dim, config.patch_size
            self.patch_embed = nn.Linear(ps * ps * 3, dim)
            self.ray_embed = nn.Linear(ps * ps * 6, dim)
            scale = 0.02
            self.special_camera = nn.Parameter(torch.randn(1, dim) * scale)
            self.special_registers = nn.Parameter(torch.randn(config.registers, dim) * scale)
            self.shared_camera = nn.Parameter(torch.randn(1, dim) * scale)
            self.shared_registers = nn.Parameter(torch.randn(config.registers, dim) * scale)
            self.layers = nn.ModuleList(
                TrunkLayer(dim, config.heads, config.mlp_ratio) for _ in range(config.layers)
            )
            self.final_norm = nn.LayerNorm(dim)
            self.camera_head = CameraHead(dim, config.heads)
            self.camera_pool = nn.Linear(dim, dim)
            self.rgb_head = ConvDecoder(dim, config.head_channels, 3, skip_channels=6)
            self.point_head = ConvDecoder(dim, config.head_channels, 4, skip_channels=6)
            self._scale_residual_init()
        self.register_buffer(
            "pos_encoding", sincos_position_encoding(dim, config.grid), persistent=False
        )

    def _scale_residual_init(self) -> None:
        """Shrink residual-branch output projections by 1/sqrt(2 * n_residual_blocks)
        and start the decode heads at their biases; stabilizes early training."""
        scale = 1.0 / math.sqrt(2.0 * 2.0 * len(self.layers))
        with torch.no_grad():
            for layer in self.layers:
                for module in (layer.frame_attn.proj, layer.global_attn.proj,
                               layer.frame_mlp.fc2, layer.global_mlp.fc2):
                    module.weight.mul_(scale)
            for head in (self.rgb_head, self.point_head):
                head.out.weight.zero_()
                head.out.bias.zero_()

    # -- bookkeeping ---------------------------------------------------------

    def fingerprint(self) -> str:
        """Hash of the architecture config and every weight tensor."""
        h = hashlib.sha256(json.dumps(self.config.to_json(), sort_keys=True).encode())
        for name, param in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(param.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @property
    def dtype(self) -> torch.dtype:
        return self.patch_embed.weight.dtype

    # -- tokenization --------------------------------------------------------

    def _prefix_tokens(self, special: bool) -> torch.Tensor:
        if special:
            return torch.cat([self.special_camera, self.special_registers])
        return torch.cat([self.shared_camera, self.shared_registers])

    def tokenize_sources(self, images: torch.Tensor) -> tuple[torch.Tensor, TokenLayout]:
        """Images (V, H, W, 3) in [0,1] -> token sequence (V*(1+R+P), dim) + layout."""
        cfg = self.config
        v, h, w, _ = images.shape
        if (h, w) != (cfg.resolution, cfg.resolution):
            raise ValueError(f"expected {cfg.resolution}x{cfg.resolution} images, got {h}x{w}")
        x = images.to(self.dtype) * 2.0 - 1.0
        patches = self._patchify(x)  # (V, P, ps*ps*3)
        tokens = self.patch_embed(patches) + self.pos_encoding.to(self.dtype)
        views = []
        for i in range(v):
            prefix = self._prefix_tokens(special=(i == 0)).to(self.dtype)
            views.append(torch.cat([prefix, tokens[i]]))
        layout = TokenLayout.build(v, 0, cfg.registers, cfg.patches)
        return torch.cat(views), layout

    def target_rays(self, pose: CameraPose) -> torch.Tensor:
        """Full-resolution Plücker map of the target pose: (H, W, 6)."""
        cfg = self.config
        if (pose.height, pose.width) != (cfg.resolution, cfg.resolution):
            raise ValueError("target pose resolution does not match the model")
        return torch.from_numpy(plucker_map(pose).as_array()).to(self.dtype)

    def embed_target(self, pose: CameraPose) -> torch.Tensor:
        """Target pose -> ray tokens with shared camera/register prefix: (1+R+P, dim)."""
        return self._embed_rays(self.target_rays(pose))

    def _embed_rays(self, rays: torch.Tensor) -> torch.Tensor:
        patches = self._patchify(rays[None])[0]  # (P, ps*ps*6)
        tokens = self.ray_embed(patches) + self.pos_encoding.to(self.dtype)
        return torch.cat([self._prefix_tokens(special=False).to(self.dtype), tokens])

    def _patchify(self, maps: torch.Tensor) -> torch.Tensor:
        """(V, H, W, C) -> (V, P, ps*ps*C) in row-major patch order."""
        ps = self.config.patch_size
        v, h, w, c = maps.shape
        g = h // ps
        x = maps.reshape(v, g, ps, g, ps, c)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(v, g * g, ps * ps * c)

    # -- trunk ---------------------------------------------------------------

    def _run_trunk(
        self, x: torch.Tensor, layout: TokenLayout, collect_kv: bool = False
    ) -> tuple[torch.Tensor, list[tuple[torch.Tensor, torch.Tensor]]]:
        allowed = layout.allowed_mask(x.device) if layout.target_views else None
        blocks = []
        for layer in self.layers:
            x = x + frame_attention(layer.frame_attn, layer.frame_norm(x), layout)
            x = x + layer.frame_mlp(layer.frame_mlp_norm(x))
            normed = layer.global_norm(x)
            if collect_kv:
                _, k, v = layer.global_attn.split_qkv(normed)
                blocks.append((k, v))
            if allowed is None:
                x = x + layer.global_attn(normed)
            else:
                x = x + layer.global_attn(normed, allowed)
            x = x + layer.global_mlp(layer.global_mlp_norm(x))
        return self.final_norm(x), blocks

    def _decode_poses(self, x: torch.Tensor, layout: TokenLayout) -> tuple[torch.Tensor, torch.Tensor]:
        cam_tokens = torch.stack(
            [x[layout.camera_token_index(i)] for i in range(len(layout.source_views))]
        )
        raw = self.camera_head(cam_tokens)
        return gram_schmidt_6d(raw[..., :6]), raw[..., 6:9]

    def decode_heads(
        self, ray_tokens: torch.Tensor, rays: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Final target ray tokens (..., P, dim) -> (rgb, pointmap, confidence) maps.

        ``rays`` optionally provides the target's full-resolution Plücker map
        (..., H, W, 6) as a per-pixel skip input to both decoders.
        """
        cfg = self.config
        res = cfg.resolution
        batch = ray_tokens.shape[:-2]
        grid = ray_tokens.reshape(-1, cfg.grid, cfg.grid, cfg.dim).permute(0, 3, 1, 2)
        skip = None
        if rays is not None:
            skip = rays.reshape(-1, res, res, 6).permute(0, 3, 1, 2).to(grid.dtype)
        rgb = torch.sigmoid(self.rgb_head(grid, skip)).permute(0, 2, 3, 1)
        point_raw = self.point_head(grid, skip)
        pointmap = point_raw[:, :3].permute(0, 2, 3, 1)
        confidence = torch.exp(torch.clamp(point_raw[:, 3], -8.0, 8.0))
        return (
            rgb.reshape(*batch, res, res, 3),
            pointmap.reshape(*batch, res, res, 3),
            confidence.reshape(*batch, res, res),
        )

    # -- public forwards -----------------------------------------------------

    def forward_multi(
        self, images: torch.Tensor, target_poses: list[CameraPose]
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Joint forward with T isolated target views sharing one source pass.

        Returns (rotations (V,3,3), centers (V,3), rgb (T,H,W,3),
        pointmap (T,H,W,3), confidence (T,H,W)).  Each target's outputs equal
        its own single-target joint forward up to attention-isolation rounding.
        """
        cfg = self.config
        images = self._as_image_tensor(images)
        src_tokens, _ = self.tokenize_sources(images)
        rays = torch.stack([self.target_rays(p) for p in target_poses])
        tgt_tokens = [self._embed_rays(r) for r in rays]
        layout = TokenLayout.build(images.shape[0], len(target_poses), cfg.registers, cfg.patches)
        x = torch.cat([src_tokens, *tgt_tokens])
        x, _ = self._run_trunk(x, layout)
        rotations, centers = self._decode_poses(x, layout)
        n_src = len(layout.source_views)
        ray_tokens = torch.stack(
            [x[layout.patch_slice(n_src + t)] for t in range(len(target_poses))]
        )
        rgb, pointmap, confidence = self.decode_heads(ray_tokens, rays)
        return rotations, centers, rgb, pointmap, confidence

    def forward_joint(
        self,
        images,
        target_pose: CameraPose,
        source_intrinsics: tuple[float, float, float, float] | None = None,
    ) -> ModelOutputs:
        """Single-target joint forward over [source views ; target view]."""
        images = self._as_image_tensor(images)
        rotations, centers, rgb, pointmap, confidence = self.forward_multi(images, [target_pose])
        poses = self._poses_from_tensors(rotations, centers, source_intrinsics)
        return ModelOutputs(rotations, centers, rgb[0], pointmap[0], confidence[0], poses)

    def forward_stage1(
        self,
        images,
        source_intrinsics: tuple[float, float, float, float] | None = None,
    ) -> tuple[SceneCache, list[CameraPose]]:
        """Reconstruct from source views only; cache K/V at every global block."""
        images = self._as_image_tensor(images)
        tokens, layout = self.tokenize_sources(images)
        x, blocks = self._run_trunk(tokens, layout, collect_kv=True)
        rotations, centers = self._decode_poses(x, layout)
        poses = self._poses_from_tensors(rotations, centers, source_intrinsics)
        cache = build_kv_cache(blocks, layout, self.fingerprint(), poses)
        return cache, poses

    def forward_stage2(
        self, target_poses: CameraPose | list[CameraPose], cache: SceneCache
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Render target views by reading the sealed cache; no source recomputation.

        Accepts one pose or a list; outputs are (T,H,W,...) for a list input
        and (H,W,...) for a single pose.
        """
        single = isinstance(target_poses, CameraPose)
        poses = [target_poses] if single else list(target_poses)
        cache.require_ready(self.fingerprint())
        cfg = self.config
        res = cfg.resolution
        if not poses:
            return torch.zeros(0, res, res, 3), torch.zeros(0, res, res, 3), torch.zeros(0, res, res)
        rays = torch.stack([self.target_rays(p) for p in poses])
        x = torch.stack([self._embed_rays(r) for r in rays])  # (T, n_t, dim)
        layout = TokenLayout.build(0, 1, cfg.registers, cfg.patches)
        for i, layer in enumerate(self.layers):
            x = x + frame_attention(layer.frame_attn, layer.frame_norm(x), layout)
            x = x + layer.frame_mlp(layer.frame_mlp_norm(x))
            x = x + query_with_cache(layer.global_attn, layer.global_norm(x), cache, i)
            x = x + layer.global_mlp(layer.global_mlp_norm(x))
        x = self.final_norm(x)
        rgb, pointmap, confidence = self.decode_heads(x[:, layout.patch_slice(0)], rays)
        if single:
            return rgb[0], pointmap[0], confidence[0]
        return rgb, pointmap, confidence

    # -- helpers -------------------------------------------------------------

    def _as_image_tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            return images
        return torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))

    def _poses_from_tensors(
        self,
        rotations: torch.Tensor,
        centers: torch.Tensor,
        intrinsics: tuple[float, float, float, float] | None,
    ) -> list[CameraPose]:
        fx, fy, cx, cy = intrinsics if intrinsics is not None else self.config.default_intrinsics()
        res = self.config.resolution
        out = []
        for r, c in zip(rotations.detach().cpu().numpy(), centers.detach().cpu().numpy()):
            out.append(CameraPose(r.astype(np.float64), c.astype(np.float64), fx, fy, cx, cy, res, res))
        return out


def save_model(path, model: RngModel, metadata: dict | None = None) -> None:
    from .container import save_container

    tensors = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"kind": "checkpoint", "model_config": model.config.to_json()}
    meta.update(metadata or {})
    save_container(path, tensors, meta)


def load_model(path, expected_config: ModelConfig | None = None) -> tuple[RngModel, dict]:
    from .container import load_container

    tensors, meta = load_container(path)
    if "model_config" not in meta:
        raise ConfigMismatchError("checkpoint has no model config")
    config = ModelConfig.from_json(meta["model_config"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError("checkpoint config does not match the expected config")
    model = RngModel(config)
    state = {}
    expected = set(f"model.{k}" for k in model.state_dict())
    present = set(k for k in tensors if k.startswith("model."))
    if expected != present:
        raise ConfigMismatchError("checkpoint weights do not match the model architecture")
    for key in present:
        state[key[len("model."):]] = torch.from_numpy(tensors[key])
    model.load_state_dict(state)
    return model, meta
