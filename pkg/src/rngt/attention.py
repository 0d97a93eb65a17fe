"""Token layout, masked global attention, frame attention and the scene cache.

The trunk interleaves two attention flavors over a token sequence made of
per-view groups (1 camera token + R register tokens + P patch/ray tokens):

* frame attention: self-attention restricted to each view's own tokens;
* global attention: attention across all views, with a causal rule that
  forbids source-view queries from attending to target-view keys (and, when
  several targets are present, isolates distinct targets from each other).

Because source tokens never read from target tokens, the key/value tensors
of the source views at every global block are independent of any target and
can be cached once, then reused by any number of target queries.
"""

from __future__ import annotations

import functools
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .container import read_container, write_container
from .errors import CacheNotSealedError, ContainerFormatError, StaleCacheError
from .geometry import CameraPose


@dataclass(frozen=True)
class ViewSpan:
    role: str  # "source" | "target"
    start: int
    count: int
    special: bool = False  # first source view carries the special cam/register tokens

    @property
    def stop(self) -> int:
        return self.start + self.count


@dataclass(frozen=True)
class TokenLayout:
    """Which token indices belong to which view, and each view's role."""

    views: tuple[ViewSpan, ...]
    registers: int
    patches: int

    @classmethod
    def build(cls, n_sources: int, n_targets: int, registers: int, patches: int) -> TokenLayout:
        per_view = 1 + registers + patches
        views = []
        start = 0
        for i in range(n_sources):
            views.append(ViewSpan("source", start, per_view, special=(i == 0)))
            start += per_view
        for _ in range(n_targets):
            views.append(ViewSpan("target", start, per_view))
            start += per_view
        return cls(tuple(views), registers, patches)

    @property
    def tokens_per_view(self) -> int:
        return 1 + self.registers + self.patches

    @property
    def total(self) -> int:
        return sum(v.count for v in self.views)

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def source_views(self) -> tuple[ViewSpan, ...]:
        return tuple(v for v in self.views if v.role == "source")

    @property
    def target_views(self) -> tuple[ViewSpan, ...]:
        return tuple(v for v in self.views if v.role == "target")

    def camera_token_index(self, view: int) -> int:
        return self.views[view].start

    def patch_slice(self, view: int) -> slice:
        span = self.views[view]
        return slice(span.start + 1 + self.registers, span.stop)

    def token_view_ids(self) -> np.ndarray:
        ids = np.empty(self.total, dtype=np.int64)
        for i, span in enumerate(self.views):
            ids[span.start:span.stop] = i
        return ids

    def source_token_mask(self) -> np.ndarray:
        mask = np.zeros(self.total, dtype=bool)
        for span in self.views:
            if span.role == "source":
                mask[span.start:span.stop] = True
        return mask

    def allowed_mask(self, device=None) -> torch.Tensor:
        """Boolean (n, n) mask; True where query i may attend to key j.

        Disallowed: source -> target, and target_a -> target_b for a != b.
        Source rows always keep all source keys and target rows always keep
        all source keys plus their own view, so no row is ever empty.
        """
        allowed = _cached_allowed_mask(self)
        return allowed.to(device) if device is not None else allowed

    def to_json(self) -> dict:
        return {
            "registers": self.registers,
            "patches": self.patches,
            "views": [
                {"role": v.role, "start": v.start, "count": v.count, "special": v.special}
                for v in self.views
            ],
        }

    @classmethod
    def from_json(cls, data: dict) -> TokenLayout:
        views = tuple(
            ViewSpan(v["role"], v["start"], v["count"], v["special"]) for v in data["views"]
        )
        return cls(views, data["registers"], data["patches"])


@functools.lru_cache(maxsize=16)
def _cached_allowed_mask(layout: TokenLayout) -> torch.Tensor:
    is_src = torch.from_numpy(layout.source_token_mask())
    view_ids = torch.from_numpy(layout.token_view_ids())
    src_to_tgt = is_src[:, None] & ~is_src[None, :]
    cross_target = (
        ~is_src[:, None] & ~is_src[None, :] & (view_ids[:, None] != view_ids[None, :])
    )
    return ~(src_to_tgt | cross_target)


def masked_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, allowed: torch.Tensor | None = None
) -> torch.Tensor:
    """Scaled dot-product attention with an optional boolean mask.

    q: (..., n_q, d_k), k/v: (..., n_k, d_k); ``allowed`` broadcasts against
    the (n_q, n_k) logit matrix.  Disallowed logits are set to -inf before
    the softmax, which renormalizes over the allowed keys only.
    """
    d_k = q.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    if allowed is not None:
        if not bool(allowed.any(dim=-1).all()):
            raise ValueError("attention mask leaves a query row with no allowed key")
        logits = logits.masked_fill(~allowed, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


class SelfAttention(nn.Module):
    """Multi-head self-attention with fused QKV projection and output projection."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def split_qkv(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Project x (..., n, dim) to per-head q, k, v of shape (..., heads, n, head_dim)."""
        n = x.shape[-2]
        qkv = self.qkv(x).reshape(*x.shape[:-1], 3, self.heads, self.head_dim)
        qkv = qkv.movedim(-3, 0).movedim(-2, -3)  # (3, ..., heads, n, head_dim)
        return qkv[0], qkv[1], qkv[2]

    def merge_heads(self, out: torch.Tensor) -> torch.Tensor:
        out = out.movedim(-3, -2)  # (..., n, heads, head_dim)
        return self.proj(out.reshape(*out.shape[:-2], self.dim))

    def forward(self, x: torch.Tensor, allowed: torch.Tensor | None = None) -> torch.Tensor:
        q, k, v = self.split_qkv(x)
        return self.merge_heads(masked_attention(q, k, v, allowed))

    def forward_cached(
        self, x_t: torch.Tensor, k_src: torch.Tensor, v_src: torch.Tensor
    ) -> torch.Tensor:
        """Attention of target tokens over [cached source K/V ; fresh target K/V].

        x_t: (B, n_t, dim); k_src/v_src: (heads, n_s, head_dim).  No source-row
        outputs are produced and no source projections are recomputed.
        """
        if x_t.shape[-2] == 0:
            return x_t
        q, k_t, v_t = self.split_qkv(x_t)
        expand = (*x_t.shape[:-2], *k_src.shape)
        k = torch.cat([k_src.expand(expand), k_t], dim=-2)
        v = torch.cat([v_src.expand(expand), v_t], dim=-2)
        return self.merge_heads(masked_attention(q, k, v))


def masked_global_attention(
    attn: SelfAttention, x: torch.Tensor, layout: TokenLayout
) -> torch.Tensor:
    """Global attention over the full sequence under the layout's causal mask."""
    if layout.total != x.shape[-2]:
        raise ValueError("layout does not cover the token sequence")
    return attn(x, layout.allowed_mask(x.device))


def frame_attention(attn: SelfAttention, x: torch.Tensor, layout: TokenLayout) -> torch.Tensor:
    """Self-attention within each view's own tokens (no cross-view flow)."""
    if layout.total != x.shape[-2]:
        raise ValueError("layout does not cover the token sequence")
    t = layout.tokens_per_view
    batch = x.shape[:-2]
    per_view = x.reshape(*batch, layout.n_views, t, x.shape[-1])
    out = attn(per_view)
    return out.reshape(*batch, layout.total, x.shape[-1])


class SceneCache:
    """Per-global-block cached source K/V tokens: the reusable scene representation.

    Built by a stage-1 forward over the source views, sealed, then read by any
    number of stage-2 target queries.  Sealed caches are immutable.
    """

    def __init__(self, layout: TokenLayout, fingerprint: str):
        self.layout = layout
        self.fingerprint = fingerprint
        self.keys: list[torch.Tensor] = []
        self.values: list[torch.Tensor] = []
        self.source_poses: list[CameraPose] | None = None
        self._sealed = False

    @property
    def sealed(self) -> bool:
        return self._sealed

    @property
    def n_blocks(self) -> int:
        return len(self.keys)

    @property
    def tokens_per_block(self) -> int:
        return self.keys[0].shape[-2] if self.keys else 0

    def append_block(self, k: torch.Tensor, v: torch.Tensor) -> None:
        if self._sealed:
            raise RuntimeError("sealed caches are immutable")
        self.keys.append(k.detach().clone())
        self.values.append(v.detach().clone())

    def seal(self) -> SceneCache:
        self._sealed = True
        return self

    def require_ready(self, expected_fingerprint: str | None = None) -> None:
        if not self._sealed:
            raise CacheNotSealedError("scene cache used before sealing")
        if expected_fingerprint is not None and expected_fingerprint != self.fingerprint:
            raise StaleCacheError(
                "scene cache was built by a different model "
                f"({self.fingerprint[:12]} != {expected_fingerprint[:12]})"
            )

    def content_hash(self) -> str:
        """Hash of the cached tensors; constant for the lifetime of a sealed cache."""
        h = hashlib.sha256()
        for t in (*self.keys, *self.values):
            h.update(t.numpy().tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        self.require_ready()
        tensors = {}
        for i, (k, v) in enumerate(zip(self.keys, self.values)):
            tensors[f"k.{i}"] = k.numpy()
            tensors[f"v.{i}"] = v.numpy()
        meta = {
            "kind": "scene-cache",
            "fingerprint": self.fingerprint,
            "layout": self.layout.to_json(),
            "blocks": self.n_blocks,
        }
        if self.source_poses is not None:
            meta["source_poses"] = [_pose_json(p) for p in self.source_poses]
        return write_container(tensors, meta)

    @classmethod
    def from_bytes(cls, data: bytes) -> SceneCache:
        tensors, meta = read_container(data)
        if meta.get("kind") != "scene-cache":
            raise ContainerFormatError("container does not hold a scene cache")
        cache = cls(TokenLayout.from_json(meta["layout"]), meta["fingerprint"])
        for i in range(meta["blocks"]):
            cache.append_block(torch.from_numpy(tensors[f"k.{i}"]), torch.from_numpy(tensors[f"v.{i}"]))
        if "source_poses" in meta:
            cache.source_poses = [_pose_from_json(p) for p in meta["source_poses"]]
        return cache.seal()


def _pose_json(p: CameraPose) -> dict:
    return {
        "rotation": p.rotation.reshape(-1).tolist(),
        "center": p.center.tolist(),
        "intrinsics": [p.fx, p.fy, p.cx, p.cy],
        "size": [p.width, p.height],
    }


def _pose_from_json(d: dict) -> CameraPose:
    fx, fy, cx, cy = d["intrinsics"]
    w, h = d["size"]
    return CameraPose(
        np.array(d["rotation"]).reshape(3, 3), np.array(d["center"]), fx, fy, cx, cy, w, h
    )


def build_kv_cache(
    blocks: list[tuple[torch.Tensor, torch.Tensor]],
    layout: TokenLayout,
    fingerprint: str,
    source_poses: list[CameraPose] | None = None,
) -> SceneCache:
    """Assemble and seal a SceneCache from per-block (K, V) source tensors."""
    cache = SceneCache(layout, fingerprint)
    for k, v in blocks:
        cache.append_block(k, v)
    cache.source_poses = source_poses
    return cache.seal()


def query_with_cache(
    attn: SelfAttention,
    target_tokens: torch.Tensor,
    cache: SceneCache,
    block_index: int,
    expected_fingerprint: str | None = None,
) -> torch.Tensor:
    """Stage-2 global attention: target queries read [cached source K/V ; own K/V]."""
    cache.require_ready(expected_fingerprint)
    return attn.forward_cached(target_tokens, cache.keys[block_index], cache.values[block_index])
