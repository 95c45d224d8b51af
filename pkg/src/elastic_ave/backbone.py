"""Elastic ViT encoder: patches at arbitrary positions and scales.

Every patch carries ``(cx, cy, s)``: its centre normalized by the scene size
and its side length relative to the scene's short side.  Position enters the
model only through these coordinates, never through token order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_VERSION = 3


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    embed_dim: int = 192
    num_heads: int = 4
    d_patch: int = 16
    in_chans: int = 3
    num_freqs: int = 8
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")

    @classmethod
    def paper_scale(cls, **kw) -> "EncoderConfig":
        return cls(depth=12, embed_dim=768, num_heads=12, **kw)


@dataclass
class PatchBundle:
    """Patches ``B x N x C x p x p`` at coords ``B x N x 3``; ``mask`` (``B x N``) marks valid slots."""

    patches: torch.Tensor
    coords: torch.Tensor
    mask: torch.Tensor

    def __post_init__(self):
        if not (self.patches.shape[:2] == self.coords.shape[:2] == self.mask.shape[:2]):
            raise ValueError("patches, coords and mask must align")

    @classmethod
    def empty(cls, batch: int, d_patch: int, channels: int = 3) -> "PatchBundle":
        return cls(torch.zeros(batch, 0, channels, d_patch, d_patch),
                   torch.zeros(batch, 0, 3), torch.zeros(batch, 0, dtype=torch.bool))

    def __len__(self) -> int:
        return self.patches.shape[1]

    def extend(self, other: "PatchBundle") -> "PatchBundle":
        return PatchBundle(torch.cat([self.patches, other.patches], 1),
                           torch.cat([self.coords, other.coords], 1),
                           torch.cat([self.mask, other.mask], 1))


@dataclass
class LatentBundle:
    tokens: torch.Tensor
    cls: torch.Tensor
    attentions: list
    mask: torch.Tensor


def split_glimpse(pixels: torch.Tensor, coords: torch.Tensor, scene_hw, d_patch: int):
    """Cut batched captures into a raster of patches with scene coordinates.

    ``pixels`` is ``B x C x d_cam x d_cam``; ``coords`` is ``B x 3`` with
    ``(x_abs, y_abs, d)``.  Returns patches ``B x k x C x p x p`` and patch
    coords ``B x k x 3`` where ``k = ceil(d_cam / p) ** 2``.
    """
    if pixels.dim() == 3:
        pixels, coords = pixels[None], torch.as_tensor(coords)[None]
    B, C, dc, _ = pixels.shape
    n = math.ceil(dc / d_patch)
    if n * d_patch != dc:
        pixels = F.interpolate(pixels, size=(n * d_patch, n * d_patch), mode="bilinear",
                               align_corners=False)
    patches = pixels.reshape(B, C, n, d_patch, n, d_patch).permute(0, 2, 4, 1, 3, 5)
    patches = patches.reshape(B, n * n, C, d_patch, d_patch)

    H, W = scene_hw
    c = coords.to(torch.float64)
    step = c[:, 2] / n
    idx = torch.arange(n, dtype=torch.float64)
    cy = (c[:, 1, None] + (idx[None] + 0.5) * step[:, None]) / H
    cx = (c[:, 0, None] + (idx[None] + 0.5) * step[:, None]) / W
    grid_cy = cy[:, :, None].expand(B, n, n)
    grid_cx = cx[:, None, :].expand(B, n, n)
    s = (step / min(H, W))[:, None, None].expand(B, n, n)
    pcoords = torch.stack([grid_cx, grid_cy, s], -1).reshape(B, n * n, 3)
    return patches, pcoords.to(pixels.dtype)


def sinusoid_features(coords: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """Raw ``(cx, cy, log s)`` followed by sin/cos at octave frequencies of each."""
    u = torch.stack([coords[..., 0], coords[..., 1], torch.log(coords[..., 2].clamp_min(1e-6))], -1)
    freqs = math.pi * 2.0 ** torch.arange(num_freqs, dtype=coords.dtype, device=coords.device)
    ang = u[..., None] * freqs
    return torch.cat([u, ang.sin().flatten(-2), ang.cos().flatten(-2)], -1)


class ElasticPositionalEncoding(nn.Module):
    def __init__(self, embed_dim: int, num_freqs: int = 8):
        super().__init__()
        self.num_freqs = num_freqs
        self.proj = nn.Linear(3 + 6 * num_freqs, embed_dim)

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        return self.proj(sinusoid_features(coords, self.num_freqs))


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, key_mask=None):
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.num_heads, D // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = logits.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out), attn.mean(1)


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x, key_mask=None):
        a, attn = self.attn(self.norm1(x), key_mask)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, attn


class ElasticViT(nn.Module):
    """ViT encoder over a bag of positioned patches plus a CLS token.

    The CLS token sits at sequence index 0; patch ``j`` is at index ``j + 1``.
    """

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        E = cfg.embed_dim
        # Pixels are standardized per patch so content is not swamped by the position code.
        self.patch_norm = nn.LayerNorm(cfg.in_chans * cfg.d_patch ** 2)
        self.patch_embed = nn.Linear(cfg.in_chans * cfg.d_patch ** 2, E)
        self.pos_embed = ElasticPositionalEncoding(E, cfg.num_freqs)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, E))
        self.blocks = nn.ModuleList([Block(E, cfg.num_heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(E)
        # Mean and spread removed by the norm, so absolute intensity stays recoverable.
        # Created last so the other weights draw the same seeded values as without it.
        self.stat_embed = nn.Linear(2, E)
        nn.init.normal_(self.cls_token, std=0.02)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(m):
        if isinstance(m, nn.Linear):
            nn.init.xavier_uniform_(m.weight)
            nn.init.zeros_(m.bias)

    def encode_positions(self, coords: torch.Tensor) -> torch.Tensor:
        return self.pos_embed(coords)

    def forward(self, bundle: PatchBundle) -> LatentBundle:
        patches, coords, mask = bundle.patches, bundle.coords, bundle.mask.bool()
        if not torch.isfinite(patches).all():
            raise ValueError("non-finite pixels in patch bundle")
        B, N = patches.shape[:2]
        flat = patches.flatten(2)
        mean = flat.mean(-1, keepdim=True)
        spread = ((flat - mean).pow(2).mean(-1) + 1e-6).sqrt()
        stats = torch.stack([mean[..., 0], spread], -1)
        x = self.patch_embed(self.patch_norm(flat)) + self.stat_embed(stats) + self.pos_embed(coords)
        # Padded slots can hold garbage; zero them so nothing non-finite leaks in.
        x = x.masked_fill(~mask[..., None], 0.0)
        x = torch.cat([self.cls_token.expand(B, -1, -1), x], 1)
        key_mask = torch.cat([mask.new_ones(B, 1), mask], 1)
        attentions = []
        for blk in self.blocks:
            x, attn = blk(x, key_mask)
            attentions.append(attn)
        x = self.norm(x)
        return LatentBundle(tokens=x[:, 1:], cls=x[:, 0], attentions=attentions, mask=mask)

    encode = forward


def attention_rollout(attentions: Sequence[torch.Tensor], residual: float = 0.5,
                      atol: float = 1e-5, return_product: bool = False):
    """Patch importances from layer-wise attention (one head-averaged matrix per block).

    Each layer's matrix is mixed with the identity, ``(1 - residual) A + residual I``,
    renormalized by rows and multiplied across layers.  The importance of
    patch ``j`` is the CLS row (index 0) of the product at column ``j + 1``.
    """
    if not attentions:
        raise ValueError("need at least one attention matrix")
    result = None
    for A in attentions:
        A = torch.as_tensor(A)
        batched = A.dim() == 3
        if not batched:
            A = A[None]
        rows = A.sum(-1)
        if (A < -atol).any() or (rows - 1).abs().max() > atol:
            raise ValueError("attention matrices must be row-stochastic")
        eye = torch.eye(A.shape[-1], dtype=A.dtype, device=A.device)
        M = (1 - residual) * A + residual * eye
        M = M / M.sum(-1, keepdim=True)
        result = M if result is None else M @ result
    importance = result[:, 0, 1:]
    if not batched:
        importance, result = importance[0], result[0]
    return (importance, result) if return_product else importance


def save_encoder(model: ElasticViT, path: str) -> None:
    torch.save({"version": CHECKPOINT_VERSION, "config": asdict(model.cfg),
                "state_dict": model.state_dict()}, path)


def load_encoder(path: str, expected: Optional[EncoderConfig] = None) -> ElasticViT:
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ckpt.get('version')}")
    cfg = EncoderConfig(**ckpt["config"])
    if expected is not None and cfg != expected:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expected}")
    model = ElasticViT(cfg)
    model.load_state_dict(ckpt["state_dict"])
    return model
