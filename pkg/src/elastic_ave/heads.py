"""Task heads and losses: linear classifier on CLS, dense decoder over a full query grid."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Block, ElasticPositionalEncoding, LatentBundle


class ClassifierHead(nn.Module):
    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(embed_dim, num_classes)

    def forward(self, latents):
        cls = latents.cls if isinstance(latents, LatentBundle) else latents
        return self.fc(cls)


@dataclass(frozen=True)
class DenseQueryGrid:
    """Cell-centred query coordinates tiling the scene at ``d_patch`` granularity."""

    height: int
    width: int
    d_patch: int

    def __post_init__(self):
        if self.height % self.d_patch or self.width % self.d_patch:
            raise ValueError("scene size must be a multiple of d_patch for the decoder grid")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height // self.d_patch, self.width // self.d_patch

    def coords(self) -> torch.Tensor:
        gh, gw = self.shape
        cy = (torch.arange(gh, dtype=torch.float32) + 0.5) / gh
        cx = (torch.arange(gw, dtype=torch.float32) + 0.5) / gw
        yy, xx = torch.meshgrid(cy, cx, indexing="ij")
        s = torch.full_like(xx, self.d_patch / min(self.height, self.width))
        return torch.stack([xx, yy, s], -1).reshape(gh * gw, 3)


class DenseDecoder(nn.Module):
    """MAE-style decoder whose queries are a full grid of mask tokens.

    Encoder outputs (CLS included) and grid queries are processed jointly;
    only the grid outputs are kept and unpatchified into an image.
    """

    def __init__(self, embed_dim: int, grid: DenseQueryGrid, decoder_dim: int = 128,
                 depth: int = 2, num_heads: int = 4, in_chans: int = 3, num_freqs: int = 8):
        super().__init__()
        self.grid = grid
        self.in_chans = in_chans
        self.embed = nn.Linear(embed_dim, decoder_dim)
        self.query_token = nn.Parameter(torch.zeros(1, 1, decoder_dim))
        self.query_pos = ElasticPositionalEncoding(decoder_dim, num_freqs)
        self.blocks = nn.ModuleList([Block(decoder_dim, num_heads) for _ in range(depth)])
        self.norm = nn.LayerNorm(decoder_dim)
        self.pred = nn.Linear(decoder_dim, grid.d_patch ** 2 * in_chans)
        self.register_buffer("grid_coords", grid.coords(), persistent=False)
        nn.init.normal_(self.query_token, std=0.02)

    def forward(self, latents: LatentBundle) -> torch.Tensor:
        B = latents.cls.shape[0]
        enc = torch.cat([latents.cls[:, None], latents.tokens], 1)
        enc_mask = torch.cat([latents.mask.new_ones(B, 1), latents.mask], 1)
        queries = self.query_token + self.query_pos(self.grid_coords)[None]
        queries = queries.expand(B, -1, -1)
        x = torch.cat([self.embed(enc), queries], 1)
        key_mask = torch.cat([enc_mask, enc_mask.new_ones(B, queries.shape[1])], 1)
        for blk in self.blocks:
            x, _ = blk(x, key_mask)
        x = self.pred(self.norm(x[:, enc.shape[1]:]))
        gh, gw = self.grid.shape
        p, C = self.grid.d_patch, self.in_chans
        x = x.reshape(B, gh, gw, C, p, p).permute(0, 3, 1, 4, 2, 5)
        return x.reshape(B, C, gh * p, gw * p)


def rmse_loss(pred: torch.Tensor, target: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Root mean squared error; ``reduction='none'`` gives one value per sample."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    if reduction == "none":
        return (pred - target).pow(2).flatten(1).mean(1).sqrt()
    return (pred - target).pow(2).mean().sqrt()


def distill_kl_loss(student_logits: torch.Tensor, teacher_probs: torch.Tensor,
                    reduction: str = "mean") -> torch.Tensor:
    """KL(teacher || softmax(student))."""
    teacher_probs = torch.as_tensor(teacher_probs, dtype=student_logits.dtype)
    if (teacher_probs.sum(-1) - 1).abs().max() > 1e-5 or (teacher_probs < 0).any():
        raise ValueError("teacher_probs must be a probability distribution")
    log_q = F.log_softmax(student_logits, -1)
    log_p = torch.where(teacher_probs > 0, teacher_probs.clamp_min(1e-30).log(), torch.zeros_like(log_q))
    kl = (teacher_probs * (log_p - log_q)).sum(-1)
    return kl if reduction == "none" else kl.mean()


def ce_loss(student_logits: torch.Tensor, label, reduction: str = "mean") -> torch.Tensor:
    label = torch.as_tensor(label, dtype=torch.long)
    n = student_logits.shape[-1]
    if (label < 0).any() or (label >= n).any():
        raise ValueError(f"label out of range for {n} classes")
    if student_logits.dim() == 1:
        return -F.log_softmax(student_logits, -1)[label]
    return F.cross_entropy(student_logits, label, reduction=reduction)
