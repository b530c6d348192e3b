"""Two-layer group/context decoder.

Token tensors use the ``(X, T, D)`` layout (tokens, frames, features).
Attention runs independently per frame, so internally everything is
transposed to ``(T, X, D)`` and the frame axis is the batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .tensor_core import DTYPE, AttentionConfig, FeedForward, LayerNorm, MultiHeadAttention


class EmptySceneError(ValueError):
    pass


class GroupingLayer(nn.Module):
    """Group tokens query the actor tokens of the same frame."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_hidden)
        self.norm = LayerNorm(cfg.model_dim)

    def forward(self, g_init: torch.Tensor, actors: torch.Tensor):
        if actors.shape[0] == 0:
            raise EmptySceneError("grouping attention needs at least one actor")
        if g_init.shape[1] != actors.shape[1]:
            raise ValueError(f"frame mismatch: groups {g_init.shape[1]} vs actors {actors.shape[1]}")
        q = g_init.transpose(0, 1)
        kv = actors.transpose(0, 1)
        att, weights = self.attn(q, kv, kv)
        out = self.norm(q + self.ffn(att))
        return out.transpose(0, 1), weights  # weights: T, h, K, M


class ContextualLayer(nn.Module):
    """Actors and group tokens jointly query the scene patch tokens."""

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_hidden)
        self.norm = LayerNorm(cfg.model_dim)

    def forward(self, actors: torch.Tensor, groups: torch.Tensor, image: torch.Tensor):
        t = actors.shape[1]
        if groups.shape[1] != t or image.shape[1] != t:
            raise ValueError(
                f"frame mismatch: actors {t}, groups {groups.shape[1]}, image grids {image.shape[1]}"
            )
        m = actors.shape[0]
        z = torch.cat([actors, groups], dim=0).transpose(0, 1)
        kv = image.transpose(0, 1)
        att, weights = self.attn(z, kv, kv)
        out = self.norm(z + self.ffn(att)).transpose(0, 1)
        return out[:m], out[m:], weights  # weights: T, h, M+K, N


@dataclass
class GCTOutput:
    actors_ctx: torch.Tensor
    groups_grp: torch.Tensor
    groups_ctx: torch.Tensor
    attn_records: dict = field(default_factory=dict)


class GroupContextTransformer(nn.Module):
    def __init__(self, cfg: AttentionConfig, num_groups: int, frames: int, init_std: float = 1.0):
        super().__init__()
        self.num_groups = num_groups
        self.frames = frames
        self.g_init = nn.Parameter(torch.randn(num_groups, frames, cfg.model_dim, dtype=DTYPE) * init_std)
        self.grouping = GroupingLayer(cfg)
        self.contextual = ContextualLayer(cfg)

    def forward(self, actors: torch.Tensor, image: torch.Tensor) -> GCTOutput:
        return gct_forward(actors, self.g_init, image, self)


def gct_forward(actors, g_init, image, model: GroupContextTransformer) -> GCTOutput:
    g_grp, w_grp = model.grouping(g_init, actors)
    a_ctx, g_ctx, w_ctx = model.contextual(actors, g_grp, image)
    return GCTOutput(a_ctx, g_grp, g_ctx, {"grouping": w_grp, "contextual": w_ctx})
