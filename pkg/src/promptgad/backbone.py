"""Miniature ViT with group-prompt injection and 1x1 RoI-align actor tokens."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .tensor_core import DTYPE, AttentionConfig, FeedForward, LayerNorm, Linear, MultiHeadAttention
from .tensorio import load_tensor

PROMPT_MODES = ("none", "shallow", "deep")


@dataclass
class BackboneConfig:
    image_size: int = 32
    patch_size: int = 4
    layers: int = 4
    model_dim: int = 32
    heads: int = 4
    ffn_hidden: int | None = None
    channels: int = 3
    prompt_mode: str = "deep"
    prompt_count: int = 7
    frozen: bool = True

    def __post_init__(self):
        if self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.prompt_count < 0:
            raise ValueError("prompt_count must be >= 0")
        if self.prompt_mode == "none" and self.prompt_count:
            # no prompts are injected in plain mode
            self.prompt_count = 0

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.heads, self.ffn_hidden)


class PromptSet(nn.Module):
    """Learnable prompt tokens: one K x D matrix per layer (deep) or one at the input (shallow)."""

    def __init__(self, mode: str, count: int, dim: int, layers: int, std: float = 0.02):
        super().__init__()
        self.mode = mode
        self.count = count
        n_mats = {"none": 0, "shallow": 1, "deep": layers}[mode]
        self.tokens = nn.ParameterList(
            [nn.Parameter(torch.randn(count, dim, dtype=DTYPE) * std) for _ in range(n_mats)]
        )

    def __len__(self):
        return len(self.tokens)


class ViTBlock(nn.Module):
    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.model_dim)
        self.attn = MultiHeadAttention(cfg)
        self.ln2 = LayerNorm(cfg.model_dim)
        self.ffn = FeedForward(cfg.model_dim, cfg.ffn_hidden)

    def forward(self, x):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h)
        x = x + a
        return x + self.ffn(self.ln2(x))


class MiniViT(nn.Module):
    """Stand-in for a frozen foundation encoder. Frames go through independently."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.patch_embed = Linear(cfg.channels * cfg.patch_size**2, d)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_patches, d, dtype=DTYPE) * 0.02)
        att = cfg.attention()
        self.blocks = nn.ModuleList([ViTBlock(att) for _ in range(cfg.layers)])
        self.norm = LayerNorm(d)
        self.prompts = PromptSet(cfg.prompt_mode, cfg.prompt_count, d, cfg.layers)
        self.set_frozen(cfg.frozen)

    def set_frozen(self, frozen: bool) -> None:
        self.cfg.frozen = frozen
        for name, p in self.named_parameters():
            p.requires_grad_(name.startswith("prompts.") or not frozen)

    def backbone_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("prompts.")]

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        """``(B, C, H, W)`` pixels -> ``(B, N, D)`` patch tokens (projection + position)."""
        cfg = self.cfg
        if frames.dim() == 3:
            frames = frames.unsqueeze(0)
        b, c, h, w = frames.shape
        if (c, h, w) != (cfg.channels, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"frame shape {(c, h, w)} does not match config "
                f"{(cfg.channels, cfg.image_size, cfg.image_size)}"
            )
        p, g = cfg.patch_size, cfg.grid
        patches = frames.reshape(b, c, g, p, g, p).permute(0, 2, 4, 1, 3, 5).reshape(b, g * g, c * p * p)
        return self.patch_embed(patches) + self.pos_embed

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        """Run the transformer over ``(B, N, D)`` tokens; prompts are added and stripped here."""
        mode, k = self.prompts.mode, self.prompts.count
        b = tokens.shape[0]
        if mode == "deep" and len(self.prompts) != len(self.blocks):
            raise ValueError("deep mode needs one prompt matrix per layer")
        if mode == "shallow" and len(self.prompts) != 1:
            raise ValueError("shallow mode needs exactly one prompt matrix")
        x = tokens
        if mode == "shallow":
            x = torch.cat([self.prompts.tokens[0].expand(b, k, -1), x], dim=1)
        for layer, block in enumerate(self.blocks):
            if mode == "deep":
                # previous prompt outputs are discarded and replaced by fresh prompts
                fresh = self.prompts.tokens[layer].expand(b, k, -1)
                x = torch.cat([fresh, x if layer == 0 else x[:, k:]], dim=1)
            x = block(x)
        if mode != "none":
            x = x[:, k:]
        return self.norm(x)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """Frames ``(B, C, H, W)`` -> patch grids ``(B, H_f, W_f, D)``; prompts never included."""
        out = self.encode(self.patchify(frames))
        g = self.cfg.grid
        return out.reshape(out.shape[0], g, g, out.shape[-1])


# ---------------------------------------------------------------------------
# RoI pooling


def _check_boxes(boxes: torch.Tensor) -> None:
    x0, y0, x1, y1 = boxes.unbind(-1)
    ok = (x0 >= 0) & (y0 >= 0) & (x1 <= 1) & (y1 <= 1) & (x0 < x1) & (y0 < y1)
    if not bool(ok.all()):
        bad = boxes.reshape(-1, 4)[~ok.reshape(-1)][0].tolist()
        raise ValueError(f"degenerate or out-of-range box {bad}")


def quarter_points(boxes: torch.Tensor) -> torch.Tensor:
    """The 4 RoI-align sample points of each normalized box, shape ``(..., 4, 2)`` as (x, y)."""
    x0, y0, x1, y1 = boxes.unbind(-1)
    w, h = x1 - x0, y1 - y0
    xs = torch.stack([x0 + w / 4, x0 + 3 * w / 4], -1)
    ys = torch.stack([y0 + h / 4, y0 + 3 * h / 4], -1)
    px = xs[..., None, :].expand(*xs.shape[:-1], 2, 2)
    py = ys[..., :, None].expand(*ys.shape[:-1], 2, 2)
    return torch.stack([px, py], -1).reshape(*boxes.shape[:-1], 4, 2)


def bilinear_sample(grid: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sample an ``(H_f, W_f, D)`` grid at normalized ``(..., 2)`` points.

    Cell ``(r, c)`` has its centre at ``((c + 0.5) / W_f, (r + 0.5) / H_f)``;
    points beyond the outermost centres are clamped to the border.
    """
    hf, wf, _ = grid.shape
    gx = (points[..., 0] * wf - 0.5).clamp(0, wf - 1)
    gy = (points[..., 1] * hf - 0.5).clamp(0, hf - 1)
    x_lo = gx.floor().long().clamp(max=wf - 1)
    y_lo = gy.floor().long().clamp(max=hf - 1)
    x_hi = (x_lo + 1).clamp(max=wf - 1)
    y_hi = (y_lo + 1).clamp(max=hf - 1)
    wx = (gx - x_lo).unsqueeze(-1)
    wy = (gy - y_lo).unsqueeze(-1)
    flat = grid.reshape(hf * wf, -1)
    v00 = flat[y_lo * wf + x_lo]
    v01 = flat[y_lo * wf + x_hi]
    v10 = flat[y_hi * wf + x_lo]
    v11 = flat[y_hi * wf + x_hi]
    return (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)


def roi_pool_1x1(grid: torch.Tensor, box) -> torch.Tensor:
    """1x1 RoI-align: mean of the 4 bilinear samples at the box's quarter points."""
    box = torch.as_tensor(box, dtype=DTYPE)
    _check_boxes(box)
    return bilinear_sample(grid, quarter_points(box)).mean(dim=-2)


def extract_actor_tokens(grids: torch.Tensor, boxes: torch.Tensor) -> torch.Tensor:
    """Grids ``(T, H_f, W_f, D)`` and boxes ``(M, T, 4)`` -> actor tokens ``(M, T, D)``."""
    boxes = torch.as_tensor(boxes, dtype=DTYPE)
    if boxes.dim() != 3 or boxes.shape[-1] != 4:
        raise ValueError(f"boxes must be (M, T, 4), got {tuple(boxes.shape)}")
    if boxes.shape[1] != grids.shape[0]:
        raise ValueError(f"boxes cover {boxes.shape[1]} frames but {grids.shape[0]} grids were given")
    if bool(torch.isnan(boxes).any()):
        raise ValueError("missing box for a sampled frame")
    _check_boxes(boxes)
    pts = quarter_points(boxes)  # M, T, 4, 2
    cols = [bilinear_sample(grids[t], pts[:, t]).mean(dim=-2) for t in range(grids.shape[0])]
    return torch.stack(cols, dim=1)


# ---------------------------------------------------------------------------
# externally computed features


def feature_path(root, clip_id: str, frame: int) -> Path:
    return Path(root) / clip_id / f"{frame:04d}.tensor"


def load_feature_grids(root, clip_id: str, frames) -> torch.Tensor:
    """Per-frame ``(H_f, W_f, D)`` grids from a feature directory, stacked to ``(T, H_f, W_f, D)``."""
    grids = []
    for f in frames:
        path = feature_path(root, clip_id, int(f))
        if not path.exists():
            raise FileNotFoundError(f"missing feature grid {path}")
        arr = load_tensor(path)
        if arr.ndim != 3:
            raise ValueError(f"{path}: expected (H_f, W_f, D), got shape {arr.shape}")
        grids.append(arr)
    return torch.from_numpy(np.stack(grids)).to(DTYPE)
