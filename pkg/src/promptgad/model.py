"""The full detector: backbone -> actor tokens -> decoder -> heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import MiniViT, extract_actor_tokens, load_feature_grids
from .config import RunConfig
from .gct import GroupContextTransformer
from .heads import PredictionHeads, temporal_pool
from .tensor_core import DTYPE


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """``(T, H, W, 3)`` uint8 -> ``(T, 3, H, W)`` float64 in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(frames)).to(DTYPE).permute(0, 3, 1, 2) / 255.0


@dataclass
class ClipOutput:
    layers: list[dict]  # per decoder layer: group_logits, affinity
    final: dict  # action_logits, actor_embed, plus the last layer's entries
    attn_records: dict


class GroupActivityDetector(nn.Module):
    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = None if cfg.features_dir else MiniViT(cfg.backbone())
        self.gct = GroupContextTransformer(cfg.attention(), cfg.num_groups, cfg.frames, cfg.group_init_std)
        self.heads = PredictionHeads(cfg.model_dim, cfg.num_activities, cfg.num_actions, cfg.outlier_mode)

    # -- features ---------------------------------------------------------

    def grids_from_frames(self, frames: torch.Tensor) -> torch.Tensor:
        """``(B, 3, H, W)`` -> ``(B, H_f, W_f, D)``."""
        return self.backbone(frames)

    def grids_for(self, clip_id: str, frame_idx, pixels=None) -> torch.Tensor:
        if self.backbone is None:
            return load_feature_grids(self.cfg.features_dir, clip_id, frame_idx)
        return self.grids_from_frames(frames_to_tensor(pixels[list(frame_idx)]))

    # -- decoder + heads --------------------------------------------------

    def forward_grids(self, grids: torch.Tensor, boxes) -> ClipOutput:
        """Grids ``(T, H_f, W_f, D)`` and boxes ``(M, T, 4)`` for one clip."""
        actors = extract_actor_tokens(grids, torch.as_tensor(boxes, dtype=DTYPE))
        t = grids.shape[0]
        image = grids.reshape(t, -1, grids.shape[-1]).transpose(0, 1)  # N, T, D
        out = self.gct(actors, image)
        layer_inputs = [(actors, out.groups_grp), (out.actors_ctx, out.groups_ctx)]
        layers = []
        for a, g in layer_inputs:
            heads = self.heads(temporal_pool(a), temporal_pool(g))
            layers.append(heads)
        final = dict(layers[-1])
        return ClipOutput(
            layers=[{"group_logits": h["group_logits"], "affinity": h["affinity"]} for h in layers],
            final=final,
            attn_records=out.attn_records,
        )

    # -- bookkeeping ------------------------------------------------------

    def parameter_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        groups = {"backbone": [], "prompts": [], "group_tokens": [], "decoder": [], "heads": []}
        for name, p in self.named_parameters():
            if name.startswith("backbone.prompts."):
                groups["prompts"].append((name, p))
            elif name.startswith("backbone."):
                groups["backbone"].append((name, p))
            elif name == "gct.g_init":
                groups["group_tokens"].append((name, p))
            elif name.startswith("gct."):
                groups["decoder"].append((name, p))
            else:
                groups["heads"].append((name, p))
        return groups

    def parameter_counts(self) -> dict[str, int]:
        counts = {k: sum(p.numel() for _, p in v) for k, v in self.parameter_groups().items()}
        counts["trainable"] = sum(p.numel() for p in self.parameters() if p.requires_grad)
        counts["total"] = sum(p.numel() for p in self.parameters())
        return counts


def build_model(cfg: RunConfig) -> GroupActivityDetector:
    """Deterministic construction: parameters depend only on ``cfg`` (including its seed)."""
    state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    try:
        model = GroupActivityDetector(cfg)
    finally:
        torch.random.set_rng_state(state)
    return model
