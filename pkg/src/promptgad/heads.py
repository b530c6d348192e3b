"""Prediction heads and the decoding of affinities into group predictions."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .tensor_core import DTYPE, Linear, softmax

OUTLIER = -1
OUTLIER_MODES = ("token", "background")


@dataclass(frozen=True)
class GroupPrediction:
    members: tuple[int, ...]
    activity: int
    confidence: float
    token: int = -1

    def to_dict(self):
        return {"members": list(self.members), "activity": self.activity, "confidence": self.confidence}


def temporal_pool(tokens: torch.Tensor) -> torch.Tensor:
    """Mean over the frame axis: ``(X, T, D) -> (X, D)``."""
    return tokens.mean(dim=1)


class GroupActivityHead(nn.Module):
    """Linear classifier over ``C_g`` activities plus a trailing no-group class."""

    def __init__(self, dim: int, num_activities: int):
        super().__init__()
        if num_activities < 1:
            raise ValueError("need at least one activity class")
        self.num_activities = num_activities
        self.fc = Linear(dim, num_activities + 1)

    def forward(self, groups):
        return self.fc(groups)


class ActorActionHead(nn.Module):
    def __init__(self, dim: int, num_actions: int):
        super().__init__()
        self.fc = Linear(dim, num_actions)

    def forward(self, actors):
        return self.fc(actors)


class MembershipHead(nn.Module):
    """Shared embedding space for actors and group tokens.

    Actors use one projection; group tokens and the learnable outlier token
    use another. Affinities are scaled dot products, one column per group
    token plus (in ``token`` mode) a final outlier column.
    """

    def __init__(self, dim: int, embed_dim: int | None = None, outlier_mode: str = "token"):
        super().__init__()
        if outlier_mode not in OUTLIER_MODES:
            raise ValueError(f"outlier_mode must be one of {OUTLIER_MODES}")
        self.embed_dim = embed_dim or dim
        self.outlier_mode = outlier_mode
        self.proj_a = Linear(dim, self.embed_dim)
        self.proj_g = Linear(dim, self.embed_dim)
        # only token mode has an outlier column
        self.outlier_token = nn.Parameter(torch.randn(dim, dtype=DTYPE)) if outlier_mode == "token" else None

    def embed_actors(self, actors):
        return self.proj_a(actors)

    def forward(self, actors, groups):
        ea = self.proj_a(actors)
        if self.outlier_mode == "token":
            groups = torch.cat([groups, self.outlier_token[None]], dim=0)
        eg = self.proj_g(groups)
        return membership_affinity(ea, eg), ea


def membership_affinity(actor_embed: torch.Tensor, group_embed: torch.Tensor) -> torch.Tensor:
    """``<e_a_i, e_g_k> / sqrt(D_e)`` for every actor/column pair."""
    return actor_embed @ group_embed.T / math.sqrt(actor_embed.shape[-1])


class PredictionHeads(nn.Module):
    def __init__(self, dim: int, num_activities: int, num_actions: int, outlier_mode: str = "token"):
        super().__init__()
        self.group = GroupActivityHead(dim, num_activities)
        self.action = ActorActionHead(dim, num_actions)
        self.membership = MembershipHead(dim, outlier_mode=outlier_mode)

    def forward(self, actors_pooled, groups_pooled):
        affinity, embed = self.membership(actors_pooled, groups_pooled)
        return {
            "group_logits": self.group(groups_pooled),
            "action_logits": self.action(actors_pooled),
            "affinity": affinity,
            "actor_embed": embed,
        }


# ---------------------------------------------------------------------------
# decoding (numpy, no gradients)


def _np(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


def assign_actors(affinity, num_groups: int | None = None, background_tokens=()) -> list[int]:
    """Row argmax (lowest column wins ties); returns token index or ``OUTLIER`` per actor.

    Columns ``>= num_groups`` (the outlier column) and tokens listed in
    ``background_tokens`` both map to ``OUTLIER``.
    """
    aff = _np(affinity)
    if num_groups is None:
        num_groups = aff.shape[1] - 1
    bg = set(int(b) for b in background_tokens)
    out = []
    for row in aff:
        k = int(np.argmax(row))
        out.append(OUTLIER if k >= num_groups or k in bg else k)
    return out


def build_group_predictions(affinity, group_logits, outlier_mode: str = "token"):
    """Decode one clip. Returns ``(assignment, predictions)``.

    A token yields a prediction when its top class is not background and at
    least one actor picked it. Activity is the best non-background class and
    confidence is that class's softmax probability.
    """
    logits = torch.as_tensor(_np(group_logits))
    probs = softmax(logits, dim=-1).numpy()
    k_tokens, n_cls = probs.shape
    background = n_cls - 1
    bg_tokens = [k for k in range(k_tokens) if int(np.argmax(probs[k])) == background]
    aff = _np(affinity)
    if outlier_mode == "token":
        assignment = assign_actors(aff, k_tokens, bg_tokens)
    else:
        assignment = assign_actors(aff, aff.shape[1], bg_tokens)
    preds = []
    for k in range(k_tokens):
        if k in bg_tokens:
            continue
        members = tuple(i for i, a in enumerate(assignment) if a == k)
        if not members:
            continue
        activity = int(np.argmax(probs[k, :background]))
        preds.append(GroupPrediction(members, activity, float(probs[k, activity]), token=k))
    return assignment, preds
