"""Multi-task set-prediction objective and the exact assignment solver behind it."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .tensor_core import NumericError, cross_entropy, log_softmax, softmax


@dataclass
class LossConfig:
    lambda_m: float = 5.0
    lambda_c: float = 2.0
    tau: float = 0.2
    aux_layers: bool = True

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.lambda_m < 0 or self.lambda_c < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------------------
# Hungarian assignment


def _lap_rows(cost: list[list[float]], n: int, m: int) -> list[int]:
    """Min-cost assignment of every row (n <= m) to a distinct column.

    Shortest-augmenting-path Hungarian method with potentials. Costs are
    pairs ``(c_ij, key_ij)`` compared lexicographically, where
    ``key_ij = j * m**(n-1-i)``: the secondary sum is then the column
    vector read as a base-m number, so among equal-cost optima the
    lexicographically smallest column vector wins.
    """
    inf = (math.inf, 0)
    keys = [[j * m ** (n - 1 - i) for j in range(m)] for i in range(n)]
    u = [(0.0, 0)] * (n + 1)
    v = [(0.0, 0)] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = inf, -1
            row, krow = cost[i0 - 1], keys[i0 - 1]
            ui = u[i0]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                vj = v[j]
                cur = (row[j - 1] - ui[0] - vj[0], krow[j - 1] - ui[1] - vj[1])
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta, j1 = minv[j], j
            for j in range(m + 1):
                if used[j]:
                    pi = p[j]
                    u[pi] = (u[pi][0] + delta[0], u[pi][1] + delta[1])
                    v[j] = (v[j][0] - delta[0], v[j][1] - delta[1])
                else:
                    minv[j] = (minv[j][0] - delta[0], minv[j][1] - delta[1])
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost injective assignment of ``min(n, m)`` pairs, sorted by row.

    Ties resolve to the lexicographically smallest assignment: the column
    sequence by row when ``n <= m``, the row sequence by column otherwise.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.size == 0:
        raise ValueError("hungarian needs a non-empty 2-D cost matrix")
    if not np.isfinite(c).all():
        raise ValueError("hungarian needs finite costs")
    n, m = c.shape
    if n <= m:
        cols = _lap_rows(c.tolist(), n, m)
        return [(i, j) for i, j in enumerate(cols)]
    rows = _lap_rows(c.T.tolist(), m, n)
    return sorted((i, j) for j, i in enumerate(rows))


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=np.float64)
    total = 0.0
    for i, j in pairs:
        total += float(c[i, j])
    return total


# ---------------------------------------------------------------------------
# matching ground-truth groups to group tokens


@dataclass
class GroupMatching:
    gt_to_token: list[int]
    num_tokens: int
    cost: np.ndarray = field(repr=False, default=None)

    @property
    def token_to_gt(self) -> dict[int, int]:
        return {k: g for g, k in enumerate(self.gt_to_token)}


def match_groups(group_probs, membership_probs, gt_groups: Sequence[Sequence[int]], gt_activities: Sequence[int]):
    """Pair GT groups with tokens by ``-p_k(class_g) - mean_{i in g} sigma_i[k]``."""
    probs = _np(group_probs)
    sigma = _np(membership_probs)
    k_tokens = probs.shape[0]
    n = len(gt_groups)
    if n > k_tokens:
        raise ValueError(f"{n} ground-truth groups but only {k_tokens} group tokens")
    if n == 0:
        return GroupMatching([], k_tokens, np.zeros((0, k_tokens)))
    cost = np.empty((n, k_tokens))
    for g, (members, act) in enumerate(zip(gt_groups, gt_activities)):
        mem = sigma[list(members), :k_tokens].mean(axis=0)
        cost[g] = -probs[:, act] - mem
    pairs = hungarian(cost)
    return GroupMatching([k for _, k in pairs], k_tokens, cost)


def _np(x):
    return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# loss terms


def l_group(group_logits: torch.Tensor, matching: GroupMatching, gt_activities: Sequence[int]) -> torch.Tensor:
    """Mean CE over tokens: matched tokens against their GT class, the rest against background."""
    k_tokens, n_cls = group_logits.shape
    target = [n_cls - 1] * k_tokens
    for g, k in enumerate(matching.gt_to_token):
        target[k] = int(gt_activities[g])
    return cross_entropy(group_logits, torch.tensor(target)).mean()


def l_ind(action_logits: torch.Tensor, gt_actions: Sequence[int]) -> torch.Tensor:
    return cross_entropy(action_logits, torch.tensor(list(gt_actions))).mean()


def membership_targets(num_actors: int, matching: GroupMatching, gt_groups, singletons, outlier_column: bool = True):
    target = [None] * num_actors
    for g, members in enumerate(gt_groups):
        for i in members:
            target[i] = matching.gt_to_token[g]
    for i in singletons:
        target[i] = matching.num_tokens if outlier_column else -1
    missing = [i for i, t in enumerate(target) if t is None]
    if missing:
        raise ValueError(f"actors {missing} are in no group and not flagged singleton")
    return target


def l_mem(affinity: torch.Tensor, matching: GroupMatching, gt_groups, singletons) -> torch.Tensor:
    """Mean CE of each actor's membership distribution against its target column.

    With an outlier column, singletons target it; without one they are skipped.
    """
    outlier_column = affinity.shape[1] == matching.num_tokens + 1
    target = membership_targets(affinity.shape[0], matching, gt_groups, singletons, outlier_column)
    keep = [i for i, t in enumerate(target) if t >= 0]
    if not keep:
        return affinity.sum() * 0.0
    rows = affinity[keep]
    return cross_entropy(rows, torch.tensor([target[i] for i in keep])).mean()


def l_con(embeddings: torch.Tensor, labels: Sequence[int], tau: float) -> torch.Tensor:
    """Supervised contrastive loss over cosine similarities.

    ``labels[i]`` is actor i's group id, or negative for a singleton.
    Singletons are never anchors or positives but stay in the denominators.
    """
    m = embeddings.shape[0]
    if m < 2:
        raise ValueError("contrastive loss needs at least two actors")
    if tau <= 0:
        raise ValueError("tau must be positive")
    lab = torch.tensor(list(labels))
    unit = embeddings / embeddings.norm(dim=-1, keepdim=True)
    logits = unit @ unit.T / tau
    eye = torch.eye(m, dtype=torch.bool)
    logits = logits.masked_fill(eye, -1e30)
    logp = log_softmax(logits, dim=-1)
    pos = (lab[:, None] == lab[None, :]) & (lab[:, None] >= 0) & ~eye
    n_pos = pos.sum(dim=1)
    anchors = n_pos > 0
    if not bool(anchors.any()):
        return embeddings.sum() * 0.0
    per_anchor = -(logp * pos).sum(dim=1)[anchors] / n_pos[anchors]
    return per_anchor.mean()


TERMS = ("ind", "group", "mem", "con")


def total_loss(parts: dict, cfg: LossConfig) -> torch.Tensor:
    """``ind + sum(group) + lambda_m * sum(mem) + lambda_c * con``.

    ``group`` and ``mem`` are per-layer lists; without ``aux_layers`` only
    the last layer counts.
    """
    for name in TERMS:
        vals = parts[name] if isinstance(parts[name], (list, tuple)) else [parts[name]]
        for v in vals:
            val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
            if not math.isfinite(val):
                raise NumericError(f"loss term {name!r} is not finite")
    group = list(parts["group"])
    mem = list(parts["mem"])
    if not cfg.aux_layers:
        group, mem = group[-1:], mem[-1:]
    return parts["ind"] + sum(group) + cfg.lambda_m * sum(mem) + cfg.lambda_c * parts["con"]


# ---------------------------------------------------------------------------
# per-clip composite


def clip_loss_parts(layer_outputs: list[dict], final: dict, clip_targets: dict, cfg: LossConfig):
    """Loss parts for one clip.

    ``layer_outputs`` holds ``group_logits`` and ``affinity`` per decoder
    layer; ``final`` holds ``action_logits`` and ``actor_embed``. Matching
    is recomputed per layer from detached probabilities.
    """
    groups = clip_targets["groups"]
    acts = clip_targets["activities"]
    singles = clip_targets["singletons"]
    group_terms, mem_terms, matchings = [], [], []
    for out in layer_outputs:
        with torch.no_grad():
            probs = softmax(out["group_logits"], dim=-1)
            sigma = softmax(out["affinity"], dim=-1)
        matching = match_groups(probs, sigma, groups, acts)
        matchings.append(matching)
        group_terms.append(l_group(out["group_logits"], matching, acts))
        mem_terms.append(l_mem(out["affinity"], matching, groups, singles))
    labels = [-1] * final["action_logits"].shape[0]
    for g, members in enumerate(groups):
        for i in members:
            labels[i] = g
    con = l_con(final["actor_embed"], labels, cfg.tau) if len(labels) >= 2 else final["actor_embed"].sum() * 0.0
    parts = {
        "ind": l_ind(final["action_logits"], clip_targets["actions"]),
        "group": group_terms,
        "mem": mem_terms,
        "con": con,
    }
    return parts, matchings


def scalar_parts(parts: dict, cfg: LossConfig) -> dict[str, float]:
    """Flatten loss parts to floats for logging (layer sums honour ``aux_layers``)."""
    group = parts["group"] if cfg.aux_layers else parts["group"][-1:]
    mem = parts["mem"] if cfg.aux_layers else parts["mem"][-1:]
    f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)  # noqa: E731
    return {
        "ind": f(parts["ind"]),
        "group": sum(f(g) for g in group),
        "mem": sum(f(x) for x in mem),
        "con": f(parts["con"]),
    }
