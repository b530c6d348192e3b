"""Slow, independent reference implementations used by the tests and ``selftest``.

Nothing here shares code with the paths it checks: assignments are found
by enumerating permutations, metrics by enumerating matchings with exact
rational arithmetic, attention and RoI pooling by straight-line loops.
"""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

OUTLIER = -1


# -- assignment --------------------------------------------------------------


def brute_force_assignment(cost):
    """Lexicographically first minimum over all injective maps from the smaller side."""
    c = np.asarray(cost, dtype=np.float64)
    n, m = c.shape
    transpose = n > m
    if transpose:
        c = c.T
        n, m = m, n
    best, best_map = None, None
    for perm in itertools.permutations(range(m), n):
        total = 0.0
        for i in range(n):
            total += c[i, perm[i]]
        if best is None or total < best:
            best, best_map = total, perm
    if transpose:
        return best, sorted((j, i) for i, j in enumerate(best_map))
    return best, list(enumerate(best_map))


# -- dense primitives ----------------------------------------------------------


def dense_attention(q, k, v, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Straight-line loops over heads, queries and keys."""
    q, k, v = (np.asarray(x, dtype=np.float64) for x in (q, k, v))
    d = q.shape[1]
    dh = d // heads
    qp = q @ wq.T + bq
    kp = k @ wk.T + bk
    vp = v @ wv.T + bv
    merged = np.zeros((q.shape[0], d))
    weights = np.zeros((heads, q.shape[0], k.shape[0]))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(q.shape[0]):
            logits = [sum(qp[i, sl][t] * kp[j, sl][t] for t in range(dh)) / math.sqrt(dh) for j in range(k.shape[0])]
            mx = max(logits)
            ex = [math.exp(x - mx) for x in logits]
            z = sum(ex)
            for j in range(k.shape[0]):
                weights[h, i, j] = ex[j] / z
                merged[i, sl] += weights[h, i, j] * vp[j, sl]
    return merged @ wo.T + bo, weights


def bilinear_point(grid, x, y):
    """Sample ``(H, W, D)`` grid at a normalized point with the cell-centre convention."""
    g = np.asarray(grid)
    h, w = g.shape[:2]
    gx = min(max(x * w - 0.5, 0.0), w - 1)
    gy = min(max(y * h - 0.5, 0.0), h - 1)
    x0, y0 = int(math.floor(gx)), int(math.floor(gy))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = gx - x0, gy - y0
    top = (1 - ax) * g[y0, x0] + ax * g[y0, x1]
    bot = (1 - ax) * g[y1, x0] + ax * g[y1, x1]
    return (1 - ay) * top + ay * bot


def roi_four_sample(grid, box):
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    pts = [(x0 + fx * w, y0 + fy * h) for fy in (0.25, 0.75) for fx in (0.25, 0.75)]
    return sum(bilinear_point(grid, x, y) for x, y in pts) / 4


def roi_dense(grid, box, n=100):
    """Average of an n x n midpoint lattice of bilinear samples inside the box."""
    x0, y0, x1, y1 = box
    acc = 0.0
    for a in range(n):
        for b in range(n):
            acc = acc + bilinear_point(grid, x0 + (b + 0.5) / n * (x1 - x0), y0 + (a + 0.5) / n * (y1 - y0))
    return acc / (n * n)


# -- metrics -----------------------------------------------------------------


def _iou(a, b) -> Fraction:
    a, b = set(a), set(b)
    if not a | b:
        return Fraction(1)
    return Fraction(len(a & b), len(a | b))


def _max_matching(edges_by_clip) -> int:
    """Largest matching, by enumerating injective maps clip by clip."""
    total = 0
    for preds, gts, ok in edges_by_clip:
        best = 0
        n, m = len(preds), len(gts)
        for size in range(min(n, m), 0, -1):
            found = False
            for rows in itertools.combinations(range(n), size):
                for cols in itertools.permutations(range(m), size):
                    if all(ok[r][c] for r, c in zip(rows, cols)):
                        found = True
                        break
                if found:
                    break
            if found:
                best = size
                break
        total += best
    return total


def brute_group_ap(records, threshold, cls):
    thr = Fraction(threshold)
    gts = {r.clip_id: [g for g, a in zip(r.gt_groups, r.gt_activities) if a == cls] for r in records}
    npos = sum(len(v) for v in gts.values())
    if npos == 0:
        return None
    ranked = sorted(
        (-p.confidence, r.clip_id, tuple(sorted(p.members))) for r in records for p in r.predictions if p.activity == cls
    )
    tp_counts = []
    for k in range(1, len(ranked) + 1):
        prefix = ranked[:k]
        by_clip = {}
        for _c, cid, mem in prefix:
            by_clip.setdefault(cid, []).append(mem)
        edges = []
        for cid, preds in by_clip.items():
            g = gts.get(cid, [])
            edges.append((preds, g, [[_iou(p, x) >= thr for x in g] for p in preds]))
        tp_counts.append(_max_matching(edges))
    if not ranked:
        return 0.0
    precision = [Fraction(tp, k + 1) for k, tp in enumerate(tp_counts)]
    ap = Fraction(0)
    prev = 0
    for k, tp in enumerate(tp_counts):
        if tp > prev:
            ap += Fraction(tp - prev, npos) * max(precision[k:])
            prev = tp
    return float(ap)


def brute_group_map(records, threshold, num_classes):
    aps = [brute_group_ap(records, threshold, c) for c in range(num_classes)]
    aps = [a for a in aps if a is not None]
    if not aps:
        return 0.0 if any(r.predictions for r in records) else 1.0
    return sum(aps) / len(aps)


def brute_outlier_miou(records):
    vals = []
    for r in records:
        pred = {i for i, a in enumerate(r.pred_assignment) if a == OUTLIER}
        vals.append(_iou(pred, r.gt_singletons))
    return float(sum(vals) / len(vals)) if vals else 0.0


def brute_iou_matching(rec):
    """First (lexicographic) injective map from the smaller side maximizing total IoU."""
    g, p = rec.gt_groups, rec.predictions
    if not g or not p:
        return {}
    n, m = len(g), len(p)
    best, best_pairs = None, None
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            tot = sum(_iou(p[perm[i]].members, g[i]) for i in range(n))
            if best is None or tot > best:
                best, best_pairs = tot, {i: perm[i] for i in range(n)}
    else:
        for perm in itertools.permutations(range(n), m):
            tot = sum(_iou(p[j].members, g[perm[j]]) for j in range(m))
            if best is None or tot > best:
                best, best_pairs = tot, {perm[j]: j for j in range(m)}
    return best_pairs


def brute_social_accuracy(records):
    hit = tot = 0
    for r in records:
        match = brute_iou_matching(r)
        for gi, members in enumerate(r.gt_groups):
            tot += 1
            if gi in match:
                pr = r.predictions[match[gi]]
                if _iou(pr.members, members) >= Fraction(1, 2) and pr.activity == r.gt_activities[gi]:
                    hit += 1
    return hit / tot if tot else 1.0


def brute_membership_accuracy(records):
    hit = tot = 0
    for r in records:
        match = brute_iou_matching(r)
        gt_of = {}
        for gi, members in enumerate(r.gt_groups):
            for i in members:
                gt_of[i] = gi
        for i in range(len(r.pred_assignment)):
            if i in gt_of:
                want = match.get(gt_of[i], "none")
            elif i in r.gt_singletons:
                want = OUTLIER
            else:
                continue
            tot += 1
            hit += int(r.pred_assignment[i] == want)
    return hit / tot if tot else 1.0


def brute_individual_accuracy(records):
    pairs = [(p, g) for r in records for p, g in zip(r.pred_actions, r.gt_actions)]
    return sum(p == g for p, g in pairs) / len(pairs) if pairs else 1.0
