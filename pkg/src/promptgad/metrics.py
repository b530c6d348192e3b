"""Group-detection evaluation: Group IoU, Group mAP, outlier mIoU and the accuracies."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .heads import OUTLIER, GroupPrediction
from .losses import hungarian


@dataclass
class EvalRecord:
    clip_id: str
    predictions: list[GroupPrediction]
    pred_actions: list[int]
    pred_assignment: list[int]  # index into predictions, or OUTLIER
    gt_groups: list[list[int]]
    gt_activities: list[int]
    gt_actions: list[int]
    gt_singletons: list[int] = field(default_factory=list)

    @property
    def pred_outliers(self) -> set[int]:
        return {i for i, a in enumerate(self.pred_assignment) if a == OUTLIER}


def group_iou(pred_members, gt_members) -> float:
    return float(_iou_frac(pred_members, gt_members))


def _iou_frac(a, b) -> Fraction:
    a, b = set(a), set(b)
    union = len(a | b)
    if union == 0:
        return Fraction(1)
    return Fraction(len(a & b), union)


def _check_threshold(threshold: float) -> Fraction:
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    return Fraction(threshold)


def average_precision(tp: Sequence[bool], npos: int) -> float:
    """All-point interpolated AP: area under the monotone precision envelope."""
    if npos == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    rec = ctp / npos
    prec = ctp / np.arange(1, tp.size + 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _ranked(records, cls):
    preds = []
    for rec in records:
        for p in rec.predictions:
            if p.activity == cls:
                preds.append((-p.confidence, rec.clip_id, tuple(sorted(p.members))))
    preds.sort()
    return preds


def per_class_ap(records: Sequence[EvalRecord], threshold: float, num_classes: int) -> dict[int, float]:
    """AP per activity class that has at least one ground-truth group."""
    thr = _check_threshold(threshold)
    out = {}
    for cls in range(num_classes):
        gts = {
            rec.clip_id: [set(g) for g, a in zip(rec.gt_groups, rec.gt_activities) if a == cls]
            for rec in records
        }
        npos = sum(len(v) for v in gts.values())
        if npos == 0:
            continue
        taken = {cid: set() for cid in gts}
        tp = []
        for _neg_conf, cid, members in _ranked(records, cls):
            best, best_j = None, -1
            for j, g in enumerate(gts.get(cid, [])):
                if j in taken[cid]:
                    continue
                iou = _iou_frac(members, g)
                if iou >= thr and (best is None or iou > best):
                    best, best_j = iou, j
            if best_j >= 0:
                taken[cid].add(best_j)
            tp.append(best_j >= 0)
        out[cls] = average_precision(tp, npos)
    return out


def group_map(records: Sequence[EvalRecord], threshold: float, num_classes: int) -> float:
    """Mean AP over classes with ground truth.

    With no ground-truth groups anywhere the score is 1.0 when nothing was
    predicted either and 0.0 otherwise.
    """
    aps = per_class_ap(records, threshold, num_classes)
    if not aps:
        return 0.0 if any(rec.predictions for rec in records) else 1.0
    return float(np.mean(list(aps.values())))


def outlier_miou(records: Sequence[EvalRecord]) -> float:
    if not records:
        return 0.0
    return float(np.mean([group_iou(rec.pred_outliers, rec.gt_singletons) for rec in records]))


def individual_accuracy(records: Sequence[EvalRecord]) -> float:
    hits = total = 0
    for rec in records:
        hits += sum(int(p == g) for p, g in zip(rec.pred_actions, rec.gt_actions))
        total += len(rec.gt_actions)
    return hits / total if total else 1.0


def match_by_iou(rec: EvalRecord) -> dict[int, int]:
    """GT group -> prediction index maximizing total Group IoU (exact, lexicographic ties)."""
    if not rec.gt_groups or not rec.predictions:
        return {}
    ious = [[_iou_frac(p.members, g) for p in rec.predictions] for g in rec.gt_groups]
    # scale to integers so ties are detected exactly
    lcm = math.lcm(*(x.denominator for row in ious for x in row))
    cost = [[-float(x.numerator * (lcm // x.denominator)) for x in row] for row in ious]
    return dict(hungarian(cost))


def social_accuracy(records: Sequence[EvalRecord]) -> float:
    """Share of GT groups whose IoU-matched prediction overlaps >= 0.5 with the right activity."""
    hits = total = 0
    for rec in records:
        match = match_by_iou(rec)
        for g, members in enumerate(rec.gt_groups):
            total += 1
            k = match.get(g)
            if k is None:
                continue
            p = rec.predictions[k]
            if _iou_frac(p.members, members) >= Fraction(1, 2) and p.activity == rec.gt_activities[g]:
                hits += 1
    return hits / total if total else 1.0


def membership_accuracy(records: Sequence[EvalRecord]) -> float:
    """Share of actors (singletons included) assigned to their GT group's matched prediction."""
    hits = total = 0
    for rec in records:
        match = match_by_iou(rec)
        for g, members in enumerate(rec.gt_groups):
            k = match.get(g)
            for i in members:
                total += 1
                hits += int(k is not None and rec.pred_assignment[i] == k)
        for i in rec.gt_singletons:
            total += 1
            hits += int(rec.pred_assignment[i] == OUTLIER)
    return hits / total if total else 1.0


def evaluate(records: Sequence[EvalRecord], thresholds=(0.5, 1.0), num_classes: int = 6) -> dict:
    """Every metric in one dict; per-class AP keyed by threshold."""
    report = {}
    for thr in thresholds:
        report[f"group_map@{thr:g}"] = group_map(records, thr, num_classes)
    report["outlier_miou"] = outlier_miou(records)
    report["individual_accuracy"] = individual_accuracy(records)
    report["social_accuracy"] = social_accuracy(records)
    report["membership_accuracy"] = membership_accuracy(records)
    report["per_class_ap"] = {f"{thr:g}": per_class_ap(records, thr, num_classes) for thr in thresholds}
    return report
