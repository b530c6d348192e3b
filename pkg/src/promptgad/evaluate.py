"""Inference, prediction files and the metric report."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .data import segment_sample
from .heads import OUTLIER, GroupPrediction, build_group_predictions
from .metrics import EvalRecord, evaluate
from .train import clip_batch_outputs

REPORT_ORDER = ("outlier_miou", "individual_accuracy", "social_accuracy", "membership_accuracy")


def predict(model, clips, pixels, cfg, batch_size: int = 16) -> list[dict]:
    """One prediction record per clip, using the middle frame of each segment."""
    records = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(clips), batch_size):
            batch = clips[start:start + batch_size]
            frame_idx = [segment_sample(c.frame_count, cfg.frames, "eval") for c in batch]
            outs = clip_batch_outputs(model, batch, pixels, frame_idx)
            for clip, out in zip(batch, outs):
                records.append(decode_output(clip.clip_id, out.final, cfg.outlier_mode))
    return records


def decode_output(clip_id: str, final: dict, outlier_mode: str = "token") -> dict:
    token_assignment, preds = build_group_predictions(final["affinity"], final["group_logits"], outlier_mode)
    token_to_pred = {p.token: i for i, p in enumerate(preds)}
    assignment = [token_to_pred.get(a, OUTLIER) if a != OUTLIER else OUTLIER for a in token_assignment]
    actions = final["action_logits"].argmax(dim=-1).tolist()
    return {
        "clip_id": clip_id,
        "assignment": assignment,
        "actions": [int(a) for a in actions],
        "groups": [p.to_dict() for p in preds],
    }


def save_predictions(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_predictions(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def eval_records(predictions: list[dict], clips) -> list[EvalRecord]:
    by_id = {c.clip_id: c for c in clips}
    out = []
    for rec in predictions:
        clip = by_id[rec["clip_id"]]
        preds = [GroupPrediction(tuple(g["members"]), int(g["activity"]), float(g["confidence"])) for g in rec["groups"]]
        out.append(
            EvalRecord(
                clip_id=clip.clip_id,
                predictions=preds,
                pred_actions=list(rec["actions"]),
                pred_assignment=list(rec["assignment"]),
                gt_groups=clip.group_members,
                gt_activities=clip.group_activities,
                gt_actions=list(clip.actions),
                gt_singletons=list(clip.singletons),
            )
        )
    return out


def ground_truth_predictions(clips) -> list[dict]:
    """Prediction records that restate the annotations (confidence 1)."""
    out = []
    for clip in clips:
        assignment = [OUTLIER] * clip.num_actors
        for k, members in enumerate(clip.group_members):
            for i in members:
                assignment[i] = k
        out.append(
            {
                "clip_id": clip.clip_id,
                "assignment": assignment,
                "actions": list(clip.actions),
                "groups": [
                    {"members": m, "activity": a, "confidence": 1.0}
                    for m, a in zip(clip.group_members, clip.group_activities)
                ],
            }
        )
    return out


def metric_report(records, thresholds, num_classes: int, param_counts: dict | None = None) -> dict:
    return {"metrics": evaluate(records, thresholds, num_classes), "params": param_counts or {}}


def format_report(report: dict, thresholds) -> str:
    """Tab-separated lines: ``name<TAB>value`` with 4 decimals, then per-class AP and counts."""
    m = report["metrics"]
    lines = [f"{'metric'}\t{'value'}"]
    for thr in thresholds:
        key = f"group_map@{thr:g}"
        lines.append(f"{key}\t{m[key]:.4f}")
    for key in REPORT_ORDER:
        lines.append(f"{key}\t{m[key]:.4f}")
    for thr_key, per_class in m["per_class_ap"].items():
        for cls, ap in sorted(per_class.items()):
            lines.append(f"ap@{thr_key}/class_{cls}\t{ap:.4f}")
    for key, val in report.get("params", {}).items():
        lines.append(f"params/{key}\t{val}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.strip().splitlines()[1:]:
        name, value = line.split("\t")
        out[name] = float(value)
    return out


def class_frequencies(clips, num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=int)
    for c in clips:
        for a in c.group_activities:
            counts[a] += 1
    return counts
