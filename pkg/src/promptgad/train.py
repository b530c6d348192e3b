"""Training loop, checkpoints and the per-epoch JSON-lines log."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, config_to_text, dump_config
from .data import DataError, load_annotations, load_dataset, segment_sample, split_of
from .losses import TERMS, clip_loss_parts, scalar_parts, total_loss
from .model import GroupActivityDetector, build_model, frames_to_tensor
from .tensor_core import DTYPE, NumericError
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


def select_split(clips, split: str):
    if split == "all":
        return list(clips)
    return [c for c in clips if split_of(c.clip_id) == split]


def make_optimizer(model: GroupActivityDetector, cfg: RunConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)


def clip_batch_outputs(model: GroupActivityDetector, clips, pixels: dict, frame_idx: list):
    """Forward a batch of clips; the backbone sees all their frames in one call."""
    if model.backbone is None:
        grids = [model.grids_for(c.clip_id, fi) for c, fi in zip(clips, frame_idx)]
    else:
        stacked = torch.cat([frames_to_tensor(pixels[c.clip_id][fi]) for c, fi in zip(clips, frame_idx)])
        all_grids = model.grids_from_frames(stacked)
        grids = list(all_grids.split([len(fi) for fi in frame_idx]))
    return [model.forward_grids(g, c.boxes_array(fi)) for c, g, fi in zip(clips, grids, frame_idx)]


def batch_loss(model, clips, pixels, frame_idx, cfg: RunConfig):
    loss_cfg = cfg.loss()
    outputs = clip_batch_outputs(model, clips, pixels, frame_idx)
    totals, logs = [], []
    for clip, out in zip(clips, outputs):
        parts, _ = clip_loss_parts(out.layers, out.final, clip.targets(), loss_cfg)
        totals.append(total_loss(parts, loss_cfg))
        logs.append(scalar_parts(parts, loss_cfg))
    loss = torch.stack(totals).mean()
    if not torch.isfinite(loss):
        raise NumericError("total loss is not finite")
    return loss, logs


def epoch_rng(cfg: RunConfig, epoch: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, epoch])


def run_epoch(model, optimizer, clips, pixels, cfg: RunConfig, epoch: int) -> dict:
    rng = epoch_rng(cfg, epoch)
    order = rng.permutation(len(clips))
    sums = {k: 0.0 for k in TERMS}
    sums["total"] = 0.0
    model.train()
    for start in range(0, len(order), cfg.batch_size):
        batch = [clips[i] for i in order[start:start + cfg.batch_size]]
        frame_idx = [segment_sample(c.frame_count, cfg.frames, "train", rng) for c in batch]
        optimizer.zero_grad(set_to_none=True)
        loss, logs = batch_loss(model, batch, pixels, frame_idx, cfg)
        loss.backward()
        optimizer.step()
        loss_cfg = cfg.loss()
        for entry in logs:
            for k in TERMS:
                sums[k] += entry[k]
            sums["total"] += (
                entry["ind"] + entry["group"] + loss_cfg.lambda_m * entry["mem"] + loss_cfg.lambda_c * entry["con"]
            )
    return {k: v / len(clips) for k, v in sums.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(directory, model: GroupActivityDetector, cfg: RunConfig, epoch: int, optimizer=None) -> Path:
    d = Path(directory)
    (d / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters():
        fname = f"params/{name}.tensor"
        save_tensor(d / fname, p.detach())
        entries.append({"name": name, "shape": list(p.shape), "trainable": bool(p.requires_grad), "file": fname})
    optim_entries = []
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        (d / "optim").mkdir(exist_ok=True)
        for p, st in optimizer.state.items():
            name = names[id(p)]
            rec = {"name": name, "step": float(st["step"])}
            for key in ("exp_avg", "exp_avg_sq"):
                fname = f"optim/{name}.{key}.tensor"
                save_tensor(d / fname, st[key])
                rec[key] = fname
            optim_entries.append(rec)
    manifest = {
        "epoch": epoch,
        "config": dataclasses.asdict(cfg),
        "parameters": entries,
        "optimizer": optim_entries,
        "trainable_count": sum(int(np.prod(e["shape"])) for e in entries if e["trainable"]),
        "total_count": sum(int(np.prod(e["shape"])) for e in entries),
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=1))
    (d / "config.txt").write_text(config_to_text(cfg))
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


class CheckpointMismatch(ConfigError):
    pass


def load_checkpoint(directory, cfg: RunConfig | None = None, optimizer_for=None):
    """Rebuild the model from a checkpoint; returns ``(model, cfg, epoch, optimizer)``."""
    d = Path(directory)
    manifest = read_manifest(d)
    saved = RunConfig(**manifest["config"])
    if cfg is None:
        cfg = saved
    model = build_model(cfg)
    params = dict(model.named_parameters())
    names = {e["name"] for e in manifest["parameters"]}
    if names != set(params):
        missing = sorted(set(params) ^ names)[:5]
        raise CheckpointMismatch(f"checkpoint parameters do not match the model (e.g. {missing})")
    with torch.no_grad():
        for e in manifest["parameters"]:
            p = params[e["name"]]
            arr = load_tensor(d / e["file"])
            if list(arr.shape) != list(p.shape):
                raise CheckpointMismatch(f"{e['name']}: checkpoint shape {arr.shape} vs model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(DTYPE))
            p.requires_grad_(bool(e["trainable"]))
    optimizer = None
    if optimizer_for is not None:
        optimizer = make_optimizer(model, optimizer_for)
        for rec in manifest.get("optimizer", []):
            p = params[rec["name"]]
            optimizer.state[p] = {
                "step": torch.tensor(rec["step"]),
                "exp_avg": torch.from_numpy(load_tensor(d / rec["exp_avg"])).to(DTYPE),
                "exp_avg_sq": torch.from_numpy(load_tensor(d / rec["exp_avg_sq"])).to(DTYPE),
            }
    return model, cfg, manifest["epoch"], optimizer


# ---------------------------------------------------------------------------
# driver


def load_training_data(cfg: RunConfig):
    if cfg.features_dir:
        clips = load_annotations(Path(cfg.data_dir))
        pixels = {}
    else:
        clips, pixels = load_dataset(cfg.data_dir, k_max=cfg.num_groups)
    for c in clips:
        if c.frame_count < cfg.frames:
            raise DataError(f"{c.clip_id}: {c.frame_count} frames but T={cfg.frames}")
    return clips, pixels


def train(cfg: RunConfig, resume=None, data=None, on_epoch=None, checkpoint: bool = True) -> dict:
    """Train per ``cfg``; returns ``{"model", "history", "checkpoint"}``.

    Each epoch appends one JSON line to ``<out_dir>/train_log.jsonl``. The
    checkpoint in ``<out_dir>/checkpoint`` is rewritten after every epoch so
    a run can be resumed with ``resume=<that directory>``.
    """
    clips, pixels = data if data is not None else load_training_data(cfg)
    train_clips = select_split(clips, cfg.train_split)
    if not train_clips:
        raise ValueError(f"no clips in split {cfg.train_split!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out)
    if resume is not None:
        model, _, start, optimizer = load_checkpoint(resume, cfg, optimizer_for=cfg)
        start += 1
    else:
        model = build_model(cfg)
        optimizer = make_optimizer(model, cfg)
        start = 1
    log_path = out / "train_log.jsonl"
    history = []
    ckpt_dir = out / "checkpoint"
    with open(log_path, "a" if resume is not None else "w") as fh:
        for epoch in range(start, cfg.epochs + 1):
            t0 = time.perf_counter()
            stats = run_epoch(model, optimizer, train_clips, pixels, cfg, epoch)
            entry = {"epoch": epoch, **stats, "seconds": round(time.perf_counter() - t0, 3)}
            history.append(entry)
            fh.write(json.dumps(entry) + "\n")
            fh.flush()
            log.info("epoch %d total %.4f", epoch, stats["total"])
            if checkpoint:
                save_checkpoint(ckpt_dir, model, cfg, epoch, optimizer)
            if on_epoch is not None:
                on_epoch(epoch, model, entry)
    if checkpoint and not history and resume is None:
        save_checkpoint(ckpt_dir, model, cfg, 0, optimizer)
    return {"model": model, "history": history, "checkpoint": ckpt_dir}
