"""Dumping decoder attention maps for inspection.

Layout under the output directory::

    grouping/head{h}_frame{t}.txt     K x M     (group token -> actor)
    contextual/head{h}_frame{t}.txt   (M+K) x N (actor/group token -> patch)
    heatmaps/token{k}_frame{t}.pgm    head-averaged patch attention of group token k
    overlays/frame{t}.png             the same maps drawn over the frame

Text matrices: one row per query token, whitespace-separated weights.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .data import segment_sample
from .model import GroupActivityDetector
from .train import clip_batch_outputs


class UnknownClipError(KeyError):
    pass


def group_heatmaps(contextual: np.ndarray, num_actors: int, grid: int) -> np.ndarray:
    """``(T, h, M+K, N)`` contextual weights -> ``(K, T, grid, grid)`` head-averaged maps."""
    t, _h, _q, _n = contextual.shape
    rows = contextual[:, :, num_actors:, :].mean(axis=1)  # T, K, N
    return rows.reshape(t, -1, grid, grid).transpose(1, 0, 2, 3)


def heatmap_image(heat: np.ndarray, image_size: int) -> np.ndarray:
    """Scale a ``(g, g)`` map to uint8 with its maximum at 255, upsampled by pixel repetition."""
    rep = image_size // heat.shape[0]
    peak = heat.max()
    scaled = np.zeros_like(heat) if peak <= 0 else heat / peak
    img = np.round(scaled * 255).astype(np.uint8)
    return np.kron(img, np.ones((rep, rep), dtype=np.uint8))


def dump_attention(model: GroupActivityDetector, clips, pixels, clip_id: str, out_dir, cfg, overlays: bool = True):
    by_id = {c.clip_id: c for c in clips}
    if clip_id not in by_id:
        raise UnknownClipError(clip_id)
    clip = by_id[clip_id]
    frame_idx = segment_sample(clip.frame_count, cfg.frames, "eval")
    model.eval()
    with torch.no_grad():
        (out,) = clip_batch_outputs(model, [clip], pixels, [frame_idx])
    grouping = out.attn_records["grouping"].numpy()  # T, h, K, M
    contextual = out.attn_records["contextual"].numpy()  # T, h, M+K, N
    out_dir = Path(out_dir)
    files = []
    for name, weights in (("grouping", grouping), ("contextual", contextual)):
        d = out_dir / name
        d.mkdir(parents=True, exist_ok=True)
        for t in range(weights.shape[0]):
            for h in range(weights.shape[1]):
                path = d / f"head{h}_frame{t}.txt"
                np.savetxt(path, weights[t, h], fmt="%.17g")
                files.append(path)
    grid = cfg.image_size // cfg.patch_size
    heat = group_heatmaps(contextual, clip.num_actors, grid)
    hdir = out_dir / "heatmaps"
    hdir.mkdir(parents=True, exist_ok=True)
    for k in range(heat.shape[0]):
        for t in range(heat.shape[1]):
            Image.fromarray(heatmap_image(heat[k, t], cfg.image_size), mode="L").save(hdir / f"token{k}_frame{t}.pgm")
    if overlays and pixels:
        from .plotting import plot_attention_overlay

        for t, f in enumerate(frame_idx):
            plot_attention_overlay(
                pixels[clip_id][f], heat[:, t], out_dir / "overlays" / f"frame{t}.png", f"{clip_id} frame {f}"
            )
    return {"files": files, "heatmaps": heat, "grouping": grouping, "contextual": contextual, "frames": frame_idx}
