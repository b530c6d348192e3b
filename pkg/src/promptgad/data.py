"""Clip annotations, frame sampling and the synthetic multi-group scene generator.

Annotation files are JSON lines, one clip per line::

    {"schema_version": 1, "clip_id": "clip_0003", "frame_count": 10,
     "boxes": [[[x0, y0, x1, y1], ...per track], ...per frame],
     "actions": [2, 0, ...per track],
     "groups": [{"members": [0, 3], "activity": 4}, ...],
     "singletons": [5]}

Boxes are normalized to [0, 1]. Track ids are row indices into ``actions``
and into each frame's box list. Every track belongs to exactly one group or
to ``singletons``. Frames live next to the annotation file as
``frames/<clip_id>/<frame:04d>.ppm``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

SCHEMA_VERSION = 1
K_MAX = 7
ANNOTATION_FILE = "annotations.jsonl"


class DataError(Exception):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class MalformedRecordError(DataError):
    pass


class InvariantViolationError(DataError):
    pass


@dataclass
class ClipAnnotation:
    clip_id: str
    frame_count: int
    boxes: list  # [frame][track] -> [x0, y0, x1, y1]
    actions: list[int]
    groups: list[dict]  # {"members": [...], "activity": int}
    singletons: list[int]

    @property
    def num_actors(self) -> int:
        return len(self.actions)

    @property
    def group_members(self) -> list[list[int]]:
        return [list(g["members"]) for g in self.groups]

    @property
    def group_activities(self) -> list[int]:
        return [int(g["activity"]) for g in self.groups]

    def boxes_array(self, frames=None) -> np.ndarray:
        """``(M, T, 4)`` boxes for the requested frame indices (all frames by default)."""
        arr = np.asarray(self.boxes, dtype=np.float64)  # F, M, 4
        if frames is not None:
            arr = arr[list(frames)]
        return arr.transpose(1, 0, 2)

    def targets(self) -> dict:
        return {
            "groups": self.group_members,
            "activities": self.group_activities,
            "singletons": list(self.singletons),
            "actions": list(self.actions),
        }

    def to_record(self) -> dict:
        rec = {"schema_version": SCHEMA_VERSION}
        rec.update(asdict(self))
        return rec

    def validate(self, k_max: int = K_MAX) -> None:
        validate_clip(self, k_max)


def validate_clip(clip: ClipAnnotation, k_max: int = K_MAX) -> None:
    cid = clip.clip_id
    m = clip.num_actors
    if m == 0:
        raise InvariantViolationError(f"{cid}: actions: clip has no actors")
    if clip.frame_count < 1 or len(clip.boxes) != clip.frame_count:
        raise InvariantViolationError(
            f"{cid}: boxes: {len(clip.boxes)} frames listed but frame_count is {clip.frame_count}"
        )
    for f, frame_boxes in enumerate(clip.boxes):
        if len(frame_boxes) != m:
            raise InvariantViolationError(f"{cid}: boxes[{f}]: {len(frame_boxes)} boxes for {m} tracks")
        for i, b in enumerate(frame_boxes):
            x0, y0, x1, y1 = b
            if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
                raise InvariantViolationError(f"{cid}: boxes[{f}][{i}]: degenerate or out-of-range box {b}")
    if len(clip.groups) > k_max:
        raise InvariantViolationError(f"{cid}: groups: {len(clip.groups)} groups exceed the maximum {k_max}")
    owner: dict[int, str] = {}
    for g, grp in enumerate(clip.groups):
        members = grp["members"]
        if not members:
            raise InvariantViolationError(f"{cid}: groups[{g}].members: empty group")
        for t in members:
            if not 0 <= t < m:
                raise InvariantViolationError(f"{cid}: groups[{g}].members: unknown track id {t}")
            if t in owner:
                raise InvariantViolationError(
                    f"{cid}: groups[{g}].members: track {t} already belongs to {owner[t]}"
                )
            owner[t] = f"groups[{g}]"
    for t in clip.singletons:
        if not 0 <= t < m:
            raise InvariantViolationError(f"{cid}: singletons: unknown track id {t}")
        if t in owner:
            raise InvariantViolationError(f"{cid}: singletons: track {t} already belongs to {owner[t]}")
        owner[t] = "singletons"
    missing = sorted(set(range(m)) - set(owner))
    if missing:
        raise InvariantViolationError(f"{cid}: tracks {missing} are in no group and not singletons")


# ---------------------------------------------------------------------------
# (de)serialization

_FIELDS = {
    "clip_id": str,
    "frame_count": int,
    "boxes": list,
    "actions": list,
    "groups": list,
    "singletons": list,
}


def clip_from_record(rec: dict, where: str = "") -> ClipAnnotation:
    cid = rec.get("clip_id", "?") if isinstance(rec, dict) else "?"
    if not isinstance(rec, dict):
        raise MalformedRecordError(f"{where}: record is not an object")
    if rec.get("schema_version") != SCHEMA_VERSION:
        raise MalformedRecordError(f"{where} {cid}: schema_version: expected {SCHEMA_VERSION}")
    for name, typ in _FIELDS.items():
        if name not in rec:
            raise MalformedRecordError(f"{where} {cid}: {name}: missing field")
        if not isinstance(rec[name], typ) or isinstance(rec[name], bool):
            raise MalformedRecordError(f"{where} {cid}: {name}: expected {typ.__name__}")
    for g, grp in enumerate(rec["groups"]):
        if not isinstance(grp, dict) or "members" not in grp or "activity" not in grp:
            raise MalformedRecordError(f"{where} {cid}: groups[{g}]: needs members and activity")
    try:
        boxes = [[[float(v) for v in b] for b in fb] for fb in rec["boxes"]]
        if any(len(b) != 4 for fb in boxes for b in fb):
            raise ValueError("box needs 4 coordinates")
        clip = ClipAnnotation(
            clip_id=rec["clip_id"],
            frame_count=int(rec["frame_count"]),
            boxes=boxes,
            actions=[int(a) for a in rec["actions"]],
            groups=[{"members": [int(t) for t in g["members"]], "activity": int(g["activity"])} for g in rec["groups"]],
            singletons=[int(t) for t in rec["singletons"]],
        )
    except (TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{where} {cid}: {exc}") from None
    return clip


def save_annotations(clips, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.to_record(), separators=(",", ":")) + "\n")


def load_annotations(path, k_max: int = K_MAX) -> list[ClipAnnotation]:
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATION_FILE
    if not path.exists():
        raise MissingFileError(f"annotation file not found: {path}")
    clips = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecordError(f"{path}:{lineno}: not valid JSON ({exc.msg})") from None
            clip = clip_from_record(rec, f"{path}:{lineno}")
            validate_clip(clip, k_max)
            clips.append(clip)
    ids = [c.clip_id for c in clips]
    if len(set(ids)) != len(ids):
        raise InvariantViolationError(f"{path}: duplicate clip ids")
    return clips


def frame_path(root, clip_id: str, frame: int) -> Path:
    return Path(root) / "frames" / clip_id / f"{frame:04d}.ppm"


def save_frames(root, clip_id: str, frames: np.ndarray) -> None:
    d = Path(root) / "frames" / clip_id
    d.mkdir(parents=True, exist_ok=True)
    for f, img in enumerate(frames):
        Image.fromarray(img, mode="RGB").save(d / f"{f:04d}.ppm")


def load_frames(root, clip: ClipAnnotation) -> np.ndarray:
    """All frames of a clip as ``(F, H, W, 3)`` uint8."""
    out = []
    for f in range(clip.frame_count):
        p = frame_path(root, clip.clip_id, f)
        if not p.exists():
            raise MissingFileError(f"missing frame {p}")
        out.append(np.asarray(Image.open(p).convert("RGB")))
    return np.stack(out)


def save_dataset(root, clips, frames: dict) -> None:
    root = Path(root)
    save_annotations(clips, root / ANNOTATION_FILE)
    for clip in clips:
        save_frames(root, clip.clip_id, frames[clip.clip_id])


def load_dataset(root, k_max: int = K_MAX):
    clips = load_annotations(Path(root) / ANNOTATION_FILE, k_max)
    return clips, {c.clip_id: load_frames(root, c) for c in clips}


def split_of(clip_id: str) -> str:
    """Deterministic 80/20 train/val split from a hash of the clip id."""
    h = int(hashlib.md5(clip_id.encode()).hexdigest()[:8], 16)
    return "train" if h % 100 < 80 else "val"


# ---------------------------------------------------------------------------
# frame sampling


def segment_bounds(frame_count: int, t: int) -> list[tuple[int, int]]:
    base, rem = divmod(frame_count, t)
    bounds, start = [], 0
    for s in range(t):
        length = base + (1 if s < rem else 0)
        bounds.append((start, length))
        start += length
    return bounds


def segment_sample(frame_count: int, t: int, mode: str = "eval", seed=None) -> list[int]:
    """One frame per equal contiguous segment: the middle one (eval) or a random one (train)."""
    if t < 1:
        raise ValueError("T must be >= 1")
    if frame_count < t:
        raise ValueError(f"cannot sample {t} frames from {frame_count}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    bounds = segment_bounds(frame_count, t)
    if mode == "eval":
        return [start + length // 2 for start, length in bounds]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return [start + int(rng.integers(length)) for start, length in bounds]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticConfig:
    num_clips: int = 64
    actors_min: int = 3
    actors_max: int = 14
    groups_min: int = 1
    groups_max: int = 4
    singletons_min: int = 0
    singletons_max: int = 3
    num_activities: int = 6
    num_actions: int = 3
    frame_count: int = 10
    image_size: int = 32
    blob_size: float = 4.0
    drift: float = 0.25
    max_groups: int = K_MAX
    seed: int = 0
    max_retries: int = 500

    def __post_init__(self):
        problems = []
        if self.num_clips < 1:
            problems.append("num_clips must be >= 1")
        if not 1 <= self.actors_min <= self.actors_max:
            problems.append("need 1 <= actors_min <= actors_max")
        if not 1 <= self.groups_min <= self.groups_max <= self.max_groups:
            problems.append(f"need 1 <= groups_min <= groups_max <= {self.max_groups}")
        if not 0 <= self.singletons_min <= self.singletons_max:
            problems.append("need 0 <= singletons_min <= singletons_max")
        if 2 * self.groups_min + self.singletons_min > self.actors_max:
            problems.append("groups_min/singletons_min need more actors than actors_max allows")
        if self.num_activities < 1 or self.num_actions < 1:
            problems.append("need at least one activity and one action")
        if self.num_activities > len(ACTIVITY_HUES) - 1:
            problems.append(f"at most {len(ACTIVITY_HUES) - 1} activities can be rendered")
        if self.num_actions > len(ACTION_SATURATION):
            problems.append(f"at most {len(ACTION_SATURATION)} actions can be rendered")
        if self.frame_count < 1 or self.image_size < 8 or self.blob_size <= 0:
            problems.append("frame_count, image_size and blob_size must be positive")
        if problems:
            raise ValueError("; ".join(problems))


# Colour code: hue identifies the group activity (last hue is reserved for
# singletons), saturation identifies the individual action. Both survive
# the partial-coverage scaling that patch embedding and RoI sampling apply.
ACTIVITY_HUES = tuple(i / 7 for i in range(7))
ACTION_SATURATION = (1.0, 0.6, 0.3)


def blob_color(hue: float, saturation: float) -> np.ndarray:
    rgb = np.array([np.cos(2 * np.pi * (hue - c / 3)) for c in range(3)])
    rgb = (rgb - rgb.min()) / (rgb.max() - rgb.min())
    return (1 - saturation) * np.ones(3) + saturation * rgb


def actor_color(activity: int | None, action: int) -> np.ndarray:
    hue = ACTIVITY_HUES[-1] if activity is None else ACTIVITY_HUES[activity]
    return blob_color(hue, ACTION_SATURATION[action])


def _clip_counts(cfg: SyntheticConfig, rng):
    g = int(rng.integers(cfg.groups_min, cfg.groups_max + 1))
    s = int(rng.integers(cfg.singletons_min, cfg.singletons_max + 1))
    while 2 * g + s > cfg.actors_max and s > cfg.singletons_min:
        s -= 1
    while 2 * g + s > cfg.actors_max and g > cfg.groups_min:
        g -= 1
    m = int(rng.integers(max(cfg.actors_min, 2 * g + s), cfg.actors_max + 1))
    sizes = np.full(g, 2) + rng.multinomial(m - s - 2 * g, np.ones(g) / g)
    return g, s, [int(x) for x in sizes]


def _layout(cfg: SyntheticConfig, rng, sizes, n_single):
    """Initial top-left corners: grouped actors clustered, singletons isolated."""
    size, b = float(cfg.image_size), cfg.blob_size
    lo, hi = 0.5, size - b - 0.5
    gap = b + 0.5  # Chebyshev distance that keeps blobs from touching
    for _ in range(cfg.max_retries):
        centers: list[np.ndarray] = []
        for _g in sizes:
            for _try in range(50):
                c = rng.uniform(lo, hi, size=2)
                if all(np.abs(c - o).max() >= 2.2 * b for o in centers):
                    centers.append(c)
                    break
            else:
                break
        if len(centers) < len(sizes):
            continue
        pts: list[np.ndarray] = []
        owner: list[int] = []
        for g, n in enumerate(sizes):
            for _ in range(n):
                for attempt in range(80):
                    # the search radius grows slowly so large groups still fit
                    spread = b * (1.0 + attempt / 40)
                    p = np.clip(centers[g] + rng.uniform(-spread, spread, size=2), lo, hi)
                    near_own = min(np.abs(p - c).max() for c in centers) == np.abs(p - centers[g]).max()
                    if near_own and all(np.abs(p - q).max() >= gap for q in pts):
                        pts.append(p)
                        owner.append(g)
                        break
                else:
                    break
        if len(pts) < sum(sizes):
            continue
        for _ in range(n_single):
            for _try in range(200):
                p = rng.uniform(lo, hi, size=2)
                far_groups = all(np.abs(p - c).max() >= 2.0 * b for c in centers)
                far_actors = all(np.abs(p - q).max() >= 1.5 * b for q in pts)
                if far_groups and far_actors:
                    pts.append(p)
                    owner.append(-1)
                    break
            else:
                break
        if len(pts) == sum(sizes) + n_single:
            return np.array(pts), owner
    raise RuntimeError(
        f"could not place {sum(sizes)} grouped and {n_single} single actors after {cfg.max_retries} attempts"
    )


def _coverage(start: float, length: float, n: int) -> np.ndarray:
    px = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(px + 1, start + length) - np.maximum(px, start), 0.0, 1.0)


def render_frame(corners: np.ndarray, colors: np.ndarray, image_size: int, blob: float) -> np.ndarray:
    img = np.zeros((image_size, image_size, 3))
    for (x, y), col in zip(corners, colors):
        cover = np.outer(_coverage(y, blob, image_size), _coverage(x, blob, image_size))
        img = np.maximum(img, cover[..., None] * col)
    return np.round(img * 255).astype(np.uint8)


def generate_clip(cfg: SyntheticConfig, index: int):
    rng = np.random.default_rng([cfg.seed, index])
    g, s, sizes = _clip_counts(cfg, rng)
    start, owner = _layout(cfg, rng, sizes, s)
    m = len(owner)
    if g <= cfg.num_activities:
        activities = [int(a) for a in rng.permutation(cfg.num_activities)[:g]]
    else:
        activities = [int(a) for a in rng.integers(cfg.num_activities, size=g)]
    actions = [int(a) for a in rng.integers(cfg.num_actions, size=m)]
    colors = np.array([actor_color(None if o < 0 else activities[o], a) for o, a in zip(owner, actions)])
    velocity = rng.uniform(-cfg.drift, cfg.drift, size=(m, 2))
    lo, hi = 0.0, cfg.image_size - cfg.blob_size
    boxes, frames = [], []
    for f in range(cfg.frame_count):
        pos = np.clip(start + f * velocity, lo, hi)
        frames.append(render_frame(pos, colors, cfg.image_size, cfg.blob_size))
        norm = np.concatenate([pos, pos + cfg.blob_size], axis=1) / cfg.image_size
        boxes.append([[round(float(v), 6) for v in b] for b in norm])
    groups = [
        {"members": [i for i in range(m) if owner[i] == k], "activity": activities[k]} for k in range(g)
    ]
    clip = ClipAnnotation(
        clip_id=f"clip_{index:04d}",
        frame_count=cfg.frame_count,
        boxes=boxes,
        actions=actions,
        groups=groups,
        singletons=[i for i in range(m) if owner[i] < 0],
    )
    validate_clip(clip, cfg.max_groups)
    return clip, np.stack(frames)


def generate_synthetic(cfg: SyntheticConfig):
    """Deterministic in ``cfg``: returns ``(clips, {clip_id: (F, H, W, 3) uint8 frames})``."""
    clips, frames = [], {}
    for i in range(cfg.num_clips):
        clip, imgs = generate_clip(cfg, i)
        clips.append(clip)
        frames[clip.clip_id] = imgs
    return clips, frames


def group_color_probe(clips, frames: dict, num_activities: int) -> float:
    """Training accuracy of a softmax-regression probe from mean member colour to group activity.

    Each member's colour is the pixel under its box centre in the first frame.
    """
    import torch

    from .tensor_core import DTYPE, cross_entropy

    feats, labels = [], []
    for clip in clips:
        img = frames[clip.clip_id][0].astype(np.float64) / 255.0
        size = img.shape[0]
        for grp in clip.groups:
            cols = []
            for i in grp["members"]:
                x0, y0, x1, y1 = clip.boxes[0][i]
                cx, cy = int((x0 + x1) / 2 * size), int((y0 + y1) / 2 * size)
                cols.append(img[cy, cx])
            feats.append(np.mean(cols, axis=0))
            labels.append(grp["activity"])
    x = torch.tensor(np.array(feats), dtype=DTYPE)
    x = (x - x.mean(0)) / (x.std(0) + 1e-9)
    y = torch.tensor(labels)
    w = torch.zeros(x.shape[1], num_activities, dtype=DTYPE, requires_grad=True)
    b = torch.zeros(num_activities, dtype=DTYPE, requires_grad=True)
    opt = torch.optim.LBFGS([w, b], max_iter=500, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = cross_entropy(x @ w + b, y).mean()
        loss.backward()
        return loss

    opt.step(closure)
    with torch.no_grad():
        pred = (x @ w + b).argmax(1)
    return float((pred == y).double().mean())
