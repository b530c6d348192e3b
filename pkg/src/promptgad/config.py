"""Run configuration: a flat ``key = value`` text file.

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`RunConfig`; booleans accept true/false/yes/no/1/0. CLI flags are
applied on top of the file, and the effective configuration is written
back out with :func:`dump_config` into every output directory.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .backbone import PROMPT_MODES, BackboneConfig
from .heads import OUTLIER_MODES
from .losses import LossConfig
from .tensor_core import AttentionConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    data_dir: str = "data"
    out_dir: str = "runs/default"
    features_dir: str = ""
    # backbone
    image_size: int = 32
    patch_size: int = 4
    layers: int = 4
    model_dim: int = 32
    heads: int = 4
    ffn_mult: int = 4
    prompt_mode: str = "deep"
    prompt_count: int = 7
    frozen: bool = True
    # decoder / task
    num_groups: int = 7
    frames: int = 5
    num_activities: int = 6
    num_actions: int = 3
    outlier_mode: str = "token"
    group_init_std: float = 1.0
    # loss
    lambda_m: float = 5.0
    lambda_c: float = 2.0
    tau: float = 0.2
    aux_layers: bool = True
    # optimisation
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    train_split: str = "train"

    def validate(self) -> "RunConfig":
        problems = []
        if self.prompt_mode not in PROMPT_MODES:
            problems.append(f"prompt_mode must be one of {PROMPT_MODES}")
        if self.outlier_mode not in OUTLIER_MODES:
            problems.append(f"outlier_mode must be one of {OUTLIER_MODES}")
        if self.image_size % self.patch_size:
            problems.append("image_size must be divisible by patch_size")
        if self.model_dim % self.heads:
            problems.append("model_dim must be divisible by heads")
        for name in ("layers", "model_dim", "heads", "ffn_mult", "num_groups", "frames",
                     "num_activities", "num_actions", "batch_size"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if self.epochs < 0 or self.prompt_count < 0:
            problems.append("epochs and prompt_count must be >= 0")
        if self.tau <= 0 or self.lambda_m < 0 or self.lambda_c < 0:
            problems.append("tau must be positive and loss weights non-negative")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.train_split not in ("train", "val", "all"):
            problems.append("train_split must be train, val or all")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(
            image_size=self.image_size,
            patch_size=self.patch_size,
            layers=self.layers,
            model_dim=self.model_dim,
            heads=self.heads,
            ffn_hidden=self.ffn_mult * self.model_dim,
            prompt_mode=self.prompt_mode,
            prompt_count=self.prompt_count if self.prompt_mode != "none" else 0,
            frozen=self.frozen,
        )

    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.heads, self.ffn_mult * self.model_dim)

    def loss(self) -> LossConfig:
        return LossConfig(self.lambda_m, self.lambda_c, self.tau, self.aux_layers)


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _coerce(name: str, typ, raw):
    if not isinstance(raw, str):
        raw = str(raw)
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return raw


def apply_overrides(cfg, values: dict):
    """Return a copy of dataclass ``cfg`` with string ``values`` coerced onto its fields."""
    types = {f.name: f.type for f in dataclasses.fields(cfg)}
    updates = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, types[key], raw)
    try:
        return dataclasses.replace(cfg, **updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path=None, overrides: dict | None = None, base=None):
    """Defaults (``RunConfig`` unless ``base`` is given), then the file, then overrides."""
    cfg = RunConfig() if base is None else base
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        cfg = apply_overrides(cfg, parse_config_text(p.read_text(), str(p)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg.validate() if isinstance(cfg, RunConfig) else cfg


def config_to_text(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def dump_config(cfg, directory, name: str = "config.txt") -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    path = d / name
    path.write_text(config_to_text(cfg))
    return path
