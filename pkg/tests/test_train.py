import dataclasses
import json

import pytest
import torch

from promptgad.config import ConfigError, RunConfig
from promptgad.model import build_model
from promptgad.train import CheckpointMismatch, load_checkpoint, read_manifest, save_checkpoint, train


def _snapshot(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def test_frozen_contract(small_cfg, small_data):
    before = _snapshot(build_model(small_cfg))
    model = train(small_cfg, data=small_data)["model"]
    groups = model.parameter_groups()
    for name, p in groups["backbone"]:
        assert not p.requires_grad
        assert torch.equal(p.detach(), before[name]), name
    for key in ("prompts", "group_tokens", "decoder", "heads"):
        assert groups[key]
        for name, p in groups[key]:
            assert p.requires_grad
            assert not torch.equal(p.detach(), before[name]), name


def test_full_finetune_updates_backbone(small_cfg, small_data):
    cfg = dataclasses.replace(small_cfg, frozen=False, epochs=1)
    before = _snapshot(build_model(cfg))
    model = train(cfg, data=small_data)["model"]
    changed = [n for n, p in model.parameter_groups()["backbone"] if not torch.equal(p.detach(), before[n])]
    assert changed


def test_trainable_count_matches_manifest(small_cfg, small_data):
    result = train(small_cfg, data=small_data)
    counts = result["model"].parameter_counts()
    manifest = read_manifest(result["checkpoint"])
    assert counts["trainable"] == manifest["trainable_count"]
    assert counts["trainable"] == counts["prompts"] + counts["group_tokens"] + counts["decoder"] + counts["heads"]
    assert all(e["trainable"] == (not e["name"].startswith("backbone.") or "prompts" in e["name"])
               for e in manifest["parameters"])


def test_default_model_trains_fewer_than_backbone():
    counts = build_model(RunConfig()).parameter_counts()
    assert counts["trainable"] == counts["prompts"] + counts["group_tokens"] + counts["decoder"] + counts["heads"]
    assert counts["trainable"] < counts["backbone"]


def test_loss_decreases_on_overfit_fixture(small_cfg, small_data):
    history = train(dataclasses.replace(small_cfg, epochs=5), data=small_data)["history"]
    totals = [h["total"] for h in history]
    assert all(b < a for a, b in zip(totals, totals[1:])), totals


def test_log_lines(small_cfg, small_data, tmp_path):
    train(small_cfg, data=small_data)
    lines = [json.loads(x) for x in (tmp_path / "run" / "train_log.jsonl").read_text().splitlines()]
    assert [e["epoch"] for e in lines] == [1, 2, 3]
    assert {"ind", "group", "mem", "con", "total"} <= set(lines[0])
    assert (tmp_path / "run" / "config.txt").exists()


def test_runs_are_deterministic(small_cfg, small_data, tmp_path):
    a = train(small_cfg, data=small_data)["history"]
    b = train(dataclasses.replace(small_cfg, out_dir=str(tmp_path / "again")), data=small_data)["history"]
    strip = lambda h: [{k: v for k, v in e.items() if k != "seconds"} for e in h]  # noqa: E731
    assert strip(a) == strip(b)


def test_resume_reproduces_next_epoch(small_cfg, small_data, tmp_path):
    full = train(small_cfg, data=small_data)["history"]
    first = dataclasses.replace(small_cfg, epochs=2, out_dir=str(tmp_path / "part"))
    ckpt = train(first, data=small_data)["checkpoint"]
    rest = train(dataclasses.replace(small_cfg, out_dir=str(tmp_path / "part")), resume=ckpt, data=small_data)
    assert [h["epoch"] for h in rest["history"]] == [3]
    assert abs(rest["history"][0]["total"] - full[2]["total"]) <= 1e-9


def test_checkpoint_roundtrip(small_cfg, tmp_path):
    model = build_model(small_cfg)
    save_checkpoint(tmp_path / "ck", model, small_cfg, 4)
    back, cfg, epoch, _ = load_checkpoint(tmp_path / "ck")
    assert cfg == small_cfg and epoch == 4
    for (n, p), (_, q) in zip(model.named_parameters(), back.named_parameters()):
        assert torch.equal(p, q), n
        assert p.requires_grad == q.requires_grad


def test_checkpoint_mismatch(small_cfg, tmp_path):
    save_checkpoint(tmp_path / "ck", build_model(small_cfg), small_cfg, 0)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "ck", dataclasses.replace(small_cfg, model_dim=8))
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(tmp_path / "ck", dataclasses.replace(small_cfg, prompt_mode="none"))
    assert issubclass(CheckpointMismatch, ConfigError)


def test_missing_dataset(small_cfg):
    with pytest.raises(FileNotFoundError):
        train(small_cfg)
