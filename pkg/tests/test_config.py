import dataclasses

import pytest

from promptgad.config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_to_text,
    dump_config,
    load_config,
    parse_config_text,
)


def test_default_snapshot():
    cfg = RunConfig()
    snapshot = {
        "lambda_m": 5.0, "lambda_c": 2.0, "tau": 0.2, "num_groups": 7, "frames": 5, "epochs": 30,
        "batch_size": 32, "prompt_mode": "deep", "frozen": True, "outlier_mode": "token", "model_dim": 32,
        "image_size": 32, "patch_size": 4, "aux_layers": True,
    }
    assert {k: getattr(cfg, k) for k in snapshot} == snapshot
    loss = cfg.loss()
    assert (loss.lambda_m, loss.lambda_c, loss.tau) == (5.0, 2.0, 0.2)


def test_file_then_overrides(fixtures_dir):
    cfg = load_config(fixtures_dir / "run.cfg", {"epochs": "5", "frozen": "no"})
    assert (cfg.prompt_count, cfg.batch_size, cfg.lr) == (7, 8, 2e-3)
    assert cfg.epochs == 5 and cfg.frozen is False


@pytest.mark.parametrize("raw,want", [("yes", True), ("TRUE", True), ("1", True), ("off", False), ("No", False)])
def test_bool_coercion(raw, want):
    assert apply_overrides(RunConfig(), {"frozen": raw}).frozen is want


@pytest.mark.parametrize("values", [{"frozen": "maybe"}, {"epochs": "3.5"}, {"lr": "fast"}, {"nope": "1"}])
def test_bad_values(values):
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), values)


@pytest.mark.parametrize("values", [{"prompt_mode": "wide"}, {"model_dim": "30", "heads": "4"}, {"tau": "0"},
                                    {"image_size": "30"}, {"batch_size": "0"}, {"train_split": "test"}])
def test_validation(values):
    with pytest.raises(ConfigError):
        load_config(None, values)


def test_parse_errors():
    assert parse_config_text("# only a comment\n\n a = 1 # trailing\n") == {"a": "1"}
    with pytest.raises(ConfigError, match="cfg:2"):
        parse_config_text("a = 1\njunk\n", "cfg")
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")


def test_dump_roundtrip(tmp_path):
    cfg = dataclasses.replace(RunConfig(), prompt_mode="shallow", frozen=False, lr=3.5e-4, seed=9)
    path = dump_config(cfg, tmp_path / "out")
    assert path.read_text() == config_to_text(cfg)
    assert load_config(path) == cfg
