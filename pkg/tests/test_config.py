from __future__ import annotations

import logging

import pytest

from cfiguard.config import load_config
from cfiguard.errors import ConfigError
from cfiguard.logging_utils import setup_logging

ENV_KEYS = (
    "CFIGUARD_SEED",
    "CFIGUARD_SPLIT_SEED",
    "CFIGUARD_MODEL_SEED",
    "CFIGUARD_RATIOS",
    "CFIGUARD_HIDDEN",
    "CFIGUARD_GMAX",
    "CFIGUARD_BASE",
    "CFIGUARD_FAIL_FAST",
    "CFIGUARD_KEEP_PROB",
    "CFIGUARD_EPOCHS",
    "CFIGUARD_RUNTIME_DIR",
    "LOG_LEVEL",
)


@pytest.fixture
def clean_env(monkeypatch, tmp_path):
    for key in ENV_KEYS:
        monkeypatch.delenv(key, raising=False)
    monkeypatch.setenv("CFIGUARD_RUNTIME_DIR", str(tmp_path / "runtime"))
    return monkeypatch


def test_defaults(clean_env, tmp_path):
    config = load_config(repo_root=tmp_path)

    assert config.seed == 0
    assert config.seeds() == {
        "seed": 0,
        "split_seed": 0,
        "dataset_seed": 0,
        "model_seed": 0,
        "sim_seed": 0,
        "attack_seed": 0,
    }
    assert config.g_max == 16
    assert config.ratios == (0.8, 0.1, 0.1)
    assert config.hidden == (1024, 512, 128, 32)
    assert config.keep_prob == 0.5
    assert config.learning_rate == 0.01
    assert config.base == 0x400000
    assert config.structural_alerts and not config.fail_fast
    assert config.runtime.runtime_dir == tmp_path / "runtime"
    assert config.runtime.reports_dir.is_dir()
    assert config.model_config().input_dim == 96


def test_environment_values(clean_env, tmp_path):
    clean_env.setenv("CFIGUARD_SEED", "7")
    clean_env.setenv("CFIGUARD_SPLIT_SEED", "0x10")
    clean_env.setenv("CFIGUARD_HIDDEN", "64, 32")
    clean_env.setenv("CFIGUARD_GMAX", "8")
    clean_env.setenv("CFIGUARD_FAIL_FAST", "yes")

    config = load_config(repo_root=tmp_path)

    assert config.seed == 7
    assert config.split_seed == 16
    assert config.model_seed == 7
    assert config.hidden == (64, 32)
    assert config.model_config().input_dim == 48
    assert config.fail_fast


def test_config_file_overrides_environment(clean_env, tmp_path):
    clean_env.setenv("CFIGUARD_EPOCHS", "30")
    path = tmp_path / "run.env"
    path.write_text('CFIGUARD_EPOCHS=4\nCFIGUARD_RATIOS="0.6,0.2,0.2"\n', encoding="utf-8")

    config = load_config(repo_root=tmp_path, config_path=path)

    assert config.epochs == 4
    assert config.ratios == (0.6, 0.2, 0.2)


def test_overrides_win(clean_env, tmp_path):
    clean_env.setenv("CFIGUARD_MODEL_SEED", "99")

    config = load_config(repo_root=tmp_path, overrides={"seed": 5, "g_max": 4, "epochs": None})

    assert config.seed == 5
    assert config.split_seed == 5
    # Explicitly configured stage seeds are not re-derived from the master seed.
    assert config.model_seed == 99
    assert config.g_max == 4
    assert config.epochs == 30


@pytest.mark.parametrize(
    ("key", "value"),
    [
        ("CFIGUARD_RATIOS", "0.8,0.1,0.2"),
        ("CFIGUARD_GMAX", "0"),
        ("CFIGUARD_KEEP_PROB", "0"),
        ("CFIGUARD_SEED", "seven"),
    ],
)
def test_invalid_values(clean_env, tmp_path, key, value):
    clean_env.setenv(key, value)
    with pytest.raises(ConfigError) as excinfo:
        load_config(repo_root=tmp_path)
    assert excinfo.value.exit_code == 1


def test_missing_config_file(clean_env, tmp_path):
    with pytest.raises(ConfigError):
        load_config(repo_root=tmp_path, config_path=tmp_path / "absent.env")


def test_unknown_override(clean_env, tmp_path):
    with pytest.raises(ConfigError):
        load_config(repo_root=tmp_path, overrides={"runtime": "elsewhere"})


def test_logging_goes_to_runtime_log(clean_env, tmp_path):
    clean_env.setenv("LOG_LEVEL", "debug")
    logger = logging.getLogger("cfiguard")
    saved = list(logger.handlers)
    for handler in saved:
        logger.removeHandler(handler)
    try:
        config = load_config(repo_root=tmp_path)
        logger = setup_logging(config)
        logger.info("hello from the test")
        for handler in logger.handlers:
            handler.flush()

        assert logger.level == logging.DEBUG
        assert len(logger.handlers) == 2
        assert "hello from the test" in config.runtime.log_path.read_text(encoding="utf-8")
    finally:
        for handler in list(logger.handlers):
            handler.close()
            logger.removeHandler(handler)
        for handler in saved:
            logger.addHandler(handler)


def test_logging_follows_a_new_runtime_dir(clean_env, tmp_path):
    logger = logging.getLogger("cfiguard")
    saved = list(logger.handlers)
    for handler in saved:
        logger.removeHandler(handler)
    try:
        setup_logging(load_config(repo_root=tmp_path))
        clean_env.setenv("CFIGUARD_RUNTIME_DIR", str(tmp_path / "second"))
        moved = load_config(repo_root=tmp_path)
        setup_logging(moved)
        logger.warning("after the move")
        for handler in logger.handlers:
            handler.flush()

        assert len(logger.handlers) == 2
        assert "after the move" in moved.runtime.log_path.read_text(encoding="utf-8")
        assert "after the move" not in (tmp_path / "runtime" / "logs" / "cfiguard.log").read_text(encoding="utf-8")
    finally:
        for handler in list(logger.handlers):
            handler.close()
            logger.removeHandler(handler)
        for handler in saved:
            logger.addHandler(handler)
