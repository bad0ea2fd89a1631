from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

from dotenv import dotenv_values, load_dotenv

from .encoder import DEFAULT_G_MAX, chain_length, validate_ratios
from .errors import ConfigError
from .neuralnet import DEFAULT_HIDDEN, ModelConfig
from .paths import RuntimePaths, build_runtime_paths
from .synthetic import DEFAULT_BASE

STAGE_SEEDS = ("split_seed", "dataset_seed", "model_seed", "sim_seed", "attack_seed")


def _as_bool(value: str | None, default: bool) -> bool:
    if value is None:
        return default
    return value.strip().lower() in {"1", "true", "yes", "on"}


def _as_int(value: str) -> int:
    text = value.strip().lower()
    return int(text, 16) if text.startswith("0x") else int(text, 10)


def _as_floats(value: str) -> tuple[float, ...]:
    return tuple(float(part) for part in value.replace(" ", "").split(",") if part)


def _as_ints(value: str) -> tuple[int, ...]:
    return tuple(int(part) for part in value.replace(" ", "").split(",") if part)


@dataclass(frozen=True)
class PipelineConfig:
    repo_root: Path
    runtime: RuntimePaths
    seed: int
    split_seed: int
    dataset_seed: int
    model_seed: int
    sim_seed: int
    attack_seed: int
    g_max: int
    ratios: tuple[float, float, float]
    hidden: tuple[int, ...]
    keep_prob: float
    learning_rate: float
    batch_size: int
    epochs: int
    patience: int
    malicious_ratio: float
    include_pairs: bool
    realistic_malicious: bool
    base: int
    min_gadgets: int
    sim_steps: int
    payload_count: int
    payload_min_len: int
    payload_max_len: int
    fail_fast: bool
    structural_alerts: bool
    log_level: str
    log_max_bytes: int
    log_backup_count: int

    def model_config(self, input_dim: int | None = None) -> ModelConfig:
        return ModelConfig(
            input_dim=chain_length(self.g_max) if input_dim is None else input_dim,
            hidden=self.hidden,
            keep_prob=self.keep_prob,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.model_seed,
        )

    def seeds(self) -> dict[str, int]:
        return {"seed": self.seed, **{name: getattr(self, name) for name in STAGE_SEEDS}}


# Environment key -> (field, parser, default). Defaults are strings, parsed like any other value.
_SETTINGS: dict[str, tuple[str, Callable[[str], Any], str]] = {
    "CFIGUARD_GMAX": ("g_max", _as_int, str(DEFAULT_G_MAX)),
    "CFIGUARD_RATIOS": ("ratios", _as_floats, "0.8,0.1,0.1"),
    "CFIGUARD_HIDDEN": ("hidden", _as_ints, ",".join(str(size) for size in DEFAULT_HIDDEN)),
    "CFIGUARD_KEEP_PROB": ("keep_prob", float, "0.5"),
    "CFIGUARD_LEARNING_RATE": ("learning_rate", float, "0.01"),
    "CFIGUARD_BATCH_SIZE": ("batch_size", _as_int, "128"),
    "CFIGUARD_EPOCHS": ("epochs", _as_int, "30"),
    "CFIGUARD_PATIENCE": ("patience", _as_int, "5"),
    "CFIGUARD_MALICIOUS_RATIO": ("malicious_ratio", float, "0.83"),
    "CFIGUARD_BASE": ("base", _as_int, hex(DEFAULT_BASE)),
    "CFIGUARD_MIN_GADGETS": ("min_gadgets", _as_int, "500"),
    "CFIGUARD_SIM_STEPS": ("sim_steps", _as_int, "10000"),
    "CFIGUARD_PAYLOAD_COUNT": ("payload_count", _as_int, "64"),
    "CFIGUARD_PAYLOAD_MIN_LEN": ("payload_min_len", _as_int, "3"),
    "CFIGUARD_PAYLOAD_MAX_LEN": ("payload_max_len", _as_int, "6"),
    "LOG_MAX_BYTES": ("log_max_bytes", _as_int, str(5 * 1024 * 1024)),
    "LOG_BACKUP_COUNT": ("log_backup_count", _as_int, "5"),
}
_FLAGS: dict[str, tuple[str, bool]] = {
    "CFIGUARD_INCLUDE_PAIRS": ("include_pairs", True),
    "CFIGUARD_REALISTIC_MALICIOUS": ("realistic_malicious", True),
    "CFIGUARD_FAIL_FAST": ("fail_fast", False),
    "CFIGUARD_STRUCTURAL_ALERTS": ("structural_alerts", True),
}


def load_config(
    repo_root: Path | None = None,
    config_path: Path | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> PipelineConfig:
    """Defaults < environment (and ``.env``) < ``config_path`` file < ``overrides``."""
    resolved_root = repo_root or Path(__file__).resolve().parents[2]
    load_dotenv(resolved_root / ".env")

    values: dict[str, str | None] = dict(os.environ)
    if config_path is not None:
        if not config_path.is_file():
            raise ConfigError(f"Config file not found: {config_path}")
        values.update(dotenv_values(config_path))

    def _raw(key: str) -> str | None:
        value = values.get(key)
        return None if value is None or value.strip() == "" else value.strip().strip('"')

    settings: dict[str, Any] = {}
    try:
        master_seed = _as_int(_raw("CFIGUARD_SEED") or "0")
        for name in STAGE_SEEDS:
            raw = _raw(f"CFIGUARD_{name.upper()}")
            settings[name] = master_seed if raw is None else _as_int(raw)
        for key, (name, parser, default) in _SETTINGS.items():
            settings[name] = parser(_raw(key) or default)
    except ValueError as exc:
        raise ConfigError(f"Invalid configuration value: {exc}") from exc
    for key, (name, default) in _FLAGS.items():
        settings[name] = _as_bool(_raw(key), default)
    settings["seed"] = master_seed

    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if name not in PipelineConfig.__dataclass_fields__ or name in ("repo_root", "runtime"):
            raise ConfigError(f"Unknown configuration override: {name}")
        if name == "seed":
            # A master seed given on the command line re-derives stage seeds not set explicitly.
            for stage in STAGE_SEEDS:
                if _raw(f"CFIGUARD_{stage.upper()}") is None and overrides.get(stage) is None:
                    settings[stage] = int(value)
        settings[name] = value

    settings["ratios"] = validate_ratios(settings["ratios"])
    if settings["g_max"] < 1:
        raise ConfigError("G_max must be at least 1")
    if not 0.0 < settings["keep_prob"] <= 1.0:
        raise ConfigError("keep_prob must lie in (0, 1]")
    if settings["malicious_ratio"] < 0:
        raise ConfigError("malicious_ratio must be non-negative")

    runtime = build_runtime_paths(resolved_root, _raw("CFIGUARD_RUNTIME_DIR") or "runtime")
    return PipelineConfig(
        repo_root=resolved_root,
        runtime=runtime,
        log_level=(_raw("LOG_LEVEL") or "INFO").upper(),
        **settings,
    )
