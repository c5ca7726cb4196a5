"""Flat key = value configuration with typed defaults, validation and atomic writes."""

import json
import os
import shutil
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, FrozenSet, List, Mapping, Optional

from core.errors import ConfigError, DataError
from core.logger import logger

SCHEMAS = ("ngsim", "ute")


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """
    Write a file atomically.

    Uses temp file + fsync + rename so a crash never leaves a partial file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_fd, temp_path = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}_", suffix=".tmp")
    try:
        with os.fdopen(temp_fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        shutil.move(temp_path, path)
    except Exception:
        try:
            os.unlink(temp_path)
        except OSError:
            pass
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


@dataclass(frozen=True)
class DatasetConfig:
    """One `dataset.<tag>.*` block."""

    tag: str
    path: Path
    schema: str
    source_tag: str
    lane_max: int
    merge_lane_ids: FrozenSet[int]
    synth_vehicles: int
    synth_duration_s: float
    synth_frame_rate_hz: int
    synth_seed: Optional[int]


class ConfigManager:
    """
    Configuration manager for the flat `key = value` format.
    Comments start with '#'; lists are comma-separated.
    Every key has a typed default; unknown keys are rejected.
    """

    DEFAULTS: Dict[str, Any] = {
        "seed": 42,
        "output_dir": "out",
        "threads": 1,
        # Dataset roles (tags refer to dataset.<tag>.* blocks)
        "pretrain_datasets": [],
        "finetune_dataset": "",
        "test_dataset": "",
        # Graph construction
        "rmax": "estimate",
        "left_is_lower_lane": True,
        "graph_dump_stride": 10,
        # Ingest
        "quality_filter": False,
        # Model
        "input_dim": 6,
        "lstm_hidden": 64,
        "embed_dim": 128,
        "heads": 4,
        "head_dim": 32,
        "gat_layers": 2,
        "edge_dim": 5,
        "lane_bias_init": [0.0, 0.0, 0.0, 1.0],
        "decoder_hidden": 256,
        "leaky_slope": 0.2,
        "attention_variant": "gat",
        "kinematic_prior": "cv",
        # Training
        "pretrain_epochs": 10,
        "finetune_epochs": 8,
        "batch_size": 32,
        "micro_batch": 8,
        "pretrain_lr": 1e-3,
        "finetune_lr": 3e-4,
        "weight_decay": 1e-4,
        "clip_norm": 5.0,
        "adam_beta1": 0.9,
        "adam_beta2": 0.999,
        "adam_eps": 1e-8,
        "step_sample": 300,
        "scheduler_patience": 3,
        "scheduler_factor": 0.5,
        "ade_weight": 0.5,
        "ttc_weight": 0.0,
        "ttc_penalty_threshold_s": 3.0,
        "split_fractions": [0.70, 0.15, 0.15],
        "finetune_split": [0.70, 0.30],
        # Evaluation
        "ttc_threshold_s": 1.5,
        "drac_threshold": 3.35,
        "collision_distance_m": 2.0,
        "ssm_pairs": "graph",
        "eval_stride": 10,
        "dump_pairs": False,
    }

    # Element type for list-valued keys
    LIST_TYPES: Dict[str, type] = {
        "pretrain_datasets": str,
        "lane_bias_init": float,
        "split_fractions": float,
        "finetune_split": float,
    }

    DATASET_FIELDS: Dict[str, Any] = {
        "path": str,
        "schema": str,
        "source_tag": str,
        "lane_max": int,
        "merge_lane_ids": List[int],
        "synth_vehicles": int,
        "synth_duration_s": float,
        "synth_frame_rate_hz": int,
        "synth_seed": int,
    }

    CHOICES: Dict[str, tuple] = {
        "attention_variant": ("gat", "gatv2"),
        "kinematic_prior": ("cv", "none"),
        "ssm_pairs": ("graph", "all"),
    }

    def __init__(self, config_path: str, overrides: Optional[Mapping[str, Any]] = None,
                 environ: Optional[Mapping[str, str]] = None):
        """
        Initialize config manager.

        Args:
            config_path: Path to the key = value file
            overrides: Already-typed values that win over the file (CLI flags)
            environ: Environment mapping (defaults to os.environ)
        """
        self.config_path = Path(config_path).resolve()
        self.base_dir = self.config_path.parent
        self.config: Dict[str, Any] = dict(self.DEFAULTS)
        self.datasets_raw: Dict[str, Dict[str, Any]] = {}
        self.lines: Dict[str, int] = {}

        if not self.config_path.exists():
            raise ConfigError(f"Config file not found: {self.config_path}")

        self.load()

        env = os.environ if environ is None else environ
        if env.get("LAGAT_SEED"):
            self.config["seed"] = self._parse_value("seed", env["LAGAT_SEED"], None)

        for key, value in (overrides or {}).items():
            if value is not None:
                self.set(key, value)

        self._validate()
        logger.info(f"[Config] Loaded from {self.config_path}")

    def load(self) -> None:
        """Parse the config file."""
        with open(self.config_path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError("Expected 'key = value'", line=lineno)
                key, value = (part.strip() for part in line.split("=", 1))
                if key in self.lines:
                    raise ConfigError("Duplicate key", key=key, line=lineno)
                self.lines[key] = lineno

                if key.startswith("dataset."):
                    self._load_dataset_key(key, value, lineno)
                elif key in self.DEFAULTS:
                    self.config[key] = self._parse_value(key, value, lineno)
                else:
                    raise ConfigError("Unknown key", key=key, line=lineno)

    def _load_dataset_key(self, key: str, value: str, lineno: int) -> None:
        parts = key.split(".")
        if len(parts) != 3 or parts[2] not in self.DATASET_FIELDS or not parts[1]:
            raise ConfigError("Unknown key", key=key, line=lineno)
        _, tag, field_name = parts
        kind = self.DATASET_FIELDS[field_name]
        try:
            if kind is str:
                parsed: Any = value
            elif kind == List[int]:
                parsed = [int(v) for v in value.split(",") if v.strip()]
            else:
                parsed = kind(value)
        except ValueError:
            raise ConfigError(f"Malformed value '{value}'", key=key, line=lineno)
        self.datasets_raw.setdefault(tag, {})[field_name] = parsed

    def _parse_value(self, key: str, value: str, lineno: Optional[int]) -> Any:
        default = self.DEFAULTS[key]
        try:
            if isinstance(default, bool):
                lowered = value.lower()
                if lowered not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return lowered in ("true", "1", "yes")
            if isinstance(default, list):
                elem = self.LIST_TYPES[key]
                return [elem(v.strip()) for v in value.split(",") if v.strip()]
            if isinstance(default, int):
                return int(value)
            if isinstance(default, float):
                return float(value)
            return value
        except ValueError:
            raise ConfigError(f"Malformed value '{value}'", key=key, line=lineno)

    def _validate(self) -> None:
        for key, choices in self.CHOICES.items():
            if self.config[key] not in choices:
                raise ConfigError(f"Expected one of {choices}", key=key, line=self.lines.get(key))
        rmax = self.config["rmax"]
        if rmax != "estimate":
            try:
                if float(rmax) <= 0:
                    raise ValueError(rmax)
            except ValueError:
                raise ConfigError("rmax must be 'estimate' or a positive number", key="rmax",
                                  line=self.lines.get("rmax"))
        if self.config["threads"] < 1:
            raise ConfigError("threads must be >= 1", key="threads", line=self.lines.get("threads"))
        for tag, fields in self.datasets_raw.items():
            for required in ("path", "schema"):
                if required not in fields:
                    raise ConfigError("Missing required dataset field", key=f"dataset.{tag}.{required}")
            if fields["schema"] not in SCHEMAS:
                raise ConfigError(f"Schema must be one of {SCHEMAS}", key=f"dataset.{tag}.schema",
                                  line=self.lines.get(f"dataset.{tag}.schema"))
        roles = list(self.config["pretrain_datasets"])
        roles += [t for t in (self.config["finetune_dataset"], self.config["test_dataset"]) if t]
        for tag in roles:
            if tag not in self.datasets_raw:
                raise ConfigError(f"Dataset role refers to undefined dataset '{tag}'")

    def get(self, key: str, default: Any = None) -> Any:
        """Get a config value."""
        return self.config.get(key, default)

    def set(self, key: str, value: Any) -> None:
        """Set a known key (used for CLI overrides)."""
        if key not in self.DEFAULTS:
            raise ConfigError("Unknown key", key=key)
        self.config[key] = value

    def __getitem__(self, key: str) -> Any:
        return self.config[key]

    # Typed views. Imported lazily: those modules write through atomic_write_* above.
    # Dataclass validation failures surface as ConfigError.

    def model_config(self):
        from model.network import ModelConfig
        return _typed_view(lambda: ModelConfig.from_config(self))

    def train_config(self, phase: str):
        from training.trainer import TrainRunConfig
        return _typed_view(lambda: TrainRunConfig.from_config(self, phase))

    def ssm_config(self):
        from evaluation.ssm import SsmConfig
        return _typed_view(lambda: SsmConfig.from_config(self))


    @property
    def output_dir(self) -> Path:
        return self.resolve_path(self.config["output_dir"])

    def resolve_path(self, value) -> Path:
        path = Path(value)
        return path if path.is_absolute() else (self.base_dir / path).resolve()

    def dataset_tags(self) -> List[str]:
        return sorted(self.datasets_raw)

    def dataset(self, tag: str) -> DatasetConfig:
        """
        Resolve a dataset block.

        lane_max and merge_lane_ids fall back to the sidecar <stem>.meta.json
        written next to synthetic files.
        """
        if tag not in self.datasets_raw:
            raise ConfigError(f"Dataset '{tag}' not defined")
        fields = dict(self.datasets_raw[tag])
        path = self.resolve_path(fields["path"])

        if "lane_max" not in fields or "merge_lane_ids" not in fields:
            sidecar = path.with_name(path.stem + ".meta.json")
            if sidecar.exists():
                with open(sidecar, "r", encoding="utf-8") as f:
                    meta = json.load(f)
                fields.setdefault("lane_max", int(meta["lane_max"]))
                fields.setdefault("merge_lane_ids", [int(v) for v in meta["merge_lane_ids"]])
            if "lane_max" not in fields:
                raise ConfigError("lane_max not configured and no sidecar metadata found",
                                  key=f"dataset.{tag}.lane_max")

        return DatasetConfig(
            tag=tag,
            path=path,
            schema=fields["schema"],
            source_tag=fields.get("source_tag", "synthetic"),
            lane_max=int(fields["lane_max"]) if "lane_max" in fields else 0,
            merge_lane_ids=frozenset(fields.get("merge_lane_ids", [])),
            synth_vehicles=int(fields.get("synth_vehicles", 0)),
            synth_duration_s=float(fields.get("synth_duration_s", 0.0)),
            synth_frame_rate_hz=int(fields.get("synth_frame_rate_hz", 10)),
            synth_seed=fields.get("synth_seed"),
        )

    def synth_targets(self) -> List[str]:
        """Dataset tags that carry a synthetic scenario description."""
        return [t for t in self.dataset_tags() if self.datasets_raw[t].get("synth_vehicles", 0) > 0]

    def validate_paths(self, tags: List[str]) -> None:
        """Check that the raw input files of the given datasets exist."""
        for tag in tags:
            path = self.resolve_path(self.datasets_raw[tag]["path"])
            if not path.exists():
                raise DataError(f"Input file not found for dataset '{tag}': {path}")

    def ensure_under_output(self, path: Path) -> Path:
        """Reject output paths outside the configured output directory."""
        out = self.output_dir
        resolved = Path(path).resolve()
        if resolved != out and out not in resolved.parents:
            raise ConfigError(f"Refusing to write outside output_dir ({out}): {resolved}")
        return resolved

    def load_state(self, name: str) -> Optional[Dict[str, Any]]:
        path = self.output_dir / name
        if not path.exists():
            return None
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def save_state(self, name: str, payload: Dict[str, Any]) -> Path:
        """Persist resolved pipeline state (e.g. estimated R_max) under output_dir."""
        path = self.output_dir / name
        atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        logger.info(f"[Config] Saved {path}")
        return path


def _typed_view(build):
    try:
        return build()
    except ValueError as e:
        raise ConfigError(str(e)) from e
