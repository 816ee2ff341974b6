"""Run configuration: YAML/JSON files plus command-line overrides.

Unknown keys are rejected, values are range-checked, and every leaf value
records where it came from (``default``, ``file`` or ``flag``).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .archive import hash_config
from .attacks import parse_fraction

COMMANDS = ("gen-data", "train-model", "train-ae", "attack", "evaluate", "detect", "report")
OUTPUT_ROOT_ENV = "FSDETECT_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class SplitCounts(Section):
    train: int = Field(24, ge=1)
    val: int = Field(8, ge=1)
    test: int = Field(8, ge=1)


class DataSection(Section):
    source: Literal["synthetic", "folder"] = "synthetic"
    n_classes: int = Field(40, ge=1)
    samples_per_class: int = Field(40, ge=1)
    channels: int = Field(3, ge=1)
    image_size: int = Field(16, ge=4, le=64)
    signal: float = Field(1.0, ge=0)
    noise_std: float = Field(0.1, ge=0)
    template_grid: int = Field(8, ge=1)
    split: SplitCounts = SplitCounts()
    root: Optional[Path] = None
    split_file: Optional[Path] = None

    @model_validator(mode="after")
    def _paths(self):
        if self.source == "folder":
            if self.root is None:
                raise ValueError("data.root: required when data.source is 'folder'")
            if self.split_file is None:
                raise ValueError("data.split_file: required when data.source is 'folder'")
        return self


class EpisodeSection(Section):
    ways: int = Field(5, ge=2)
    shots: int = Field(5, ge=1)
    n_query: int = Field(75, ge=1)

    @model_validator(mode="after")
    def _balanced(self):
        if self.n_query % self.ways:
            raise ValueError(f"episode.n_query ({self.n_query}) must be divisible by episode.ways ({self.ways})")
        return self


HeadKind = Literal["relation", "cross_attention"]


class ModelSection(Section):
    heads: list[HeadKind] = ["relation", "cross_attention"]
    hidden: int = Field(32, ge=1)
    epochs: int = Field(5, ge=0)
    episodes_per_epoch: int = Field(100, ge=1)
    train_n_query: int = Field(50, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    val_episodes: int = Field(100, ge=1)


class AutoencoderSection(Section):
    variants: list[Literal["fpa", "fpa_prime"]] = ["fpa", "fpa_prime"]
    hidden: int = Field(32, ge=1)
    epochs_standard: int = Field(30, ge=0)
    epochs_finetune: int = Field(20, ge=0)
    batch_size: int = Field(64, ge=1)
    learning_rate: float = Field(1e-4, gt=0)
    finetune_learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    step_size: int = Field(10, ge=1)
    gamma: float = Field(0.1, gt=0, le=1)


class AttackEntry(Section):
    kind: Literal["pgd", "cw_sgd"] = "pgd"
    epsilon: float = Field(12 / 255, ge=0, le=1)
    eta: float = Field(0.05, ge=0)
    iterations: int = Field(100, ge=1)
    kappa: float = Field(0.1, ge=0)
    const: float = Field(1.0, ge=0)

    @field_validator("epsilon", mode="before")
    @classmethod
    def _fraction(cls, v):
        try:
            return parse_fraction(v)
        except (ValueError, ZeroDivisionError) as exc:
            raise ValueError(f"not a number or fraction: {v!r}") from exc


def _default_attacks():
    return [AttackEntry(kind="pgd"), AttackEntry(kind="cw_sgd", epsilon=0.0, eta=0.05, const=10.0)]


class AttackSection(Section):
    attacks: list[AttackEntry] = Field(default_factory=_default_attacks)
    target_classes: Optional[list[str]] = None
    n_perturbation_sets: int = Field(10, ge=1)


class EvaluateSection(Section):
    n_eval_episodes: int = Field(200, ge=1)
    n_asr_episodes: int = Field(50, ge=1)


class DetectSection(Section):
    filters: list[Literal["identity", "noise", "median_2x2", "fpa", "fpa_prime"]] = \
        ["identity", "noise", "median_2x2", "fpa", "fpa_prime"]
    statistics: list[Literal["logits_l1", "hard_label"]] = ["logits_l1", "hard_label"]
    repeats: int = Field(5, ge=1)
    fpr: float = Field(0.05, gt=0, lt=1)
    noise_scale: float = Field(1.0, gt=0)


class RunConfig(Section):
    command: Optional[Literal[COMMANDS]] = None
    seed: int = Field(0, ge=0)
    output_root: Path = Path("runs")
    data: DataSection = DataSection()
    episode: EpisodeSection = EpisodeSection()
    model: ModelSection = ModelSection()
    autoencoder: AutoencoderSection = AutoencoderSection()
    attack: AttackSection = AttackSection()
    evaluate: EvaluateSection = EvaluateSection()
    detect: DetectSection = DetectSection()

    # populated by parse_config
    provenance: dict[str, str] = Field(default_factory=dict, exclude=True)

    def plan(self) -> dict:
        """Everything that determines artifacts (command and output location excluded)."""
        return self.model_dump(mode="json", exclude={"command", "output_root", "provenance"})

    def plan_hash(self) -> str:
        return hash_config(self.plan())[:16]

    def run_dir(self) -> Path:
        return Path(self.output_root) / "runs" / self.plan_hash()


def _set_dotted(d: dict, key: str, value: Any):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
        if not isinstance(d, dict):
            raise ConfigError(f"{key}: cannot set a field inside a non-mapping value")
    d[parts[-1]] = value


def _leaves(d, prefix=""):
    if isinstance(d, dict):
        for k, v in d.items():
            yield from _leaves(v, f"{prefix}{k}.")
    else:
        yield prefix[:-1], d


def _format_error(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        msg = e["msg"]
        if e["type"] == "extra_forbidden":
            msg = "unknown key"
        elif e["type"] == "missing":
            msg = "required key missing"
        msg = msg.removeprefix("Value error, ")
        lines.append(f"{loc}: {msg}" if not msg.startswith(loc) else msg)
    return "; ".join(lines)


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def parse_config(path=None, overrides: dict[str, Any] | None = None, command=None) -> RunConfig:
    """Merge file values and dotted-key ``overrides`` (flags win) and validate."""
    raw = load_config_file(path) if path is not None else {}
    file_keys = {k for k, _ in _leaves(raw)}
    flag_keys = set()
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
        flag_keys.add(key)
    if command is not None:
        raw["command"] = command
    if "output_root" not in raw and os.environ.get(OUTPUT_ROOT_ENV):
        raw["output_root"] = os.environ[OUTPUT_ROOT_ENV]
        flag_keys.add("output_root")
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None

    prov = {}
    for key, _ in _leaves(cfg.model_dump(mode="json", exclude={"provenance"})):
        if any(key == f or key.startswith(f + ".") for f in flag_keys):
            prov[key] = "flag"
        elif any(key == f or key.startswith(f + ".") for f in file_keys):
            prov[key] = "file"
        else:
            prov[key] = "default"
    cfg.provenance = prov
    return cfg
