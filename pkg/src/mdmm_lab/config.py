"""Strict experiment configuration.

Unknown keys are rejected everywhere: a mistyped hyperparameter should stop
a run, not silently fall back to a default.
"""

from __future__ import annotations

import enum
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError, InvalidTarget

CONFIG_SCHEMA = "mdmm-lab/config/1"

DEFAULT_ALPHA_GRID = [0.02, 0.1, 0.5, 1.0, 2.0, 5.0, 25.0]
FULL_DECODER_HIDDEN = [64, 64]
REDUCED_DECODER_HIDDEN = [8, 8]


class Mode(str, enum.Enum):
    PRELIMINARY = "preliminary"
    CONSTRAINED = "constrained"
    WEIGHTED = "weighted"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class GeneratorSettings(_Strict):
    noise_std: float = Field(0.05, ge=0)
    n_train: int = Field(4096, gt=0)
    n_heldout: int = Field(1024, gt=1)


class ModelSettings(_Strict):
    code_dim: int = Field(8, gt=0)
    encoder_hidden: List[int] = Field(default_factory=lambda: [64, 64])
    decoder: Literal["full", "reduced"] = "full"
    activation: Literal["tanh", "relu"] = "tanh"

    @property
    def decoder_hidden(self) -> List[int]:
        return FULL_DECODER_HIDDEN if self.decoder == "full" else REDUCED_DECODER_HIDDEN


class OptimizerSettings(_Strict):
    lr_theta: float = Field(2e-4, gt=0)
    weight_decay: float = Field(0.01, ge=0)
    beta1: float = Field(0.9, gt=0, lt=1)
    beta2: float = Field(0.999, gt=0, lt=1)
    eps: float = Field(1e-8, gt=0)


class MultiplierSettings(_Strict):
    lr_lambda: float = Field(1.0, gt=0)
    damping: float = Field(1.0, ge=0)
    method: Literal["mdmm", "bdmm", "penalty"] = "mdmm"
    mode: Literal["equality", "inequality_upper"] = "equality"


class EvalSettings(_Strict):
    n_gen: int = Field(1024, gt=1)
    trace_every: int = Field(50, gt=0)
    ema_beta: float = Field(0.999, gt=0, lt=1)
    ema_window: int = Field(1000, gt=0)
    tolerance: float = Field(0.02, gt=0)


class ExperimentConfig(_Strict):
    schema_version: Literal["mdmm-lab/config/1"] = CONFIG_SCHEMA
    name: str = "experiment"
    mode: Mode = Mode.PRELIMINARY
    label: Optional[str] = None
    epsilon: Optional[float] = None
    alpha: Optional[float] = None
    steps: int = Field(20_000, gt=0)
    batch_size: int = Field(64, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)
    alpha_grid: List[float] = Field(default_factory=lambda: list(DEFAULT_ALPHA_GRID))
    epsilon_delta: float = Field(0.1, ge=0)
    generator: GeneratorSettings = Field(default_factory=GeneratorSettings)
    model: ModelSettings = Field(default_factory=ModelSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    multiplier: MultiplierSettings = Field(default_factory=MultiplierSettings)
    eval: EvalSettings = Field(default_factory=EvalSettings)

    @field_validator("alpha_grid")
    @classmethod
    def _grid_positive_increasing(cls, grid):
        if not grid:
            raise ValueError("alpha_grid must not be empty")
        if any(a <= 0 for a in grid):
            raise ValueError("alpha_grid values must be > 0")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("alpha_grid must be strictly increasing")
        return grid

    @model_validator(mode="after")
    def _mode_fields(self):
        if self.mode is Mode.PRELIMINARY and (self.epsilon is not None or self.alpha is not None):
            raise ValueError("preliminary mode takes neither epsilon nor alpha")
        if self.mode is Mode.CONSTRAINED:
            if self.epsilon is None:
                raise ValueError("constrained mode requires epsilon")
            if self.alpha is not None:
                raise ValueError("constrained mode does not take alpha")
        if self.mode is Mode.WEIGHTED:
            if self.alpha is None or self.alpha <= 0:
                raise ValueError("weighted mode requires alpha > 0")
            if self.epsilon is not None:
                raise ValueError("weighted mode does not take epsilon")
        return self

    def run_label(self) -> str:
        if self.label:
            return self.label
        if self.mode is Mode.CONSTRAINED:
            return "constrained"
        if self.mode is Mode.WEIGHTED:
            return f"alpha_{self.alpha:g}"
        return "preliminary"

    def for_run(self, mode: Mode, label: str, **fields) -> "ExperimentConfig":
        """Derived config for one run of a multi-run protocol."""
        data = self.model_dump(mode="json")
        data.update(mode=Mode(mode).value, label=label, epsilon=None, alpha=None)
        data.update(fields)
        return build_config(data)

    def echo(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def _check_target(data: Dict[str, Any]) -> None:
    eps = data.get("epsilon")
    if data.get("mode") == Mode.CONSTRAINED.value and eps is not None and eps <= 0:
        raise InvalidTarget(f"epsilon must be > 0, got {eps}")


def build_config(data: Dict[str, Any]) -> ExperimentConfig:
    _check_target(data)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return build_config(data)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides; unknown keys raise :class:`ConfigError`."""
    data = config.model_dump(mode="json")
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            value = _parse_value(raw)
        else:
            key, value = item
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return build_config(data)


def derive_seed(master: int, *labels) -> int:
    """Stable 64-bit seed from a master seed and a label path."""
    text = ":".join([str(int(master))] + [str(x) for x in labels])
    return int.from_bytes(hashlib.blake2b(text.encode(), digest_size=8).digest(), "little")
