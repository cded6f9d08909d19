"""Run configuration (mirrors the JSON run-configuration file field for field)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .agent import RetryPolicy
from .data import DatasetSpec
from .errors import ConfigError
from .experts import EXPERTS, ObjectiveSpec
from .losses import DEFAULT_TERMS, TERMS, WeightBounds
from .process import DEFAULT_LEARNING_RATE
from .prompts import HistoryMode

DEFAULT_TASK = "Restore degraded grayscale images (denoising and deblurring) with a small convolutional model."
DEFAULT_RULES = (
    "Change the weights gradually; avoid changing any single weight by more than a factor of two per stage.",
    "Keep the fidelity loss (the first loss) active so the restoration stays faithful.",
)


class BackendSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: Literal["scripted", "http"] = "scripted"
    script: Literal["hill_climb", "constant", "unparseable"] = "hill_climb"
    reply: str = ""
    objective: Optional[str] = None
    hill_climb_factor: float = Field(1.5, gt=1.0)
    model: str = "default"
    url: Optional[str] = None
    timeout: float = Field(60.0, gt=0)
    retry: RetryPolicy = RetryPolicy()


class SurfaceSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    optimum: tuple[float, ...] = (0.6, 0.3, 0.1)
    grid_step: float = Field(0.1, gt=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    stages: int = Field(20, ge=1)
    iterations_per_stage: int = Field(5000, ge=0)
    initial_weights: tuple[float, ...] = (1.0, 0.1, 0.01)
    loss_terms: tuple[str, ...] = DEFAULT_TERMS
    objectives: tuple[ObjectiveSpec, ...] = (
        ObjectiveSpec(name="sharpness", expert_id="sharpness", kind="score", direction="higher_better"),
    )
    policy: Literal["agent", "fixed", "random", "greedy_oracle"] = "agent"
    history_mode: HistoryMode = HistoryMode()
    seed: int = Field(0, ge=0, lt=2**64)
    test_set_size: int = Field(10, ge=1)
    process: Literal["toy_restorer", "response_surface"] = "toy_restorer"
    bounds: tuple[float, float] = (0.0, 10.0)
    learning_rate: float = Field(DEFAULT_LEARNING_RATE, ge=0)
    kernel_size: int = Field(5, ge=1)
    dataset: DatasetSpec = DatasetSpec()
    surface: SurfaceSettings = SurfaceSettings()
    task_description: str = DEFAULT_TASK
    rules: tuple[str, ...] = DEFAULT_RULES
    prompt_templates: Optional[str] = None
    backend: BackendSettings = BackendSettings()

    @model_validator(mode="after")
    def _consistent(self):
        m = len(self.loss_terms)
        if m == 0:
            raise ValueError("loss_terms must not be empty")
        unknown = [t for t in self.loss_terms if t not in TERMS]
        if unknown:
            raise ValueError(f"unknown loss terms {unknown}")
        if len(set(self.loss_terms)) != m:
            raise ValueError("loss_terms must be unique")
        if len(self.initial_weights) != m:
            raise ValueError(f"initial_weights has {len(self.initial_weights)} values for {m} loss terms")
        if not self.objectives:
            raise ValueError("at least one objective is required")
        names = [o.name for o in self.objectives]
        if len(set(names)) != len(names):
            raise ValueError("objective names must be unique")
        bounds = self.weight_bounds()
        try:
            bounds.validate(self.initial_weights, m)
        except ValueError as exc:
            raise ValueError(f"initial_weights: {exc}") from None
        if self.process == "toy_restorer":
            missing = [o.expert_id for o in self.objectives if o.expert_id not in EXPERTS]
            if missing:
                raise ValueError(f"unknown experts {missing}")
            if self.kernel_size % 2 == 0:
                raise ValueError("kernel_size must be odd")
        else:
            if len(self.surface.optimum) != m:
                raise ValueError("surface.optimum length must equal the number of loss terms")
            if any(o.kind != "score" for o in self.objectives):
                raise ValueError("the response surface only supports score objectives")
        if self.policy == "greedy_oracle" and self.process != "response_surface":
            raise ValueError("greedy_oracle requires process=response_surface")
        return self

    def weight_bounds(self) -> WeightBounds:
        return WeightBounds(*self.bounds)

    def digest(self) -> str:
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def parse_config(data: dict | str) -> RunConfig:
    try:
        if isinstance(data, str):
            return RunConfig.model_validate_json(data)
        return RunConfig.model_validate(data)
    except (ValidationError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def surface_config(**overrides) -> RunConfig:
    """A response-surface config: M=3, bounds [0, 1], grid step 0.1."""
    base = dict(
        process="response_surface",
        policy="greedy_oracle",
        stages=20,
        iterations_per_stage=0,
        initial_weights=(0.5, 0.5, 0.5),
        bounds=(0.0, 1.0),
        objectives=(ObjectiveSpec(name="surface", expert_id="surface", kind="score", direction="higher_better"),),
        test_set_size=1,
    )
    base.update(overrides)
    return parse_config(base)
