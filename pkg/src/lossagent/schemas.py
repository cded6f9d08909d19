"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Any, List, Literal, Optional, Union

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    config: dict[str, Any]
    wait: bool = True


class RunStatus(BaseModel):
    run_id: str
    status: Literal["queued", "running", "done", "failed"]
    stages_completed: int = 0
    error: Optional[str] = None
    error_kind: Optional[str] = None


class RunResult(RunStatus):
    trajectory_jsonl: Optional[str] = None


class CompareRequest(BaseModel):
    config: dict[str, Any]
    policies: List[str] = Field(min_length=1)
    seeds: List[int] = Field(min_length=1)
    workers: int = Field(1, ge=1)


class ParseRequest(BaseModel):
    reply: str
    term_ids: List[str] = Field(min_length=1)
    bounds: tuple[float, float] = (0.0, 10.0)


class ParseResponse(BaseModel):
    weights: List[float]
    clipped: bool


class ExpertRequest(BaseModel):
    expert_id: str
    outputs: List[List[List[float]]]
    references: Optional[List[List[List[float]]]] = None


class ExpertResponse(BaseModel):
    per_image: List[Union[float, str]]


class CurvesRequest(BaseModel):
    trajectory_jsonl: str


class ErrorBody(BaseModel):
    error: str
    kind: str
