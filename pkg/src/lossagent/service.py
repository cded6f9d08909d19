"""FastAPI service wrapping the orchestrator.

Runs are executed in worker threads; each owns its process state, backend and
trajectory file, so clients may launch several at once and poll them.

    uvicorn lossagent.service:app
"""

from __future__ import annotations

import tempfile
import threading
import uuid
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse, PlainTextResponse

from . import __version__
from .agent import find_weight_pattern
from .config import parse_config
from .errors import BackendError, ConfigError, LoadError, LossAgentError, ParseError, TrainingDiverged
from .experts import get_expert
from .harness import compare_policies, weight_curves_csv
from .losses import WeightBounds
from .orchestrator import run
from .schemas import (
    CompareRequest,
    CurvesRequest,
    ExpertRequest,
    ExpertResponse,
    ParseRequest,
    ParseResponse,
    RunRequest,
    RunResult,
    RunStatus,
)
from .trajectory import loads

ERROR_STATUS = {
    "config": 422,
    "parse": 422,
    "load": 422,
    "diverged": 500,
    "backend": 502,
    "error": 500,
}


def error_kind(exc: Exception) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, TrainingDiverged):
        return "diverged"
    if isinstance(exc, BackendError):
        return "backend"
    if isinstance(exc, ParseError):
        return "parse"
    if isinstance(exc, LoadError):
        return "load"
    return "error"


class RunRegistry:
    def __init__(self, root: Path):
        self.root = root
        self._lock = threading.Lock()
        self._runs: dict[str, RunStatus] = {}

    def path(self, run_id: str) -> Path:
        return self.root / f"{run_id}.jsonl"

    def create(self) -> str:
        run_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._runs[run_id] = RunStatus(run_id=run_id, status="queued")
        return run_id

    def update(self, run_id: str, **fields) -> None:
        with self._lock:
            self._runs[run_id] = self._runs[run_id].model_copy(update=fields)

    def get(self, run_id: str) -> RunStatus:
        with self._lock:
            if run_id not in self._runs:
                raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
            return self._runs[run_id]

    def execute(self, run_id: str, config) -> None:
        self.update(run_id, status="running")
        path = self.path(run_id)
        try:
            traj = run(config, out_path=path)
            self.update(run_id, status="done", stages_completed=len(traj))
        except LossAgentError as exc:
            done = max(sum(1 for _ in open(path, encoding="utf-8")) - 1, 0) if path.exists() else 0
            self.update(run_id, status="failed", error=str(exc), error_kind=error_kind(exc), stages_completed=done)

    def trajectory_text(self, run_id: str) -> str:
        self.get(run_id)
        path = self.path(run_id)
        return path.read_text(encoding="utf-8") if path.exists() else ""


def _error(exc: Exception) -> JSONResponse:
    kind = error_kind(exc)
    return JSONResponse(status_code=ERROR_STATUS[kind], content={"error": str(exc), "kind": kind})


def create_app(runs_dir: Optional[str | Path] = None) -> FastAPI:
    root = Path(runs_dir) if runs_dir else Path(tempfile.mkdtemp(prefix="lossagent-runs-"))
    root.mkdir(parents=True, exist_ok=True)
    registry = RunRegistry(root)
    app = FastAPI(title="lossagent", version=__version__)
    app.state.registry = registry

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/runs", response_model=RunResult)
    def start_run(req: RunRequest):
        try:
            config = parse_config(req.config)
        except ConfigError as exc:
            return _error(exc)
        run_id = registry.create()
        if not req.wait:
            threading.Thread(target=registry.execute, args=(run_id, config), daemon=True).start()
            return JSONResponse(status_code=202, content=registry.get(run_id).model_dump())
        registry.execute(run_id, config)
        status = registry.get(run_id)
        body = RunResult(**status.model_dump(), trajectory_jsonl=registry.trajectory_text(run_id))
        if status.status == "failed":
            return JSONResponse(status_code=ERROR_STATUS[status.error_kind or "error"], content=body.model_dump())
        return body

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str):
        return registry.get(run_id)

    @app.get("/runs/{run_id}/trajectory", response_class=PlainTextResponse)
    def run_trajectory(run_id: str):
        return PlainTextResponse(registry.trajectory_text(run_id), media_type="application/x-ndjson")

    @app.get("/runs/{run_id}/curves", response_class=PlainTextResponse)
    def run_curves(run_id: str):
        try:
            return PlainTextResponse(weight_curves_csv(loads(registry.trajectory_text(run_id))), media_type="text/csv")
        except (LoadError, ValueError) as exc:
            return JSONResponse(status_code=409, content={"error": str(exc), "kind": "load"})

    @app.post("/compare")
    def compare(req: CompareRequest):
        try:
            config = parse_config(req.config)
        except ConfigError as exc:
            return _error(exc)
        return compare_policies(config, req.policies, req.seeds, workers=req.workers).to_dict()

    @app.post("/parse", response_model=ParseResponse)
    def parse(req: ParseRequest):
        try:
            bounds = WeightBounds(*req.bounds)
            values, clipped = bounds.clip(find_weight_pattern(req.reply, req.term_ids))
        except (ParseError, ConfigError) as exc:
            return _error(exc)
        return ParseResponse(weights=[float(v) for v in values], clipped=clipped)

    @app.post("/experts/score", response_model=ExpertResponse)
    def expert_score(req: ExpertRequest):
        try:
            expert = get_expert(req.expert_id)
            outputs = np.asarray(req.outputs, dtype=np.float64)
            refs = None if req.references is None else np.asarray(req.references, dtype=np.float64)
            if expert.needs_reference and refs is None:
                raise ConfigError(f"expert {req.expert_id!r} needs references")
            if refs is not None and refs.shape != outputs.shape:
                raise ConfigError("outputs and references differ in shape")
            return ExpertResponse(per_image=expert.per_image(outputs, refs))
        except LossAgentError as exc:
            return _error(exc)

    @app.post("/curves", response_class=PlainTextResponse)
    def curves(req: CurvesRequest):
        try:
            return PlainTextResponse(weight_curves_csv(loads(req.trajectory_jsonl)), media_type="text/csv")
        except LoadError as exc:
            return _error(exc)
        except ValueError as exc:
            return JSONResponse(status_code=422, content={"error": str(exc), "kind": "load"})

    return app


_default_app: Optional[FastAPI] = None


def __getattr__(name):
    # `uvicorn lossagent.service:app` builds the default app on first access only
    global _default_app
    if name == "app":
        if _default_app is None:
            _default_app = create_app()
        return _default_app
    raise AttributeError(name)
