from __future__ import annotations

import logging
import os
from uuid import uuid4

from fastapi import FastAPI, HTTPException

from .errors import ConfigurationError, FrameProcessingError, StrataError
from .models import DEFAULT_PROFILE, RunConfig, RunRequest, RunState, RunSummary
from .orchestrator import StreamingOrchestrator
from .sequence import read_sequence
from .storage import RunStore

LOGGER = logging.getLogger(__name__)


def _is_config_error(exc: Exception) -> bool:
    if isinstance(exc, FrameProcessingError):
        return isinstance(exc.cause, ConfigurationError)
    return isinstance(exc, ConfigurationError)


def create_app(store: RunStore | None = None) -> FastAPI:
    store = store or RunStore(db_path=os.getenv("STRATA_DB_PATH", "data/strata.db"))
    app = FastAPI(title="Strata Online Instance Mapping")

    @app.get("/health")
    def healthcheck():
        return {"ok": True, "service": app.title, "mode": "online"}

    @app.post("/runs", response_model=RunSummary)
    def start_run(request: RunRequest):
        try:
            config = RunConfig.from_file(DEFAULT_PROFILE, **request.config)
        except ConfigurationError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

        run_id = str(uuid4())
        store.create_run(run_id, request.sequence_dir)
        orchestrator = None
        try:
            orchestrator = StreamingOrchestrator(config)
            result = orchestrator.run(read_sequence(request.sequence_dir))
        except StrataError as exc:
            events = orchestrator.events if orchestrator else []
            store.finish_run(run_id, RunState.FAILED, events)
            LOGGER.warning("run %s failed: %s", run_id, exc)
            detail = {"run_id": run_id, "error": str(exc)}
            if isinstance(exc, FrameProcessingError):
                detail["frame"] = exc.frame_index
            raise HTTPException(status_code=422 if _is_config_error(exc) else 500, detail=detail) from exc

        totals = [t.total for t in result.timings]
        summary = RunSummary(
            run_id=run_id,
            state=result.state,
            frames=result.instance_map.frames,
            instances=len(result.instance_map.records),
            point_count=result.instance_map.point_count,
            mean_frame_ms=sum(totals) / len(totals) if totals else 0.0,
        )
        store.finish_run(run_id, result.state, result.events, summary, result.export)
        return summary

    @app.get("/runs")
    def list_runs():
        return {"runs": store.list_runs()}

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        run = store.get_run(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return run

    @app.get("/runs/{run_id}/events")
    def run_events(run_id: str):
        if store.get_run(run_id) is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return {"run_id": run_id, "events": store.get_events(run_id)}

    return app
