#main.py
"""
HTTP surface for remote benchmark runners.

  GET  /healthz
  POST /runs       one (controller, seed) closed loop, metrics back
  POST /compare    comparison report over metrics documents
  GET  /__routes
"""
import traceback
from typing import Any, Dict, List, Optional

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, ValidationError

from bench_agent import simulate
from logs import log, to_jsonable
from plant import ControlError
from report_agent import ComparisonReport, compare_documents
from run_config import load_run_config

VERSION = "1.0.0"

app = FastAPI(title="Smooth MPC Bench", version=VERSION)
app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])


class RunIn(BaseModel):
    controller: str = "smooth"
    seed: int = 0
    # RunConfig keys; output_dir/workers are ignored here
    config: Dict[str, Any] = Field(default_factory=dict)
    include_trace: bool = False


class RunOut(BaseModel):
    metrics: Dict[str, Any]
    timing: Dict[str, Any]
    trace: Optional[List[Dict[str, Any]]] = None


class CompareIn(BaseModel):
    documents: List[Dict[str, Any]]
    baseline: Optional[str] = None


@app.exception_handler(ValidationError)
def bad_config(request: Request, exc: ValidationError):
    return JSONResponse(status_code=400, content={"detail": "invalid configuration", "error": str(exc)[:500]})


@app.exception_handler(ValueError)
def bad_value(request: Request, exc: ValueError):
    return JSONResponse(status_code=400, content={"detail": "invalid request", "error": str(exc)[:500]})


@app.exception_handler(ControlError)
def control_failed(request: Request, exc: ControlError):
    log("warn", "request_control_error", path=request.url.path, error=str(exc)[:500])
    return JSONResponse(status_code=422, content={"detail": type(exc).__name__, "error": str(exc)[:500]})


@app.exception_handler(Exception)
def unhandled(request: Request, exc: Exception):
    log("error", "unhandled_error", path=request.url.path, error=repr(exc)[:500])
    traceback.print_exc()
    return JSONResponse(status_code=500, content={"detail": "Internal Server Error", "error": str(exc)})


@app.get("/healthz")
def health():
    return {"ok": True, "version": VERSION}


@app.get("/__routes")
def __routes():
    return sorted([getattr(r, "path", "") for r in app.routes])


@app.post("/runs", response_model=RunOut)
def create_run(body: RunIn):
    overrides = {**body.config, "controllers": body.controller, "seeds": body.seed}
    cfg = load_run_config(None, overrides)
    res = simulate(cfg, body.controller, body.seed)
    trace = None
    if body.include_trace:
        trace = to_jsonable(res.trace.to_frame().to_dict(orient="records"))
    return RunOut(metrics=res.metrics, timing=res.timing, trace=trace)


@app.post("/compare", response_model=ComparisonReport)
def compare(body: CompareIn):
    return compare_documents(body.documents, baseline=body.baseline)
