# bench_agent.py
"""
Benchmark worker: expands a RunConfig into (task, controller, seed) jobs,
runs each closed loop and writes its artefacts under
<output_dir>/<task>/<controller>/seed_<n>/.

Env:
- BENCH_MAX_ERROR_LEN (default: 500)
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from controllers import ControllerContext, design_at, make_controller
from linearize import error_budget, interval_radii
from logs import log
from plant import ArmPlant
from run_config import RunConfig
from sim import (
    SimConfig, SimTrace, Task, compute_metrics, metrics_payload, reference_window, run_closed_loop,
    timing_payload, write_json, write_trace_csv,
)

MAX_ERROR_LEN = int(os.getenv("BENCH_MAX_ERROR_LEN", "500"))


class Job(BaseModel):
    model_config = ConfigDict(frozen=True)

    controller: str
    seed: int
    config: RunConfig

    @property
    def key(self) -> str:
        return f"{self.config.task.value}/{self.controller}/seed_{self.seed}"

    def out_dir(self) -> Path:
        return Path(self.config.output_dir) / self.config.task.value / self.controller / f"seed_{self.seed}"


class JobResult(BaseModel):
    key: str
    controller: str
    seed: int
    ok: bool
    out_dir: str
    metrics: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    elapsed_s: float = 0.0


def jobs_from_config(cfg: RunConfig) -> List[Job]:
    return [Job(controller=c, seed=s, config=cfg) for c in cfg.controllers for s in cfg.seeds]


def build_context(cfg: RunConfig, task: Task, seed: int) -> ControllerContext:
    return ControllerContext(
        plant=cfg.plant(),
        weights=cfg.weights(),
        horizon=cfg.horizon(),
        reference=lambda start, N: reference_window(task, start, N),
        tightening=cfg.tightening,
        terminal_mode=cfg.terminal_mode,
        terminal_samples=cfg.terminal_samples,
        seed=seed,
    )


def design_summary(ctx: ControllerContext, task: Task) -> Dict[str, Any]:
    """Constants of the design at the initial state, for metrics.json."""
    d = design_at(ctx, task.initial, np.zeros(ctx.plant.m))
    out: Dict[str, Any] = {
        "eta1": ctx.plant.eta1,
        "eta_step": d.eta_step,
        "lambda_bar": d.lambda_bar,
        "terminal_epsilon": d.gains.epsilon,
        "reduced_riccati": d.gains.reduced,
        "closed_loop_spectral_radius": d.gains.closed_loop_spectral_radius,
    }
    if isinstance(ctx.plant, ArmPlant):
        params = ctx.plant.params
        dx, du = interval_radii(params, 0.0, ctx.horizon.m_smooth, ctx.horizon.delta)
        budget = error_budget(params, d.model, dx, du)
        out.update(eta2=budget.eta2, eta_H=budget.eta_H, eta=budget.eta,
                   taylor_bound=budget.taylor_bound, l1=budget.l1, l2=budget.l2)
    return out


def _atomic(writer, payload, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(payload, tmp)
    os.replace(tmp, path)


class RunOutput(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    trace: SimTrace
    metrics: Dict[str, Any]
    timing: Dict[str, Any]


def simulate(cfg: RunConfig, controller_name: str, seed: int) -> RunOutput:
    """One closed loop in memory; metrics and timing documents ready to write."""
    task = cfg.make_task()
    ctx = build_context(cfg, task, seed)
    controller = make_controller(controller_name, ctx)
    trace = run_closed_loop(controller, task, ctx.plant, seed, SimConfig(duration=cfg.duration))
    metrics = compute_metrics(trace, task, ctx.weights, ctx.plant)
    payload = metrics_payload(metrics, trace, extra={"design": design_summary(ctx, task),
                                                     "config": cfg.summary()})
    return RunOutput(trace=trace, metrics=payload, timing=timing_payload(metrics, trace))


def run_job(job: Job) -> JobResult:
    cfg = job.config
    t0 = time.perf_counter()
    log("info", "job_start", job=job.key)
    try:
        res = simulate(cfg, job.controller, job.seed)
        out = job.out_dir()
        out.mkdir(parents=True, exist_ok=True)
        if cfg.write_trace:
            _atomic(write_trace_csv, res.trace, out / "trace.csv")
        _atomic(write_json, res.metrics, out / "metrics.json")
        _atomic(write_json, res.timing, out / "timing.json")

        elapsed = time.perf_counter() - t0
        log("info", "job_done", job=job.key, elapsed_s=round(elapsed, 3),
            final_error=res.metrics["metrics"]["final_position_error"])
        return JobResult(key=job.key, controller=job.controller, seed=job.seed, ok=True, out_dir=str(out),
                         metrics=res.metrics["metrics"], elapsed_s=elapsed)
    except Exception as e:
        err = f"{type(e).__name__}: {e}"[:MAX_ERROR_LEN]
        log("error", "job_failed", job=job.key, error=err)
        return JobResult(key=job.key, controller=job.controller, seed=job.seed, ok=False,
                         out_dir=str(job.out_dir()), error=err, elapsed_s=time.perf_counter() - t0)


def run_batch(jobs: List[Job], workers: int = 1) -> List[JobResult]:
    """Runs jobs, in a process pool when workers > 1. Results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_job, jobs))


def run_all(cfg: RunConfig) -> List[JobResult]:
    jobs = jobs_from_config(cfg)
    log("info", "batch_start", jobs=len(jobs), workers=cfg.workers, output_dir=cfg.output_dir)
    results = run_batch(jobs, cfg.workers)
    log("info", "batch_done", ok=sum(r.ok for r in results), failed=sum(not r.ok for r in results))
    return results
