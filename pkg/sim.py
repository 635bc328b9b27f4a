# sim.py
"""
Virtual-time closed loop: tasks, reference paths, seeded disturbances,
trace export and metrics.

Env:
- SIM_POSITION_STEPS (default: 300)
- SIM_TRAJECTORY_STEPS (default: 600)
"""
from __future__ import annotations

import json
import math
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from controllers import ControlAction, Controller, SolveRecord
from gains import CostWeights
from logs import log, to_jsonable
from ocp import TrackingReference, stage_cost
from plant import (
    ArmParams, ArmPlant, ConstraintViolation, ControlError, Plant, forward_kinematics, initial_reach_state,
    position_of, sample_disturbance,
)

SCHEMA_VERSION = 1
SIM_POSITION_STEPS = int(os.getenv("SIM_POSITION_STEPS", "300"))
SIM_TRAJECTORY_STEPS = int(os.getenv("SIM_TRAJECTORY_STEPS", "600"))

TRACE_COLUMNS = (
    "step", "time", "x", "y", "theta1", "theta2", "theta3", "u1", "u2", "u3",
    "x_ref", "y_ref", "pred_x", "pred_y", "disturbance_norm", "plan_measured_at", "events",
)


class SimulationDiverged(ControlError):
    pass


class TaskKind(str, Enum):
    POSITION_REACH = "position_reach"
    TRAJECTORY_TRACK = "trajectory_track"


class Task(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: TaskKind
    initial: np.ndarray
    duration: int = Field(ge=1)
    delta: float = Field(default=0.1, gt=0.0)
    target: Tuple[float, float] = (2.0, 6.0)
    arc_center: Tuple[float, float] = (2.0, 4.0)
    arc_radius: float = Field(default=2.0, gt=0.0)
    line_end: Tuple[float, float] = (3.5, 4.5)
    # reference speed along the path, units per second
    speed: float = Field(default=0.15, gt=0.0)

    @property
    def arc_length(self) -> float:
        return 0.5 * math.pi * self.arc_radius

    @property
    def line_start(self) -> np.ndarray:
        return np.asarray(self.arc_center) + np.array([0.0, self.arc_radius])

    @property
    def line_length(self) -> float:
        return float(np.linalg.norm(np.asarray(self.line_end) - self.line_start))


class TraceRow(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int
    time: float
    state: np.ndarray
    input: np.ndarray
    reference: Tuple[float, float]
    prediction: Optional[np.ndarray] = None
    disturbance: np.ndarray
    plan_measured_at: int = -1
    events: List[str] = Field(default_factory=list)


class Handoff(BaseModel):
    step: int
    contained: bool
    deviation: float
    radius: float


class SimTrace(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    controller: str
    task: TaskKind
    seed: int
    delta: float
    rows: List[TraceRow] = Field(default_factory=list)
    final_state: Optional[np.ndarray] = None
    final_reference: Tuple[float, float] = (0.0, 0.0)
    solves: List[SolveRecord] = Field(default_factory=list)
    handoffs: List[Handoff] = Field(default_factory=list)
    compute_steps: int = 0
    info: Dict[str, Any] = Field(default_factory=dict)

    @property
    def states(self) -> np.ndarray:
        return np.vstack([r.state for r in self.rows] + [self.final_state])

    @property
    def inputs(self) -> np.ndarray:
        return np.vstack([r.input for r in self.rows])

    def to_frame(self) -> pd.DataFrame:
        records = []
        for r in self.rows:
            pred = r.prediction if r.prediction is not None else np.full(2, np.nan)
            records.append({
                "step": r.step, "time": r.time,
                "x": r.state[0], "y": r.state[1],
                "theta1": r.state[2], "theta2": r.state[3], "theta3": r.state[4],
                "u1": r.input[0], "u2": r.input[1], "u3": r.input[2],
                "x_ref": r.reference[0], "y_ref": r.reference[1],
                "pred_x": pred[0], "pred_y": pred[1],
                "disturbance_norm": float(np.linalg.norm(r.disturbance)),
                "plan_measured_at": r.plan_measured_at,
                "events": ";".join(r.events),
            })
        return pd.DataFrame.from_records(records, columns=list(TRACE_COLUMNS))


class Metrics(BaseModel):
    final_position_error: float = Field(ge=0.0)
    rms_tracking_error: float = Field(ge=0.0)
    cumulative_cost: float = Field(ge=0.0)
    max_constraint_violation: float = Field(ge=0.0)
    solve_time_stats: Dict[str, float] = Field(default_factory=dict)
    tube_containment_rate: float = Field(ge=0.0, le=1.0)
    handoffs: int = 0
    saturations: int = 0
    fallbacks: int = 0
    solve_failures: int = 0
    virtual_delay_s: float = 0.0


class SimConfig(BaseModel):
    duration: Optional[int] = Field(default=None, ge=1)
    disturbances: bool = True


# ---------------------- Tasks ----------------------

def default_duration(kind: TaskKind) -> int:
    return SIM_POSITION_STEPS if TaskKind(kind) == TaskKind.POSITION_REACH else SIM_TRAJECTORY_STEPS


def make_task(kind: Union[TaskKind, str], params: Optional[ArmParams] = None, delta: float = 0.1,
              duration: Optional[int] = None, **geometry) -> Task:
    params = params or ArmParams()
    kind = TaskKind(kind)
    x0 = initial_reach_state(params)
    check_task_initial(x0, params)
    return Task(kind=kind, initial=x0, duration=duration or default_duration(kind), delta=delta, **geometry)


def check_task_initial(x0, params: ArmParams) -> None:
    x0 = np.asarray(x0, dtype=float)
    if not params.state_box.contains(x0, tol=1e-12):
        raise ConstraintViolation("initial state outside the state box")
    gap = float(np.linalg.norm(forward_kinematics(x0[2:5], params) - x0[:2]))
    if gap > 1e-9:
        raise ValueError(f"initial position inconsistent with joint angles by {gap:.3g}")


def reference_path(task: Task, t: int) -> Tuple[float, float]:
    """Reference end-effector position at substep t (held after the path ends)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    t = min(t, task.duration)
    if task.kind == TaskKind.POSITION_REACH:
        return float(task.target[0]), float(task.target[1])
    s = task.speed * t * task.delta
    if s <= task.arc_length:
        phi = math.pi - s / task.arc_radius
        cx, cy = task.arc_center
        return cx + task.arc_radius * math.cos(phi), cy + task.arc_radius * math.sin(phi)
    s_line = min(s - task.arc_length, task.line_length)
    p0 = task.line_start
    p1 = np.asarray(task.line_end, dtype=float)
    frac = s_line / task.line_length if task.line_length > 0 else 1.0
    p = p0 + frac * (p1 - p0)
    return float(p[0]), float(p[1])


def reference_window(task: Task, start: int, N: int, n_state: int = 5) -> TrackingReference:
    states = np.zeros((N + 1, n_state))
    for i in range(N + 1):
        states[i, :2] = reference_path(task, start + i)
    mask = np.zeros(n_state, dtype=bool)
    mask[:2] = True
    return TrackingReference(states=states, mask=mask)


# ---------------------- Closed loop ----------------------

def run_closed_loop(controller: Controller, task: Task, plant: Plant, seed: int,
                    config: Optional[SimConfig] = None) -> SimTrace:
    config = config or SimConfig()
    T = config.duration or task.duration
    dt = task.delta
    rng = np.random.default_rng(seed)
    x = np.asarray(task.initial, dtype=float).copy()
    log("info", "run_start", controller=controller.name, task=task.kind.value, seed=seed, steps=T)

    controller.reset(x, 0)
    trace = SimTrace(controller=controller.name, task=task.kind, seed=seed, delta=dt,
                     compute_steps=controller.delay.compute_steps)
    for k in range(T):
        act: ControlAction = controller.act(k, x)
        u = np.asarray(act.u, dtype=float)
        if not plant.input_box.contains(u, tol=1e-12):
            raise ConstraintViolation(f"{controller.name} applied input outside the box at step {k}")
        w = _disturbance(rng, plant) if config.disturbances else np.zeros(plant.n)
        x_next = plant.step_real(x, u, dt, w)
        if not np.all(np.isfinite(x_next)):
            raise SimulationDiverged(f"state became non-finite at step {k + 1} ({controller.name}, seed {seed})")
        trace.rows.append(TraceRow(
            step=k, time=k * dt, state=x.copy(), input=u.copy(), reference=reference_path(task, k),
            prediction=None if act.nominal is None else np.asarray(act.nominal, dtype=float)[:2].copy(),
            disturbance=w, plan_measured_at=act.plan_measured_at, events=list(act.events),
        ))
        if act.handoff and act.contained is not None:
            trace.handoffs.append(Handoff(step=k, contained=act.contained, deviation=act.deviation,
                                          radius=act.radius))
        x = x_next
    trace.final_state = x
    trace.final_reference = reference_path(task, T)
    trace.solves = list(controller.solves)
    log("info", "run_done", controller=controller.name, task=task.kind.value, seed=seed,
        final_error=float(np.linalg.norm(np.subtract(position_of(x), trace.final_reference))))
    return trace


def _disturbance(rng: np.random.Generator, plant: Plant) -> np.ndarray:
    return sample_disturbance(rng, plant.eta1, plant.n)


# ---------------------- Metrics ----------------------

def compute_metrics(trace: SimTrace, task: Task, weights: CostWeights, plant: Optional[Plant] = None) -> Metrics:
    plant = plant or ArmPlant()
    X = trace.states
    U = trace.inputs
    T = U.shape[0]
    refs = np.array([reference_path(task, k) for k in range(T + 1)])
    pos_err = np.linalg.norm(X[:, :2] - refs, axis=1)

    cost = 0.0
    for k in range(T):
        e = np.zeros(X.shape[1])
        e[:2] = X[k, :2] - refs[k]
        cost += stage_cost(e, U[k], weights)

    viol = max(
        max((plant.state_box.violation(x) for x in X), default=0.0),
        max((plant.input_box.violation(u) for u in U), default=0.0),
    )
    times = np.array([s.solve_time for s in trace.solves], dtype=float)
    stats = {
        "mean": float(times.mean()) if times.size else 0.0,
        "max": float(times.max()) if times.size else 0.0,
        "total": float(times.sum()),
        "count": float(times.size),
    }
    contained = [h.contained for h in trace.handoffs]
    events = [e for r in trace.rows for e in r.events]
    return Metrics(
        final_position_error=float(np.linalg.norm(np.subtract(position_of(X[-1]), refs[-1]))),
        rms_tracking_error=float(np.sqrt(np.mean(pos_err ** 2))),
        cumulative_cost=float(cost),
        max_constraint_violation=float(viol),
        solve_time_stats=stats,
        tube_containment_rate=float(np.mean(contained)) if contained else 1.0,
        handoffs=len(contained),
        saturations=events.count("saturation"),
        fallbacks=events.count("fallback"),
        solve_failures=sum(1 for s in trace.solves if s.status not in ("optimal", "converged", "feasible")),
        virtual_delay_s=trace.compute_steps * trace.delta,
    )


# ---------------------- Writers ----------------------

def metrics_payload(metrics: Metrics, trace: SimTrace, extra: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    """Deterministic metrics document; wall-clock timing lives in timing.json."""
    body = metrics.model_dump(exclude={"solve_time_stats"})
    return to_jsonable({
        "schema_version": SCHEMA_VERSION,
        "controller": trace.controller,
        "task": trace.task.value,
        "seed": trace.seed,
        "steps": len(trace.rows),
        "metrics": body,
        **(extra or {}),
    })


def timing_payload(metrics: Metrics, trace: SimTrace) -> Dict[str, Any]:
    return to_jsonable({
        "schema_version": SCHEMA_VERSION,
        "controller": trace.controller,
        "task": trace.task.value,
        "seed": trace.seed,
        "solve_time_stats": metrics.solve_time_stats,
        "virtual_delay_s": metrics.virtual_delay_s,
    })


def write_trace_csv(trace: SimTrace, path: Union[str, Path]) -> Path:
    path = Path(path)
    trace.to_frame().to_csv(path, index=False, float_format="%.12g")
    return path


def read_trace_csv(path: Union[str, Path]) -> pd.DataFrame:
    df = pd.read_csv(path, keep_default_na=False, na_values=[""])
    if tuple(df.columns) != TRACE_COLUMNS:
        raise ValueError(f"{path}: unexpected trace header {list(df.columns)}")
    return df


def write_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    return path
