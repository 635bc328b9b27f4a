# run_config.py
"""
Run configuration: env defaults, KEY=value files and CLI overrides, validated
into one RunConfig. Precedence: overrides > file > env.

Env:
- BENCH_OUTPUT_DIR (default: ./bench_out)
- BENCH_WORKERS (default: 1)
"""
from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from controllers import CONTROLLERS
from gains import SLACK_WEIGHT, TERMINAL_SAMPLES, CostWeights, default_weights
from ocp import HorizonConfig, TerminalMode
from plant import DEFAULT_ETA1, DEFAULT_LINK_LENGTHS, ArmParams, ArmPlant, Box, default_state_box
from sim import Task, TaskKind, make_task
from tube import TighteningMode

BENCH_OUTPUT_DIR = os.getenv("BENCH_OUTPUT_DIR", "./bench_out")
BENCH_WORKERS = int(os.getenv("BENCH_WORKERS", "1"))


def _split(v: Any) -> Any:
    if isinstance(v, str):
        return [p.strip() for p in v.split(",") if p.strip()]
    return v


def parse_seeds(v: Any) -> List[int]:
    """'0,3,7' or '0-4' (inclusive) or a list of ints."""
    if isinstance(v, int):
        return [v]
    out: List[int] = []
    for part in _split(v) or []:
        if isinstance(part, int):
            out.append(part)
            continue
        part = str(part)
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    task: TaskKind = TaskKind.POSITION_REACH
    controllers: List[str] = Field(default_factory=lambda: ["ideal", "triggered", "smooth"])
    seeds: List[int] = Field(default_factory=lambda: [0])

    link_lengths: Tuple[float, float, float] = DEFAULT_LINK_LENGTHS
    eta1: float = Field(default=DEFAULT_ETA1, ge=0.0)
    input_limit: float = Field(default=math.pi / 16, gt=0.0)
    # joint-angle box; x and y stay unbounded
    theta_lower: Tuple[float, float, float] = tuple(default_state_box().lower[2:])
    theta_upper: Tuple[float, float, float] = tuple(default_state_box().upper[2:])

    delta: float = Field(default=0.1, gt=0.0)
    horizon_t: float = Field(default=3.0, gt=0.0)
    horizon_unit: str = "seconds"
    m_smooth: int = Field(default=3, ge=1)
    m_triggered: int = Field(default=28, ge=0)

    q: float = Field(default=0.1, ge=0.0)
    r: float = Field(default=0.01, gt=0.0)
    slack_weight: float = Field(default=SLACK_WEIGHT, gt=0.0)
    terminal_mode: TerminalMode = TerminalMode.SOFT
    tightening: TighteningMode = TighteningMode.STATE
    terminal_samples: int = Field(default=TERMINAL_SAMPLES, ge=1)

    duration: Optional[int] = Field(default=None, ge=1)
    speed: float = Field(default=0.15, gt=0.0)
    line_end: Tuple[float, float] = (3.5, 4.5)
    target: Tuple[float, float] = (2.0, 6.0)

    output_dir: str = BENCH_OUTPUT_DIR
    workers: int = Field(default=BENCH_WORKERS, ge=1)
    write_trace: bool = True

    @field_validator("controllers", mode="before")
    @classmethod
    def _controllers(cls, v):
        names = _split(v)
        unknown = [n for n in names if n not in CONTROLLERS]
        if unknown:
            raise ValueError(f"unknown controller(s) {unknown}, expected {sorted(CONTROLLERS)}")
        if not names:
            raise ValueError("at least one controller is required")
        return names

    @field_validator("seeds", mode="before")
    @classmethod
    def _seeds(cls, v):
        seeds = parse_seeds(v)
        if not seeds:
            raise ValueError("at least one seed is required")
        return seeds

    @field_validator("link_lengths", "theta_lower", "theta_upper", "line_end", "target", mode="before")
    @classmethod
    def _tuple(cls, v):
        return tuple(float(p) for p in _split(v)) if isinstance(v, str) else v

    @field_validator("horizon_unit")
    @classmethod
    def _unit(cls, v):
        if v not in ("seconds", "steps"):
            raise ValueError("horizon_unit must be 'seconds' or 'steps'")
        return v

    @model_validator(mode="after")
    def _angle_box(self) -> "RunConfig":
        if any(lo > hi for lo, hi in zip(self.theta_lower, self.theta_upper)):
            raise ValueError(f"theta_lower {self.theta_lower} exceeds theta_upper {self.theta_upper}")
        return self

    # ----- domain objects -----

    def state_box(self) -> Box:
        inf = float("inf")
        return Box(lower=(-inf, -inf, *self.theta_lower), upper=(inf, inf, *self.theta_upper))

    def arm_params(self) -> ArmParams:
        w = self.input_limit
        return ArmParams(link_lengths=self.link_lengths, state_box=self.state_box(),
                         input_box=Box(lower=(-w, -w, -w), upper=(w, w, w)),
                         disturbance_bound_eta1=self.eta1)

    def plant(self) -> ArmPlant:
        return ArmPlant(self.arm_params())

    def weights(self) -> CostWeights:
        return default_weights(q=self.q, r=self.r, slack_weight=self.slack_weight)

    def horizon(self) -> HorizonConfig:
        return HorizonConfig(delta=self.delta, horizon_T=self.horizon_t, horizon_unit=self.horizon_unit,
                             m_smooth=self.m_smooth, m_triggered=self.m_triggered)

    def make_task(self, kind: Optional[Union[TaskKind, str]] = None) -> Task:
        return make_task(kind or self.task, self.arm_params(), delta=self.delta, duration=self.duration,
                         speed=self.speed, line_end=self.line_end, target=self.target)

    def summary(self) -> Dict[str, Any]:
        return self.model_dump(mode="json", exclude={"output_dir", "workers"})


def load_key_values(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    values = dotenv_values(path)
    return {k.strip().lower(): v for k, v in values.items() if v is not None}


def load_run_config(path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    data: Dict[str, Any] = {}
    if path is not None:
        data.update(load_key_values(path))
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k.lower()] = v
    return RunConfig.model_validate(data)
