"""
Plant models
------------
Generic perturbed discrete-time plant interface plus the 3-link planar arm
whose end-effector kinematics drive every benchmark task.

State  x = (x, y, theta1, theta2, theta3)   absolute link angles
Input  u = (omega1, omega2, omega3)         rad/s
Step   x+ = x + dt * f(x, u) + w,  ||w||_2 <= eta1

Env:
- PLANT_CHECKS (default: 0) enables disturbance-norm and finiteness checks
"""

from __future__ import annotations

import os
import math
from abc import ABC, abstractmethod
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

PLANT_CHECKS = os.getenv("PLANT_CHECKS", "0").lower() in ("1", "true", "yes", "on")

N_STATE = 5
N_INPUT = 3

DEFAULT_LINK_LENGTHS = (math.sqrt(5.0), math.sqrt(5.0), math.sqrt(10.0))
DEFAULT_ETA1 = 0.01


# ---------------------- Errors ----------------------

class ControlError(RuntimeError):
    """Root of every domain failure raised by this package."""


class ConstraintViolation(ControlError):
    pass


class RegionError(ControlError):
    pass


# ---------------------- Models ----------------------

class Box(BaseModel):
    model_config = ConfigDict(frozen=True)

    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    @model_validator(mode="after")
    def _check_order(self) -> "Box":
        if len(self.lower) != len(self.upper):
            raise ValueError("box lower/upper must have the same length")
        for lo, hi in zip(self.lower, self.upper):
            if math.isnan(lo) or math.isnan(hi):
                raise ValueError("box bounds must not be NaN")
            if lo > hi:
                raise ValueError(f"box lower {lo} exceeds upper {hi}")
        return self

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, dtype=float)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, v, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def violation(self, v) -> float:
        v = np.asarray(v, dtype=float)
        below = np.where(np.isfinite(self.lo), self.lo - v, 0.0)
        above = np.where(np.isfinite(self.hi), v - self.hi, 0.0)
        return float(max(0.0, np.max(below), np.max(above)))

    def clip(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lo, self.hi)

    def is_bounded(self, idx: Optional[Sequence[int]] = None) -> bool:
        lo, hi = self.lo, self.hi
        if idx is not None:
            lo, hi = lo[list(idx)], hi[list(idx)]
        return bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)))

    def abs_max(self) -> np.ndarray:
        return np.maximum(np.abs(self.lo), np.abs(self.hi))

    def scaled(self, factor: float) -> "Box":
        return Box(lower=tuple(self.lo * factor), upper=tuple(self.hi * factor))


def default_state_box() -> Box:
    inf = float("inf")
    return Box(lower=(-inf, -inf, math.pi / 2, 0.0, 0.0),
               upper=(inf, inf, math.pi, math.pi, math.pi / 2))


def default_input_box() -> Box:
    w = math.pi / 16
    return Box(lower=(-w, -w, -w), upper=(w, w, w))


class ArmParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    link_lengths: Tuple[float, float, float] = DEFAULT_LINK_LENGTHS
    state_box: Box = Field(default_factory=default_state_box)
    input_box: Box = Field(default_factory=default_input_box)
    disturbance_bound_eta1: float = Field(default=DEFAULT_ETA1, ge=0.0)

    @field_validator("link_lengths")
    @classmethod
    def _positive_links(cls, v):
        if any(not (l > 0.0) for l in v):
            raise ValueError("link_lengths must be positive")
        return v

    @model_validator(mode="after")
    def _check_dims(self) -> "ArmParams":
        if self.state_box.dim != N_STATE:
            raise ValueError(f"state_box must have {N_STATE} coordinates")
        if self.input_box.dim != N_INPUT:
            raise ValueError(f"input_box must have {N_INPUT} coordinates")
        return self

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.link_lengths, dtype=float)

    def region(self) -> "Region":
        return Region(state_box=self.state_box, input_box=self.input_box)


class Region(BaseModel):
    model_config = ConfigDict(frozen=True)

    state_box: Box
    input_box: Box


class ArmState(BaseModel):
    x: float
    y: float
    theta1: float
    theta2: float
    theta3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta1, self.theta2, self.theta3], dtype=float)

    @classmethod
    def from_array(cls, v) -> "ArmState":
        v = np.asarray(v, dtype=float)
        return cls(x=v[0], y=v[1], theta1=v[2], theta2=v[3], theta3=v[4])


class ArmInput(BaseModel):
    omega1: float
    omega2: float
    omega3: float

    def as_array(self) -> np.ndarray:
        return np.array([self.omega1, self.omega2, self.omega3], dtype=float)

    @classmethod
    def from_array(cls, v) -> "ArmInput":
        v = np.asarray(v, dtype=float)
        return cls(omega1=v[0], omega2=v[1], omega3=v[2])


class LipschitzConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    l1: float = Field(ge=0.0)
    l2: float = Field(ge=0.0)


StateLike = Union[ArmState, Sequence[float], np.ndarray]
InputLike = Union[ArmInput, Sequence[float], np.ndarray]


def as_vec(v) -> np.ndarray:
    if isinstance(v, (ArmState, ArmInput)):
        return v.as_array()
    return np.asarray(v, dtype=float)


# ---------------------- Arm kinematics ----------------------

def dynamics(state: StateLike, input: InputLike, params: ArmParams) -> np.ndarray:
    x = as_vec(state)
    w = as_vec(input)
    l = params.lengths
    th = x[2:5]
    s = np.sin(th)
    c = np.cos(th)
    out = np.empty(N_STATE)
    out[0] = -(l[0] * s[0] * w[0] + l[1] * s[1] * w[1] + l[2] * s[2] * w[2])
    out[1] = l[0] * c[0] * w[0] + l[1] * c[1] * w[1] + l[2] * c[2] * w[2]
    out[2:5] = w
    return out


def step_nominal(state: StateLike, input: InputLike, dt: float, params: ArmParams) -> np.ndarray:
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = as_vec(state)
    return x + dt * dynamics(x, input, params)


def step_real(state: StateLike, input: InputLike, dt: float, disturbance, params: ArmParams,
              check: Optional[bool] = None) -> np.ndarray:
    d = np.asarray(disturbance, dtype=float)
    if PLANT_CHECKS if check is None else check:
        bound = params.disturbance_bound_eta1
        if np.linalg.norm(d) > bound * (1.0 + 1e-12) + 1e-15:
            raise ConstraintViolation(f"disturbance norm {np.linalg.norm(d):.6g} exceeds eta1={bound:.6g}")
    return step_nominal(state, input, dt, params) + d


def forward_kinematics(thetas, params: ArmParams) -> np.ndarray:
    th = np.asarray(thetas, dtype=float)
    l = params.lengths
    return np.array([np.sum(l * np.cos(th)), np.sum(l * np.sin(th))])


def position_of(state: StateLike) -> Tuple[float, float]:
    x = as_vec(state)
    return float(x[0]), float(x[1])


def initial_reach_state(params: ArmParams) -> np.ndarray:
    # end-effector at (0, 4) for the default link lengths
    th = np.array([math.pi - math.atan(0.5), math.pi - math.atan(2.0), math.atan(1.0 / 3.0)])
    p = forward_kinematics(th, params)
    return np.concatenate([p, th])


def sample_disturbance(rng: np.random.Generator, eta1: float, n: int = N_STATE) -> np.ndarray:
    """Uniform direction on the sphere, magnitude uniform in [0, eta1]."""
    if eta1 <= 0.0:
        return np.zeros(n)
    d = rng.standard_normal(n)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        return np.zeros(n)
    return d / norm * (eta1 * rng.uniform(0.0, 1.0))


# ---------------------- Bounds ----------------------

def input_jacobian_norm(thetas, params: ArmParams) -> float:
    th = np.asarray(thetas, dtype=float)
    l = params.lengths
    B = np.vstack([-l * np.sin(th), l * np.cos(th), np.eye(N_INPUT)])
    return float(np.linalg.norm(B, 2))


def lipschitz_constants(params: ArmParams, region: Optional[Region] = None) -> LipschitzConstants:
    """
    Analytic moduli with ||f(x1,u1) - f(x2,u2)|| <= l1 ||x1-x2|| + l2 ||u1-u2||.
    l1 = sup ||df/dx|| <= sqrt(sum l_i^2 wmax_i^2); l2 = sup ||df/du|| <= ||B||_F.
    """
    region = region or params.region()
    sbox, ubox = region.state_box, region.input_box
    l = params.lengths
    th_lo, th_hi = sbox.lo[2:5], sbox.hi[2:5]
    angles_fixed = bool(np.all(th_lo == th_hi))
    if angles_fixed:
        l1 = 0.0
        l2 = input_jacobian_norm(th_lo, params)
    else:
        if not ubox.is_bounded():
            raise RegionError("input box must be bounded to bound the state-Lipschitz modulus")
        wmax = ubox.abs_max()
        l1 = float(np.sqrt(np.sum((l * wmax) ** 2)))
        l2 = float(np.sqrt(np.sum(l ** 2) + N_INPUT))
    return LipschitzConstants(l1=l1, l2=l2)


def dynamics_bound(params: ArmParams, input_box: Optional[Box] = None) -> float:
    """sup ||f|| over the input box: sqrt(sum l^2) ||w|| + ||w||."""
    ubox = input_box or params.input_box
    if not ubox.is_bounded():
        raise RegionError("input box must be bounded")
    wn = float(np.linalg.norm(ubox.abs_max()))
    return float(np.sqrt(np.sum(params.lengths ** 2)) * wn + wn)


# ---------------------- Generic plant ----------------------

class Plant(ABC):
    """x+ = x + dt * f(x, u) (+ w). Subclasses supply f and its Jacobians."""

    n: int
    m: int

    def __init__(self, state_box: Box, input_box: Box, eta1: float = 0.0):
        self.state_box = state_box
        self.input_box = input_box
        self.eta1 = float(eta1)

    @abstractmethod
    def dynamics(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def jacobians(self, x: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]: ...

    def step_nominal(self, x, u, dt: float) -> np.ndarray:
        if dt <= 0:
            raise ValueError("dt must be positive")
        x = np.asarray(x, dtype=float)
        return x + dt * self.dynamics(x, np.asarray(u, dtype=float))

    def step_real(self, x, u, dt: float, disturbance, check: Optional[bool] = None) -> np.ndarray:
        d = np.asarray(disturbance, dtype=float)
        if (PLANT_CHECKS if check is None else check) and np.linalg.norm(d) > self.eta1 * (1.0 + 1e-12) + 1e-15:
            raise ConstraintViolation(f"disturbance norm {np.linalg.norm(d):.6g} exceeds eta1={self.eta1:.6g}")
        return self.step_nominal(x, u, dt) + d

    def rollout(self, x0, inputs, dt: float) -> np.ndarray:
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float)).reshape(-1, self.m)
        xs = np.empty((len(inputs) + 1, self.n))
        xs[0] = x0
        for k, u in enumerate(inputs):
            xs[k + 1] = self.step_nominal(xs[k], u, dt)
        return xs


class ArmPlant(Plant):
    n = N_STATE
    m = N_INPUT

    def __init__(self, params: Optional[ArmParams] = None):
        self.params = params or ArmParams()
        super().__init__(self.params.state_box, self.params.input_box, self.params.disturbance_bound_eta1)

    def dynamics(self, x, u) -> np.ndarray:
        return dynamics(x, u, self.params)

    def jacobians(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        from linearize import jacobians
        return jacobians(x, u, self.params)


class LinearPlant(Plant):
    """f(x, u) = A_c x + B_c u; used where the linear model must be exact."""

    def __init__(self, A_c, B_c, state_box: Optional[Box] = None, input_box: Optional[Box] = None,
                 eta1: float = 0.0):
        self.A_c = np.atleast_2d(np.asarray(A_c, dtype=float))
        self.B_c = np.atleast_2d(np.asarray(B_c, dtype=float))
        self.n, self.m = self.B_c.shape
        if self.A_c.shape != (self.n, self.n):
            raise ValueError("A_c must be n x n with n = rows of B_c")
        inf = float("inf")
        state_box = state_box or Box(lower=(-inf,) * self.n, upper=(inf,) * self.n)
        input_box = input_box or Box(lower=(-inf,) * self.m, upper=(inf,) * self.m)
        super().__init__(state_box, input_box, eta1)

    def dynamics(self, x, u) -> np.ndarray:
        return self.A_c @ np.asarray(x, dtype=float) + self.B_c @ np.asarray(u, dtype=float)

    def jacobians(self, x, u) -> Tuple[np.ndarray, np.ndarray]:
        return self.A_c.copy(), self.B_c.copy()
