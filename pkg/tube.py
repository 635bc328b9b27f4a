# tube.py
"""
Deviation tubes around nominal plans.

The real state and the nominal prediction drift apart by at most
sum_{j<m} lambda_bar^j * eta after m steps. That radius defines the
predictive disturbed state set (a 2-norm ball around the nominal prediction)
and the margins used to tighten the state and input boxes of the OCPs.
"""
from __future__ import annotations

import math
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from logs import log
from plant import Box, ControlError


class InfeasibleTightening(ControlError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


class TighteningMode(str, Enum):
    # state boxes with eta1, input box kept, ancillary feedback saturated
    STATE = "state"
    # state and input boxes, eta1
    FULL = "full"
    # state and input boxes, certified per-step eta
    CERTIFIED = "certified"
    NONE = "none"


class Tightening(BaseModel):
    model_config = ConfigDict(frozen=True)

    box: Optional[Box] = None
    margin: float = Field(ge=0.0)
    infeasible: bool = False


class TubeProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_bar: float = Field(ge=0.0)
    eta: float = Field(ge=0.0)
    radii: Tuple[float, ...]
    per_step_state_boxes: Tuple[Optional[Box], ...]
    tightened_input_box: Optional[Box] = None
    mode: TighteningMode = TighteningMode.STATE
    infeasible: bool = False
    infeasible_step: Optional[int] = None

    def require_feasible(self) -> "TubeProfile":
        if self.infeasible:
            raise InfeasibleTightening(f"tightened constraints empty at step {self.infeasible_step}",
                                       step=int(self.infeasible_step or 0))
        return self


class DisturbedStateSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    center: np.ndarray
    radius: float = Field(ge=0.0)

    def contains(self, x, tol: float = 1e-12) -> bool:
        d = np.asarray(x, dtype=float) - self.center
        return bool(np.linalg.norm(d) <= self.radius + tol)

    def distance(self, x) -> float:
        return float(np.linalg.norm(np.asarray(x, dtype=float) - self.center))


# ---------------------- Bounds ----------------------

def max_eigenvalue_modulus(A) -> float:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    if not np.all(np.isfinite(A)):
        raise ValueError("A has non-finite entries")
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def deviation_bound(lambda_bar: float, m: int, eta: float) -> float:
    if m < 0:
        raise ValueError("m must be nonnegative")
    if eta < 0 or lambda_bar < 0:
        raise ValueError("lambda_bar and eta must be nonnegative")
    if m == 0:
        return 0.0
    if abs(lambda_bar - 1.0) < 1e-12:
        return float(m * eta)
    return float((lambda_bar ** m - 1.0) / (lambda_bar - 1.0) * eta)


def predictive_state_set(nominal_prediction, radius: float) -> DisturbedStateSet:
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    center = nominal_prediction.as_array() if hasattr(nominal_prediction, "as_array") else nominal_prediction
    return DisturbedStateSet(center=np.asarray(center, dtype=float).copy(), radius=float(radius))


def tube_growth_factor(A, B=None, K=None) -> float:
    """
    Upper bound on the one-step gain of the deviation recursion. Spectral
    radius alone is not a norm bound for non-normal A, so ||A||_2 caps it.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    lam = max(max_eigenvalue_modulus(A), float(np.linalg.norm(A, 2)))
    if B is not None and K is not None:
        lam += float(np.linalg.norm(np.atleast_2d(B), 2) * np.linalg.norm(np.atleast_2d(K), 2))
    return lam


# ---------------------- Tightening ----------------------

def _shrink(box: Box, margin: float) -> Tightening:
    lo = box.lo + margin
    hi = box.hi - margin
    if np.any(lo > hi):
        return Tightening(box=None, margin=margin, infeasible=True)
    return Tightening(box=Box(lower=tuple(lo), upper=tuple(hi)), margin=margin)


def state_margin(i: int, eta: float, l: float) -> float:
    if i < 0:
        raise ValueError("step index must be nonnegative")
    if eta < 0 or l < 0:
        raise ValueError("eta and l must be nonnegative")
    return float(i * eta * (1.0 + l) ** i)


def tighten_state_box(box: Box, i: int, eta: float, l: float) -> Tightening:
    return _shrink(box, state_margin(i, eta, l))


def tighten_input_box(box: Box, K, tube_radius: float) -> Tightening:
    if tube_radius < 0:
        raise ValueError("tube_radius must be nonnegative")
    margin = float(np.linalg.norm(np.atleast_2d(K), 2) * tube_radius)
    return _shrink(box, margin)


def build_tube_profile(A, B, K, state_box: Box, input_box: Box, horizon: int, eta: float, l: float,
                       index_cap: Optional[int] = None, mode: TighteningMode = TighteningMode.STATE,
                       eta_certified: Optional[float] = None) -> TubeProfile:
    """
    Radii for steps 0..horizon and the tightened boxes for every step of an
    OCP horizon. The index used for tightening is capped at `index_cap`
    because a plan never runs longer than that before it is replaced.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    mode = TighteningMode(mode)
    lam = tube_growth_factor(A, B, K)
    eta_tight = eta_certified if (mode == TighteningMode.CERTIFIED and eta_certified is not None) else eta
    radii = tuple(deviation_bound(lam, i, eta_tight) for i in range(horizon + 1))
    cap = horizon if index_cap is None else max(0, min(index_cap, horizon))

    boxes: List[Optional[Box]] = []
    bad_step: Optional[int] = None
    for i in range(horizon + 1):
        if mode == TighteningMode.NONE:
            boxes.append(state_box)
            continue
        t = tighten_state_box(state_box, min(i, cap), eta_tight, l)
        boxes.append(t.box)
        if t.infeasible and bad_step is None:
            bad_step = i

    u_box: Optional[Box] = input_box
    if mode in (TighteningMode.FULL, TighteningMode.CERTIFIED):
        t = tighten_input_box(input_box, K, radii[cap])
        u_box = t.box
        if t.infeasible and bad_step is None:
            bad_step = 0

    if bad_step is not None:
        log("warn", "tightening_infeasible", step=bad_step, mode=mode.value, eta=eta_tight, l=l, lambda_bar=lam)
    return TubeProfile(lambda_bar=lam, eta=eta_tight, radii=radii, per_step_state_boxes=tuple(boxes),
                       tightened_input_box=u_box, mode=mode, infeasible=bad_step is not None,
                       infeasible_step=bad_step)


def saturate(u, box: Box) -> Tuple[np.ndarray, bool]:
    u = np.asarray(u, dtype=float)
    clipped = box.clip(u)
    return clipped, bool(not math.isclose(float(np.max(np.abs(clipped - u), initial=0.0)), 0.0, abs_tol=1e-15))
