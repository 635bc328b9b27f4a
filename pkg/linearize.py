# linearize.py
"""
Per-interval linearization of the nominal arm model with an explicit bound on
the Taylor remainder. The remainder is bounded in continuous time and folded
into the discrete disturbance by the step length.
"""
from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from plant import (
    N_INPUT, N_STATE, ArmParams, LipschitzConstants, Plant, Region, RegionError,
    as_vec, dynamics, dynamics_bound, lipschitz_constants,
)

# rows of f with nonzero curvature (x and y)
CURVED_ROWS = 2


class LinearizedModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    A: np.ndarray
    B: np.ndarray
    A_c: np.ndarray
    B_c: np.ndarray
    offset_Omega: np.ndarray
    anchor_state: np.ndarray
    anchor_input: np.ndarray
    dt: float

    @property
    def offset_discrete(self) -> np.ndarray:
        return self.dt * self.offset_Omega

    def predict(self, x, u) -> np.ndarray:
        return self.A @ np.asarray(x, dtype=float) + self.B @ np.asarray(u, dtype=float) + self.offset_discrete


class ErrorBudget(BaseModel):
    model_config = ConfigDict(frozen=True)

    eta_H: float = Field(ge=0.0)
    eta1: float = Field(ge=0.0)
    eta2: float = Field(ge=0.0)
    eta: float = Field(ge=0.0)
    taylor_bound: float = Field(ge=0.0)
    eta_step: float = Field(ge=0.0)
    l1: float = Field(ge=0.0)
    l2: float = Field(ge=0.0)
    dx_radius: float = Field(ge=0.0)
    du_radius: float = Field(ge=0.0)
    offset_norm: float = Field(ge=0.0)


def jacobians(state, input, params: ArmParams) -> Tuple[np.ndarray, np.ndarray]:
    x = as_vec(state)
    w = as_vec(input)
    l = params.lengths
    th = x[2:5]
    s, c = np.sin(th), np.cos(th)
    A_c = np.zeros((N_STATE, N_STATE))
    A_c[0, 2:5] = -l * c * w
    A_c[1, 2:5] = -l * s * w
    B_c = np.zeros((N_STATE, N_INPUT))
    B_c[0, :] = -l * s
    B_c[1, :] = l * c
    B_c[2:5, :] = np.eye(N_INPUT)
    return A_c, B_c


def discretize(A_c, B_c, dt: float) -> Tuple[np.ndarray, np.ndarray]:
    if dt <= 0:
        raise ValueError("dt must be positive")
    A_c = np.asarray(A_c, dtype=float)
    B_c = np.asarray(B_c, dtype=float)
    return np.eye(A_c.shape[0]) + dt * A_c, dt * B_c


def linearize(plant: Plant, state, input, dt: float) -> LinearizedModel:
    x_hat = as_vec(state)
    u_hat = as_vec(input)
    A_c, B_c = plant.jacobians(x_hat, u_hat)
    A, B = discretize(A_c, B_c, dt)
    omega = plant.dynamics(x_hat, u_hat) - (A_c @ x_hat + B_c @ u_hat)
    return LinearizedModel(A=A, B=B, A_c=A_c, B_c=B_c, offset_Omega=omega,
                           anchor_state=x_hat.copy(), anchor_input=u_hat.copy(), dt=float(dt))


def residual(x, u, model: LinearizedModel, params: ArmParams) -> np.ndarray:
    """Continuous-time remainder f(x,u) - (A_c x + B_c u + Omega)."""
    x = as_vec(x)
    u = as_vec(u)
    return dynamics(x, u, params) - (model.A_c @ x + model.B_c @ u + model.offset_Omega)


def hessians(state, input, params: ArmParams) -> np.ndarray:
    """Second derivatives of each row of f w.r.t. z = (x, u); shape (5, 8, 8)."""
    x = as_vec(state)
    w = as_vec(input)
    l = params.lengths
    th = x[2:5]
    s, c = np.sin(th), np.cos(th)
    H = np.zeros((N_STATE, N_STATE + N_INPUT, N_STATE + N_INPUT))
    for i in range(N_INPUT):
        ti, wi = 2 + i, N_STATE + i
        # x-dot = -sum l s w
        H[0, ti, ti] = l[i] * s[i] * w[i]
        H[0, ti, wi] = H[0, wi, ti] = -l[i] * c[i]
        # y-dot = sum l c w
        H[1, ti, ti] = -l[i] * c[i] * w[i]
        H[1, ti, wi] = H[1, wi, ti] = -l[i] * s[i]
    return H


def hessian_bound(params: ArmParams, region: Optional[Region] = None) -> float:
    """
    Each curved row's Hessian is block diagonal with 2x2 blocks
    [[a, b], [b, 0]], |a| <= l|s||w|, |b| <= l|c|; its norm is <= |a| + |b| <= l sqrt(w^2 + 1).
    """
    region = region or params.region()
    ubox = region.input_box
    if not ubox.is_bounded():
        raise RegionError("input box must be bounded to bound the Hessian")
    wmax = ubox.abs_max()
    return float(np.max(params.lengths * np.sqrt(wmax ** 2 + 1.0)))


def linearization_error_bound(eta_H: float, lip: LipschitzConstants, dx_radius: float, du_radius: float,
                              offset_norm: float = 0.0) -> float:
    if dx_radius < 0 or du_radius < 0:
        raise ValueError("radii must be nonnegative")
    return float(offset_norm + eta_H * (lip.l1 * dx_radius + lip.l2 * du_radius))


def taylor_remainder_bound(eta_H: float, dx_radius: float, du_radius: float, rows: int = CURVED_ROWS) -> float:
    """Second-order Lagrange remainder over the ball, summed over curved rows."""
    return float(math.sqrt(rows) * 0.5 * eta_H * (dx_radius ** 2 + du_radius ** 2))


def total_disturbance(eta1: float, eta2: float) -> float:
    if eta1 < 0 or eta2 < 0:
        raise ValueError("disturbance bounds must be nonnegative")
    return float(eta1 + eta2)


def interval_radii(params: ArmParams, start_offset: float, steps: int, dt: float,
                   carried_radius: float = 0.0) -> Tuple[float, float]:
    """
    dx: distance from the anchor that any trajectory can reach over `steps`
    steps, du: diameter of the input box.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    fmax = dynamics_bound(params)
    dx = start_offset + carried_radius + steps * (dt * fmax + params.disturbance_bound_eta1)
    du = float(np.linalg.norm(params.input_box.hi - params.input_box.lo))
    return float(dx), du


def error_budget(params: ArmParams, model: LinearizedModel, dx_radius: float, du_radius: float,
                 region: Optional[Region] = None) -> ErrorBudget:
    region = region or params.region()
    lip = lipschitz_constants(params, region)
    eta_H = hessian_bound(params, region)
    offset_norm = float(np.linalg.norm(model.offset_Omega))
    eta2 = linearization_error_bound(eta_H, lip, dx_radius, du_radius, offset_norm)
    taylor = taylor_remainder_bound(eta_H, dx_radius, du_radius)
    eta1 = params.disturbance_bound_eta1
    # two remainders enter a real-vs-nominal deviation, each scaled by dt
    eta_step = total_disturbance(eta1, 2.0 * model.dt * max(eta2, taylor))
    return ErrorBudget(eta_H=eta_H, eta1=eta1, eta2=eta2, eta=total_disturbance(eta1, eta2),
                       taylor_bound=taylor, eta_step=eta_step, l1=lip.l1, l2=lip.l2,
                       dx_radius=dx_radius, du_radius=du_radius, offset_norm=offset_norm)
