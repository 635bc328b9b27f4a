# ocp.py
"""
Optimal control problems over a horizon of N steps.

Decision vector z = (u_0, ..., u_{N-1}, s): condensed inputs plus one
terminal slack. OCP 2 is the QP obtained from a fixed linear model; OCP 1
keeps the nominal nonlinear dynamics and is handed to the SQP solver. Both
share one constraint layout:

    inputs      u_i in the (tightened) input box
    states      bounded coordinates of x_i, i = 1..N, in the per-step boxes
    terminal    |(S e_N)_j| <= eps / sqrt(d) + s, S'S = P on tracked coordinates
    slack       s >= 0 (s = 0 in hard mode)
"""
from __future__ import annotations

import math
import time
from enum import Enum
from typing import Any, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from gains import CostWeights, GainSet
from linearize import LinearizedModel
from logs import log
from plant import Box, ConstraintViolation, Plant
from solver import NlpEval, NlpSpec, QpProblem, QpSettings, QpSolution, QpStatus, solve_nlp_sqp, solve_qp
from tube import DisturbedStateSet, InfeasibleTightening, TubeProfile


class TerminalMode(str, Enum):
    SOFT = "soft"
    HARD = "hard"
    NONE = "none"


class HorizonConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    delta: float = Field(default=0.1, gt=0.0)
    horizon_T: float = Field(default=3.0, gt=0.0)
    # "seconds": N = round(T / delta); "steps": N = T
    horizon_unit: Literal["seconds", "steps"] = "seconds"
    m_smooth: int = Field(default=3, ge=1)
    m_triggered: int = Field(default=28, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "HorizonConfig":
        N = self.N
        if N < 1:
            raise ValueError("horizon must contain at least one step")
        if self.m_smooth > N:
            raise ValueError(f"m_smooth={self.m_smooth} exceeds N={N}")
        if self.m_triggered > N:
            raise ValueError(f"m_triggered={self.m_triggered} exceeds N={N}")
        return self

    @property
    def N(self) -> int:
        if self.horizon_unit == "steps":
            return int(round(self.horizon_T))
        return int(round(self.horizon_T / self.delta))


class TrackingReference(BaseModel):
    """Per-step reference states for steps 0..N; only `mask` coordinates are penalised."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    states: np.ndarray
    mask: np.ndarray

    @model_validator(mode="after")
    def _check(self) -> "TrackingReference":
        if self.states.ndim != 2 or self.states.shape[1] != self.mask.shape[0]:
            raise ValueError("reference states must be (N+1) x n with n = len(mask)")
        return self

    @classmethod
    def constant(cls, state, steps: int, mask=None) -> "TrackingReference":
        state = np.asarray(state, dtype=float)
        mask = np.ones(state.shape[0], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        return cls(states=np.tile(state, (steps + 1, 1)), mask=mask)

    @property
    def steps(self) -> int:
        return self.states.shape[0] - 1

    def error(self, x, i: int) -> np.ndarray:
        return np.where(self.mask, np.asarray(x, dtype=float) - self.states[i], 0.0)


class OcpSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    nominal_inputs: np.ndarray
    nominal_states: np.ndarray
    cost: float
    objective: float
    slack: float = 0.0
    status: str
    solve_time: float
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status in (QpStatus.OPTIMAL.value, "converged", "feasible")

    @property
    def horizon(self) -> int:
        return int(self.nominal_inputs.shape[0])


# ---------------------- Costs ----------------------

def stage_cost(x_err, u, weights: CostWeights) -> float:
    e = np.asarray(x_err, dtype=float)
    u = np.asarray(u, dtype=float)
    if e.shape[0] != weights.Q.shape[0] or u.shape[0] != weights.R.shape[0]:
        raise ValueError("dimension mismatch between errors and weights")
    return float(e @ weights.Q @ e + u @ weights.R @ u)


def terminal_cost(x_err, weights: CostWeights) -> float:
    if weights.P is None:
        return 0.0
    e = np.asarray(x_err, dtype=float)
    return float(e @ weights.P @ e)


def horizon_cost(solution: OcpSolution, weights: CostWeights, reference: TrackingReference) -> float:
    X, U = solution.nominal_states, solution.nominal_inputs
    N = U.shape[0]
    if X.shape[0] != N + 1 or reference.steps < N:
        raise ValueError("inconsistent horizon lengths")
    total = sum(stage_cost(reference.error(X[i], i), U[i], weights) for i in range(N))
    return float(total + terminal_cost(reference.error(X[N], N), weights))


# ---------------------- Dynamics helpers ----------------------

def rollout_affine(A, B, c, x0, inputs) -> np.ndarray:
    inputs = np.asarray(inputs, dtype=float)
    X = np.empty((inputs.shape[0] + 1, A.shape[0]))
    X[0] = x0
    for i, u in enumerate(inputs):
        X[i + 1] = A @ X[i] + B @ u + c
    return X


def sensitivities(As: Sequence[np.ndarray], Bs: Sequence[np.ndarray]) -> np.ndarray:
    """dX_i/dU for i = 0..N, shape (N+1, n, m*N)."""
    N = len(As)
    n, m = Bs[0].shape
    G = np.zeros((N + 1, n, m * N))
    for i in range(N):
        G[i + 1] = As[i] @ G[i]
        G[i + 1][:, i * m:(i + 1) * m] += Bs[i]
    return G


def condense(A, B, c, x0, N: int) -> Tuple[np.ndarray, np.ndarray]:
    """Free response X(U=0) and the input sensitivity of the affine model."""
    m = B.shape[1]
    base = rollout_affine(A, B, c, x0, np.zeros((N, m)))
    return base, sensitivities([A] * N, [B] * N)


def _terminal_factor(P: Optional[np.ndarray], mask: np.ndarray) -> np.ndarray:
    """S with S'S = P restricted to tracked coordinates, zero-eigenvalue rows dropped."""
    t = np.nonzero(mask)[0]
    if P is None or t.size == 0:
        return np.zeros((0, t.size))
    Ptt = 0.5 * (P[np.ix_(t, t)] + P[np.ix_(t, t)].T)
    lam, V = np.linalg.eigh(Ptt)
    keep = lam > 1e-12 * max(1.0, float(np.max(lam)))
    return (np.sqrt(lam[keep])[:, None] * V[:, keep].T)


# ---------------------- Shared layout ----------------------

class _Layout:
    """Cost and constraint maps of z = (U, s) given a state trajectory and its sensitivity."""

    def __init__(self, n: int, m: int, N: int, state_boxes: Sequence[Box], input_box: Box,
                 weights: CostWeights, reference: TrackingReference, epsilon: Optional[float],
                 terminal_mode: TerminalMode):
        self.n, self.m, self.N = n, m, N
        self.dim = m * N + 1
        self.weights = weights
        self.reference = reference
        self.terminal_mode = TerminalMode(terminal_mode)
        M = reference.mask.astype(float)
        W = np.empty((N + 1, n, n))
        W[:N] = (M[:, None] * weights.Q * M[None, :])
        P = weights.P if weights.P is not None else np.zeros((n, n))
        W[N] = M[:, None] * P * M[None, :]
        self.W = W
        self.R_bar = np.kron(np.eye(N), weights.R)

        self.input_box = input_box
        self.state_rows: List[Tuple[int, np.ndarray, np.ndarray, np.ndarray]] = []
        for i in range(1, N + 1):
            box = state_boxes[i]
            idx = np.nonzero(np.isfinite(box.lo) | np.isfinite(box.hi))[0]
            if idx.size:
                self.state_rows.append((i, idx, box.lo[idx], box.hi[idx]))

        self.tracked = np.nonzero(reference.mask)[0]
        use_terminal = self.terminal_mode != TerminalMode.NONE and epsilon is not None
        self.S = _terminal_factor(weights.P, reference.mask) if use_terminal else np.zeros((0, self.tracked.size))
        self.term_bound = float(epsilon) / math.sqrt(self.S.shape[0]) if self.S.shape[0] else 0.0
        self._bounds()

    @property
    def n_constraints(self) -> int:
        return self.lower.shape[0]

    def _bounds(self) -> None:
        lo = [np.tile(self.input_box.lo, self.N)]
        hi = [np.tile(self.input_box.hi, self.N)]
        for _, _, blo, bhi in self.state_rows:
            lo.append(blo)
            hi.append(bhi)
        d = self.S.shape[0]
        if d:
            r = self.S @ self.reference.states[self.N][self.tracked]
            lo += [np.full(d, -np.inf), -self.term_bound + r]
            hi += [self.term_bound + r, np.full(d, np.inf)]
        lo.append(np.zeros(1))
        hi.append(np.zeros(1) if self.terminal_mode == TerminalMode.HARD or not d else np.full(1, np.inf))
        self.lower = np.concatenate(lo)
        self.upper = np.concatenate(hi)

    def split(self, z) -> Tuple[np.ndarray, float]:
        z = np.asarray(z, dtype=float)
        return z[:-1].reshape(self.N, self.m), float(z[-1])

    def join(self, U, s: float = 0.0) -> np.ndarray:
        return np.concatenate([np.asarray(U, dtype=float).reshape(-1), [s]])

    def cons(self, X, U, s: float) -> np.ndarray:
        out = [np.asarray(U, dtype=float).reshape(-1)]
        for i, idx, _, _ in self.state_rows:
            out.append(X[i][idx])
        d = self.S.shape[0]
        if d:
            w = self.S @ X[self.N][self.tracked]
            out += [w - s, w + s]
        out.append(np.array([s]))
        return np.concatenate(out)

    def jac(self, G: np.ndarray) -> np.ndarray:
        mN = self.m * self.N
        rows = [np.hstack([np.eye(mN), np.zeros((mN, 1))])]
        for i, idx, _, _ in self.state_rows:
            rows.append(np.hstack([G[i][idx], np.zeros((idx.size, 1))]))
        d = self.S.shape[0]
        if d:
            SG = self.S @ G[self.N][self.tracked]
            rows += [np.hstack([SG, -np.ones((d, 1))]), np.hstack([SG, np.ones((d, 1))])]
        last = np.zeros((1, mN + 1))
        last[0, -1] = 1.0
        rows.append(last)
        return np.vstack(rows)

    def cost(self, X, U, s: float) -> float:
        E = X - self.reference.states[: self.N + 1]
        track = float(np.einsum("ia,iab,ib->", E, self.W, E))
        Uf = np.asarray(U, dtype=float).reshape(-1)
        return track + float(Uf @ self.R_bar @ Uf) + self.weights.slack_weight * s * s

    def grad(self, X, U, s: float, G: np.ndarray) -> np.ndarray:
        E = X - self.reference.states[: self.N + 1]
        gU = 2.0 * np.einsum("iak,iab,ib->k", G, self.W, E) + 2.0 * self.R_bar @ np.asarray(U, dtype=float).reshape(-1)
        return np.concatenate([gU, [2.0 * self.weights.slack_weight * s]])

    def hess(self, G: np.ndarray) -> np.ndarray:
        HU = 2.0 * np.einsum("iak,iab,ibl->kl", G, self.W, G) + 2.0 * self.R_bar
        H = np.zeros((self.dim, self.dim))
        H[:-1, :-1] = 0.5 * (HU + HU.T)
        H[-1, -1] = 2.0 * self.weights.slack_weight
        return H

    def slack_for(self, X) -> float:
        """Smallest slack making the terminal rows hold for trajectory X."""
        if not self.S.shape[0] or self.terminal_mode == TerminalMode.HARD:
            return 0.0
        w = self.S @ (X[self.N][self.tracked] - self.reference.states[self.N][self.tracked])
        return float(max(0.0, float(np.max(np.abs(w))) - self.term_bound))


def _check_boxes(tube: TubeProfile, N: int) -> Tuple[List[Box], Box]:
    if tube.infeasible:
        raise InfeasibleTightening(f"tightened constraints empty at step {tube.infeasible_step}",
                                   step=int(tube.infeasible_step or 0))
    if len(tube.per_step_state_boxes) < N + 1:
        raise ValueError(f"tube covers {len(tube.per_step_state_boxes) - 1} steps, horizon needs {N}")
    boxes = list(tube.per_step_state_boxes[: N + 1])
    for i, b in enumerate(boxes):
        if b is None:
            raise InfeasibleTightening(f"tightened state box empty at step {i}", step=i)
    if tube.tightened_input_box is None:
        raise InfeasibleTightening("tightened input box empty", step=0)
    return boxes, tube.tightened_input_box


# ---------------------- OCP 2 ----------------------

class Ocp2(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    qp: QpProblem
    model: LinearizedModel
    x0: np.ndarray
    horizon: HorizonConfig
    layout: Any

    def solution(self, sol: QpSolution) -> OcpSolution:
        U, s = self.layout.split(sol.primal)
        X = rollout_affine(self.model.A, self.model.B, self.model.offset_discrete, self.x0, U)
        cost = self.layout.cost(X, U, 0.0)
        return OcpSolution(nominal_inputs=U, nominal_states=X, cost=cost, objective=sol.objective, slack=s,
                           status=sol.status.value, solve_time=sol.solve_time, iterations=sol.iterations)


def build_ocp2(linearized: LinearizedModel, tube: TubeProfile, initial: DisturbedStateSet, gains: GainSet,
               weights: CostWeights, horizon: HorizonConfig, reference: TrackingReference,
               terminal_mode: TerminalMode = TerminalMode.SOFT) -> Ocp2:
    """Condensed QP with the nominal initial state fixed at the centre of the predictive set."""
    N = horizon.N
    if reference.steps < N:
        raise ValueError(f"reference covers {reference.steps} steps, horizon needs {N}")
    boxes, u_box = _check_boxes(tube, N)
    A, B, c = linearized.A, linearized.B, linearized.offset_discrete
    n, m = B.shape
    x0 = np.asarray(initial.center, dtype=float)
    w = weights if weights.P is not None else weights.with_terminal(gains.P)
    layout = _Layout(n, m, N, boxes, u_box, w, reference, gains.epsilon, terminal_mode)
    base, G = condense(A, B, c, x0, N)
    zero = np.zeros(m * N)
    cons0 = layout.cons(base, zero, 0.0)
    qp = QpProblem.build(
        H=layout.hess(G), g=layout.grad(base, zero, 0.0, G), C=layout.jac(G),
        lower=layout.lower - cons0, upper=layout.upper - cons0, constant=layout.cost(base, zero, 0.0),
    )
    return Ocp2(qp=qp, model=linearized, x0=x0, horizon=horizon, layout=layout)


def solve_ocp2(ocp: Ocp2, warm_start: Optional[np.ndarray] = None,
               settings: Optional[QpSettings] = None) -> OcpSolution:
    ws = (warm_start, None) if warm_start is not None else None
    sol = solve_qp(ocp.qp, ws, settings)
    if not sol.ok:
        log("warn", "ocp_infeasible", kind="ocp2", status=sol.status.value, certificate=sol.certificate)
    return ocp.solution(sol)


def shifted_guess(solution: OcpSolution, shift: int) -> np.ndarray:
    """Previous plan moved `shift` steps forward, zero-padded, slack zero."""
    U = solution.nominal_inputs
    out = np.zeros_like(U)
    if shift < U.shape[0]:
        out[: U.shape[0] - shift] = U[shift:]
    return np.concatenate([out.reshape(-1), [0.0]])


# ---------------------- OCP 1 ----------------------

class Ocp1Nlp(NlpSpec):
    """Nominal nonlinear dynamics rolled forward from x0 with forward Euler."""

    def __init__(self, plant: Plant, x0: np.ndarray, horizon: HorizonConfig, layout: _Layout):
        self.plant = plant
        self.x0 = x0
        self.horizon = horizon
        self.layout = layout

    @property
    def dim(self) -> int:
        return self.layout.dim

    def trajectory(self, U) -> np.ndarray:
        return self.plant.rollout(self.x0, U, self.horizon.delta)

    def evaluate(self, z: np.ndarray, derivatives: bool = True) -> NlpEval:
        lay = self.layout
        U, s = lay.split(z)
        X = self.trajectory(U)
        if not np.all(np.isfinite(X)):
            inf = np.full(lay.n_constraints, np.inf)
            return NlpEval(cost=float("inf"), cons=inf, lower=lay.lower, upper=lay.upper)
        ev = NlpEval(cost=lay.cost(X, U, s), cons=lay.cons(X, U, s), lower=lay.lower, upper=lay.upper)
        if derivatives:
            dt = self.horizon.delta
            As, Bs = [], []
            for i in range(lay.N):
                A_c, B_c = self.plant.jacobians(X[i], U[i])
                As.append(np.eye(lay.n) + dt * A_c)
                Bs.append(dt * B_c)
            G = sensitivities(As, Bs)
            ev.grad = lay.grad(X, U, s, G)
            ev.hess = lay.hess(G)
            ev.jac = lay.jac(G)
        return ev

    def initial_guess(self, inputs=None) -> np.ndarray:
        U = np.zeros((self.layout.N, self.layout.m)) if inputs is None else np.asarray(inputs, dtype=float)
        U = self.layout.input_box.clip(U)
        return self.layout.join(U, self.layout.slack_for(self.trajectory(U)))


def build_ocp1(plant: Plant, x0, weights: CostWeights, horizon: HorizonConfig, reference: TrackingReference,
               tightening: TubeProfile, gains: Optional[GainSet] = None,
               terminal_mode: TerminalMode = TerminalMode.SOFT) -> Ocp1Nlp:
    x0 = np.asarray(x0.as_array() if hasattr(x0, "as_array") else x0, dtype=float)
    if not np.all(np.isfinite(x0)):
        raise ValueError("x0 must be finite")
    if not plant.state_box.contains(x0, tol=1e-9):
        raise ConstraintViolation(f"x0 outside the state box by {plant.state_box.violation(x0):.3g}")
    N = horizon.N
    if reference.steps < N:
        raise ValueError(f"reference covers {reference.steps} steps, horizon needs {N}")
    boxes, u_box = _check_boxes(tightening, N)
    w = weights
    epsilon = None
    if gains is not None:
        epsilon = gains.epsilon
        if weights.P is None:
            w = weights.with_terminal(gains.P)
    layout = _Layout(plant.n, plant.m, N, boxes, u_box, w, reference, epsilon, terminal_mode)
    return Ocp1Nlp(plant, x0, horizon, layout)


def solve_ocp1(nlp: Ocp1Nlp, initial_inputs=None, settings: Optional[QpSettings] = None) -> OcpSolution:
    t0 = time.perf_counter()
    res = solve_nlp_sqp(nlp, nlp.initial_guess(initial_inputs), settings=settings)
    U, s = nlp.layout.split(res.z)
    X = nlp.trajectory(U)
    status = "converged" if res.status == "converged" else (
        "feasible" if res.violation <= 1e-6 else res.status)
    return OcpSolution(nominal_inputs=U, nominal_states=X, cost=nlp.layout.cost(X, U, 0.0), objective=res.cost,
                       slack=s, status=status, solve_time=time.perf_counter() - t0, iterations=res.iterations)
