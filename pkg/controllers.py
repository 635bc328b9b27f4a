# controllers.py
"""
Closed-loop policies advanced one substep at a time by the simulator.

- IdealController: solves OCP 1 at every substep and applies the result at
  once (no computation delay).
- TriggeredController: samples every m_triggered substeps and applies the
  plan only after the solve finishes, m_triggered substeps later.
- SmoothController: one-step-ahead tube MPC. While the stored plan is being
  executed with tube feedback, the next plan is computed for the predicted
  state at the next handoff.

Delays are counted in substeps of virtual time; wall-clock solve times are
recorded but never change the inputs.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from gains import TERMINAL_SAMPLES, CostWeights, GainSet, TerminalSetEmpty, synthesize, terminal_radius
from linearize import LinearizedModel, error_budget, interval_radii, linearize
from logs import log
from ocp import (
    HorizonConfig, OcpSolution, TerminalMode, TrackingReference, build_ocp1, build_ocp2, shifted_guess,
    solve_ocp1, solve_ocp2,
)
from plant import ArmPlant, ControlError, Plant, lipschitz_constants
from solver import QpInfeasible, QpSettings
from tube import (
    DisturbedStateSet, TighteningMode, TubeProfile, build_tube_profile, deviation_bound, predictive_state_set,
    saturate, tube_growth_factor,
)


class DelayPolicy(str, Enum):
    BLOCK_AND_HOLD = "block_and_hold"
    APPLY_WHEN_READY = "apply_when_ready"


class DelayModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    compute_steps: int = Field(ge=0)
    policy: DelayPolicy = DelayPolicy.BLOCK_AND_HOLD


class PlanBuffer(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    inputs: np.ndarray
    nominal_states: np.ndarray
    anchor_time: int
    valid: bool = True
    # step whose measurement determined the plan (-1: offline bootstrap)
    measured_at: int = -1
    ready_at: int = 0
    K: Optional[np.ndarray] = None
    A: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    lin_state: Optional[np.ndarray] = None
    lin_input: Optional[np.ndarray] = None

    def covers(self, steps: int) -> bool:
        return self.valid and self.inputs.shape[0] >= steps

    def input_at(self, step: int) -> np.ndarray:
        j = step - self.anchor_time
        if j < 0:
            raise ValueError(f"step {step} precedes plan anchor {self.anchor_time}")
        if j >= self.inputs.shape[0]:
            return np.zeros(self.inputs.shape[1])
        return self.inputs[j]

    def shifted(self, shift: int, anchor_time: int) -> "PlanBuffer":
        """Remaining part of the plan, zero inputs once it runs out."""
        U, X = self.inputs, self.nominal_states
        N = U.shape[0]
        U2 = np.zeros_like(U)
        X2 = np.repeat(X[-1:], N + 1, axis=0)
        if shift < N:
            U2[: N - shift] = U[shift:]
            X2[: N + 1 - shift] = X[shift:]
        return self.model_copy(update={"inputs": U2, "nominal_states": X2, "anchor_time": anchor_time})


class SolveRecord(BaseModel):
    step: int
    kind: str
    solve_time: float
    iterations: int
    status: str


class ControlAction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    u: np.ndarray
    nominal: Optional[np.ndarray] = None
    plan_measured_at: int = -1
    events: List[str] = Field(default_factory=list)
    handoff: bool = False
    contained: Optional[bool] = None
    deviation: Optional[float] = None
    radius: Optional[float] = None
    solve: Optional[SolveRecord] = None


class ControllerContext(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    plant: Plant
    weights: CostWeights
    horizon: HorizonConfig
    # (start_step, N) -> reference for steps start..start+N
    reference: Callable[[int, int], TrackingReference]
    tightening: TighteningMode = TighteningMode.STATE
    terminal_mode: TerminalMode = TerminalMode.SOFT
    qp_settings: Optional[QpSettings] = None
    terminal_samples: int = TERMINAL_SAMPLES
    seed: int = 0


class Design(BaseModel):
    """Linear model, gains and tube for one linearization point."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: LinearizedModel
    gains: GainSet
    tube: TubeProfile
    eta_step: float
    lambda_bar: float


# ---------------------- Building blocks ----------------------

def tube_feedback_input(v, K, x, x_star, input_box=None) -> Tuple[np.ndarray, bool]:
    """u = v + K (x - x*), saturated to the input box when one is given."""
    v = np.asarray(v, dtype=float)
    u = v + np.asarray(K, dtype=float) @ (np.asarray(x, dtype=float) - np.asarray(x_star, dtype=float))
    if input_box is None:
        return u, False
    return saturate(u, input_box)


def state_lipschitz(plant: Plant) -> float:
    if isinstance(plant, ArmPlant):
        return lipschitz_constants(plant.params).l1
    A_c, _ = plant.jacobians(np.zeros(plant.n), np.zeros(plant.m))
    return float(np.linalg.norm(A_c, 2))


def certified_eta(plant: Plant, model: LinearizedModel, start_offset: float, steps: int) -> float:
    """Per-step bound on the real-vs-nominal deviation increment over `steps` substeps."""
    if not isinstance(plant, ArmPlant):
        return plant.eta1
    dx, du = interval_radii(plant.params, start_offset, steps, model.dt)
    return error_budget(plant.params, model, dx, du).eta_step


def design_at(ctx: ControllerContext, x_hat, u_hat, start_offset: float = 0.0) -> Design:
    plant, hz = ctx.plant, ctx.horizon
    model = linearize(plant, x_hat, u_hat, hz.delta)
    gains = synthesize(model.A, model.B, ctx.weights)
    try:
        eps = terminal_radius(gains, ctx.weights, plant.input_box, plant.state_box, model.A, model.B,
                              center=x_hat, samples=ctx.terminal_samples, seed=ctx.seed)
    except TerminalSetEmpty as e:
        log("warn", "terminal_radius", epsilon=0.0, reason=str(e))
        eps = 0.0
    gains = gains.with_epsilon(eps)
    eta_step = certified_eta(plant, model, start_offset, hz.m_smooth)
    tube = build_tube_profile(model.A, model.B, gains.K, plant.state_box, plant.input_box, hz.N,
                              eta=plant.eta1, l=state_lipschitz(plant), index_cap=hz.m_smooth,
                              mode=ctx.tightening, eta_certified=eta_step)
    lam = tube_growth_factor(model.A, model.B, gains.K)
    return Design(model=model, gains=gains, tube=tube, eta_step=eta_step, lambda_bar=lam)


# ---------------------- Controllers ----------------------

class Controller(ABC):
    name: str = "controller"

    def __init__(self, ctx: ControllerContext):
        self.ctx = ctx
        self.solves: List[SolveRecord] = []

    @property
    def delay(self) -> DelayModel:
        return DelayModel(compute_steps=0)

    @abstractmethod
    def reset(self, x0, step: int = 0) -> None: ...

    @abstractmethod
    def act(self, step: int, x) -> ControlAction: ...

    def _record(self, step: int, kind: str, sol: Optional[OcpSolution], status: Optional[str] = None,
                solve_time: float = 0.0) -> SolveRecord:
        rec = SolveRecord(step=step, kind=kind,
                          solve_time=sol.solve_time if sol is not None else solve_time,
                          iterations=sol.iterations if sol is not None else 0,
                          status=status or (sol.status if sol is not None else "failed"))
        self.solves.append(rec)
        return rec


class _Ocp1Mixin:
    """Shared OCP 1 solve for the ideal and time-triggered baselines."""

    ctx: ControllerContext

    def _setup_ocp1(self, x0) -> None:
        self.design = design_at(self.ctx, x0, np.zeros(self.ctx.plant.m))
        self.tube = self.design.tube.require_feasible()
        self.last_solution: Optional[OcpSolution] = None

    def _solve_ocp1(self, step: int, x, shift: int) -> Tuple[Optional[OcpSolution], Optional[str]]:
        hz = self.ctx.horizon
        ref = self.ctx.reference(step, hz.N)
        guess = None
        if self.last_solution is not None:
            guess = shifted_guess(self.last_solution, shift)[:-1].reshape(hz.N, -1)
        try:
            nlp = build_ocp1(self.ctx.plant, x, self.ctx.weights, hz, ref, self.tube, self.design.gains,
                             self.ctx.terminal_mode)
            sol = solve_ocp1(nlp, guess, self.ctx.qp_settings)
        except ControlError as e:
            log("warn", "ocp_infeasible", kind="ocp1", step=step, error=str(e)[:500])
            return None, type(e).__name__
        if not sol.ok:
            log("warn", "ocp_infeasible", kind="ocp1", step=step, status=sol.status)
            return None, sol.status
        self.last_solution = sol
        return sol, None


class IdealController(_Ocp1Mixin, Controller):
    name = "ideal"

    def reset(self, x0, step: int = 0) -> None:
        self.solves = []
        self._setup_ocp1(np.asarray(x0, dtype=float))
        self.u_prev = np.zeros(self.ctx.plant.m)

    def act(self, step: int, x) -> ControlAction:
        # zero delay: the plan is applied at its own measurement step
        sol, err = self._solve_ocp1(step, x, shift=1)
        if sol is None:
            rec = self._record(step, "ocp1", None, status=err or "failed")
            return ControlAction(u=self.u_prev, plan_measured_at=step, events=["hold"], solve=rec)
        rec = self._record(step, "ocp1", sol)
        self.u_prev = self.ctx.plant.input_box.clip(sol.nominal_inputs[0])
        return ControlAction(u=self.u_prev, nominal=sol.nominal_states[0], plan_measured_at=step,
                             events=["solve"], solve=rec)


class TriggeredController(_Ocp1Mixin, Controller):
    name = "triggered"

    def __init__(self, ctx: ControllerContext, policy: DelayPolicy = DelayPolicy.BLOCK_AND_HOLD):
        super().__init__(ctx)
        self.policy = DelayPolicy(policy)

    @property
    def delay(self) -> DelayModel:
        return DelayModel(compute_steps=self.ctx.horizon.m_triggered, policy=self.policy)

    def reset(self, x0, step: int = 0) -> None:
        self.solves = []
        self._setup_ocp1(np.asarray(x0, dtype=float))
        self.start = step
        self.u_prev = np.zeros(self.ctx.plant.m)
        # step -> (input, measured_at)
        self.schedule: dict = {}

    def act(self, step: int, x) -> ControlAction:
        m = self.ctx.horizon.m_triggered
        period = max(m, 1)
        events: List[str] = []
        rec = None
        if (step - self.start) % period == 0:
            sol, err = self._solve_ocp1(step, x, shift=period)
            if sol is None:
                rec = self._record(step, "ocp1", None, status=err or "failed")
                events.append("solve_failed")
            else:
                rec = self._record(step, "ocp1", sol)
                events.append("sample")
                offset = m if self.policy == DelayPolicy.APPLY_WHEN_READY else 0
                for j in range(period):
                    idx = offset + j
                    u = sol.nominal_inputs[idx] if idx < sol.horizon else np.zeros(self.ctx.plant.m)
                    self.schedule[step + m + j] = (self.ctx.plant.input_box.clip(u), step)
        entry = self.schedule.pop(step, None)
        if entry is None:
            # bootstrap or failed solve: hold (zero before the first plan arrives)
            u, measured = self.u_prev, -1
            if step - self.start < m:
                events.append("bootstrap_hold")
        else:
            u, measured = entry
            if measured == step and m > 0:
                raise ControlError("time-triggered input applied at its own measurement step")
        self.u_prev = u
        return ControlAction(u=u, plan_measured_at=measured, events=events, solve=rec)


class SmoothController(Controller):
    name = "smooth"

    @property
    def delay(self) -> DelayModel:
        return DelayModel(compute_steps=self.ctx.horizon.m_smooth, policy=DelayPolicy.BLOCK_AND_HOLD)

    def reset(self, x0, step: int = 0) -> None:
        """Offline bootstrap: the first plan is solved before the loop starts."""
        self.solves = []
        x0 = np.asarray(x0, dtype=float)
        d = design_at(self.ctx, x0, np.zeros(self.ctx.plant.m))
        centre = predictive_state_set(x0, 0.0)
        sol = self._solve_ocp2(step, d, centre, step, warm=None)
        if sol is None or not sol.ok:
            raise QpInfeasible("bootstrap plan could not be computed")
        self._record(step, "bootstrap", sol)
        self.plan = self._buffer(sol, d, anchor=step, measured_at=-1, ready_at=step)
        self.pending: Optional[PlanBuffer] = None
        self.pending_set: Optional[DisturbedStateSet] = None
        self.next_handoff = step
        self.cycle_start = step
        self.centre_traj: Optional[np.ndarray] = None

    def _buffer(self, sol: OcpSolution, d: Design, anchor: int, measured_at: int, ready_at: int) -> PlanBuffer:
        U = self.ctx.plant.input_box.clip(sol.nominal_inputs)
        return PlanBuffer(inputs=U, nominal_states=sol.nominal_states, anchor_time=anchor, valid=True,
                          measured_at=measured_at, ready_at=ready_at, K=d.gains.K, A=d.model.A, B=d.model.B,
                          lin_state=d.model.anchor_state, lin_input=d.model.anchor_input)

    def _solve_ocp2(self, step: int, d: Design, initial: DisturbedStateSet, ref_start: int,
                    warm: Optional[np.ndarray]) -> Optional[OcpSolution]:
        hz = self.ctx.horizon
        try:
            ocp = build_ocp2(d.model, d.tube, initial, d.gains, self.ctx.weights, hz,
                             self.ctx.reference(ref_start, hz.N), self.ctx.terminal_mode)
            return solve_ocp2(ocp, warm, self.ctx.qp_settings)
        except ControlError as e:
            log("warn", "ocp_infeasible", kind="ocp2", step=step, error=str(e)[:500])
            return None

    def _handoff(self, step: int, x: np.ndarray, events: List[str]) -> Tuple[Optional[bool], Optional[float], Optional[float], Optional[SolveRecord]]:
        m = self.ctx.horizon.m_smooth
        contained = deviation = radius = None
        # (v) swap in the plan computed during the previous cycle
        if self.pending is not None:
            deviation = self.pending_set.distance(x)
            radius = self.pending_set.radius
            contained = self.pending_set.contains(x, tol=1e-12)
            self.plan = self.pending
            events.append("handoff")
            log("debug", "handoff", step=step, deviation=deviation, radius=radius, contained=contained)

        # (ii) nominal nonlinear prediction of the next m substeps from the measured state
        plan = self.plan
        U_m = np.array([plan.input_at(step + j) for j in range(m)])
        self.centre_traj = self.ctx.plant.rollout(x, U_m, self.ctx.horizon.delta)
        self.cycle_start = step
        A, B, K = plan.A, plan.B, plan.K
        model = linearize(self.ctx.plant, plan.lin_state, plan.lin_input, self.ctx.horizon.delta)
        offset = float(np.linalg.norm(x - plan.lin_state))
        eta_step = certified_eta(self.ctx.plant, model, offset, m)
        r = deviation_bound(tube_growth_factor(A, B, K), m, eta_step)
        centre = predictive_state_set(self.centre_traj[m], r)

        # (iii) linearize at the predicted state, anchored at the plan input there
        u_hat = plan.input_at(step + m)
        rec = None
        try:
            d = design_at(self.ctx, centre.center, u_hat, start_offset=r)
            # (iv) next plan, starting at the predicted state
            warm = shifted_guess(OcpSolution(nominal_inputs=plan.inputs, nominal_states=plan.nominal_states,
                                             cost=0.0, objective=0.0, status="stored", solve_time=0.0),
                                 step + m - plan.anchor_time)
            sol = self._solve_ocp2(step, d, centre, step + m, warm)
        except ControlError as e:
            log("warn", "ocp_infeasible", kind="design", step=step, error=str(e)[:500])
            sol, d = None, None
        if sol is not None and sol.ok:
            rec = self._record(step, "ocp2", sol)
            self.pending = self._buffer(sol, d, anchor=step + m, measured_at=step, ready_at=step + m)
        else:
            rec = self._record(step, "ocp2", sol, status=(sol.status if sol is not None else "failed"))
            events.append("fallback")
            log("info", "fallback", step=step)
            self.pending = plan.shifted(step + m - plan.anchor_time, anchor_time=step + m).model_copy(
                update={"measured_at": plan.measured_at, "ready_at": step + m})
        self.pending_set = centre
        self.next_handoff = step + m
        return contained, deviation, radius, rec

    def act(self, step: int, x) -> ControlAction:
        x = np.asarray(x, dtype=float)
        events: List[str] = []
        handoff = step == self.next_handoff
        contained = deviation = radius = None
        rec = None
        if handoff:
            contained, deviation, radius, rec = self._handoff(step, x, events)
        # (i) tube feedback around the nominal prediction
        j = step - self.cycle_start
        x_star = self.centre_traj[j]
        v = self.plan.input_at(step)
        u, saturated = tube_feedback_input(v, self.plan.K, x, x_star, self.ctx.plant.input_box)
        if saturated:
            events.append("saturation")
            log("debug", "saturation", step=step)
        if self.plan.measured_at >= step:
            raise ControlError(f"plan measured at {self.plan.measured_at} applied at step {step}")
        return ControlAction(u=u, nominal=x_star, plan_measured_at=self.plan.measured_at, events=events,
                             handoff=handoff, contained=contained, deviation=deviation, radius=radius, solve=rec)


CONTROLLERS = {
    "ideal": IdealController,
    "triggered": TriggeredController,
    "smooth": SmoothController,
}


def make_controller(name: str, ctx: ControllerContext) -> Controller:
    try:
        return CONTROLLERS[name](ctx)
    except KeyError:
        raise ValueError(f"unknown controller '{name}', expected one of {sorted(CONTROLLERS)}")
