# solver.py
"""
Dense convex QP solver (operator splitting with Ruiz scaling, rho adaptation,
active-set polish and infeasibility certificates) and a Gauss-Newton SQP on
top of it.

    minimize    1/2 x'Hx + g'x + constant
    subject to  lower <= Cx <= upper

Splitting stalls on degenerate problems (many saturated inputs, large
multipliers). Polishing is retried whenever the guessed active set changes,
and a splitting run that hits the iteration limit is finished by a
primal-dual interior-point solve of the same scaled problem. Every accepted
answer passes the independent KKT check.

Env:
- QP_MAX_ITER (default: 4000)
- QP_EPS_ABS (default: 1e-6)
- QP_EPS_REL (default: 1e-6)
- QP_EPS_INF (default: 1e-5)
- QP_KKT_TOL (default: 1e-6) acceptance threshold of the independent KKT check
- QP_CHECK_PSD (default: off) eigenvalue check of H at construction
- QP_FALLBACK (default: on) interior-point finish after the iteration limit
- SQP_MAX_ITER (default: 50)
- SQP_STEP_TOL (default: 1e-6)
"""
from __future__ import annotations

import io
import os
import time
from abc import ABC, abstractmethod
from enum import Enum
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
from pydantic import BaseModel, ConfigDict, Field, model_validator

from logs import log
from plant import ControlError

QP_MAX_ITER = int(os.getenv("QP_MAX_ITER", "4000"))
QP_EPS_ABS = float(os.getenv("QP_EPS_ABS", "1e-6"))
QP_EPS_REL = float(os.getenv("QP_EPS_REL", "1e-6"))
QP_EPS_INF = float(os.getenv("QP_EPS_INF", "1e-5"))
QP_KKT_TOL = float(os.getenv("QP_KKT_TOL", "1e-6"))
QP_CHECK_PSD = os.getenv("QP_CHECK_PSD", "0").lower() in ("1", "true", "yes", "on")
QP_FALLBACK = os.getenv("QP_FALLBACK", "1").lower() in ("1", "true", "yes", "on")
SQP_MAX_ITER = int(os.getenv("SQP_MAX_ITER", "50"))
SQP_STEP_TOL = float(os.getenv("SQP_STEP_TOL", "1e-6"))

RHO_MIN, RHO_MAX = 1e-6, 1e6
RHO_EQ_FACTOR = 1e3
SCALE_MIN, SCALE_MAX = 1e-4, 1e4
DIV_TOL = 1e-30
FEAS_TOL = 1e-6


class QpInfeasible(ControlError):
    pass


class SqpFailure(ControlError):
    pass


# ---------------------- Models ----------------------

class QpProblem(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    H: np.ndarray
    g: np.ndarray
    C: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    constant: float = 0.0

    @model_validator(mode="after")
    def _check(self) -> "QpProblem":
        d = self.g.shape[0]
        if self.H.shape != (d, d):
            raise ValueError(f"H must be {d}x{d}, got {self.H.shape}")
        if self.C.ndim != 2 or self.C.shape[1] != d:
            raise ValueError(f"C must have {d} columns")
        k = self.C.shape[0]
        if self.lower.shape != (k,) or self.upper.shape != (k,):
            raise ValueError(f"lower/upper must have length {k}")
        if not np.allclose(self.H, self.H.T, atol=1e-9 * max(1.0, float(np.max(np.abs(self.H), initial=0.0)))):
            raise ValueError("H must be symmetric")
        if np.any(self.lower > self.upper):
            raise ValueError("lower exceeds upper")
        if np.any(np.isnan(self.lower)) or np.any(np.isnan(self.upper)):
            raise ValueError("bounds must not be NaN")
        if QP_CHECK_PSD and d and float(np.min(np.linalg.eigvalsh(self.H))) < -1e-9:
            raise ValueError("H must be positive semidefinite")
        return self

    @classmethod
    def build(cls, H, g, C=None, lower=None, upper=None, constant: float = 0.0) -> "QpProblem":
        g = np.asarray(g, dtype=float).reshape(-1)
        d = g.shape[0]
        H = np.asarray(H, dtype=float).reshape(d, d)
        C = np.zeros((0, d)) if C is None else np.asarray(C, dtype=float).reshape(-1, d)
        k = C.shape[0]
        lower = np.full(k, -np.inf) if lower is None else np.asarray(lower, dtype=float).reshape(k)
        upper = np.full(k, np.inf) if upper is None else np.asarray(upper, dtype=float).reshape(k)
        return cls(H=0.5 * (H + H.T), g=g, C=C, lower=lower, upper=upper, constant=float(constant))

    @property
    def dim(self) -> int:
        return int(self.g.shape[0])

    @property
    def n_constraints(self) -> int:
        return int(self.C.shape[0])

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.g @ x + self.constant)


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITERATIONS = "max_iterations"


class QpSolution(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    primal: np.ndarray
    dual: np.ndarray
    objective: float
    status: QpStatus
    iterations: int
    solve_time: float
    polished: bool = False
    certificate: Optional[str] = None
    # "admm", or "interior_point" when the fallback produced the answer
    method: str = "admm"

    @property
    def ok(self) -> bool:
        return self.status == QpStatus.OPTIMAL


class KktResiduals(BaseModel):
    primal: float
    dual: float
    complementarity: float

    def within(self, tol: float) -> bool:
        return self.primal <= tol and self.dual <= tol and self.complementarity <= tol


class QpSettings(BaseModel):
    max_iter: int = Field(default=QP_MAX_ITER, ge=1)
    eps_abs: float = Field(default=QP_EPS_ABS, gt=0.0)
    eps_rel: float = Field(default=QP_EPS_REL, ge=0.0)
    eps_inf: float = Field(default=QP_EPS_INF, gt=0.0)
    kkt_tol: float = Field(default=QP_KKT_TOL, gt=0.0)
    rho: float = Field(default=0.1, gt=0.0)
    sigma: float = Field(default=1e-6, gt=0.0)
    alpha: float = Field(default=1.6, gt=0.0, lt=2.0)
    scaling_iters: int = Field(default=10, ge=0)
    adaptive_rho_interval: int = Field(default=25, ge=0)
    adaptive_rho_tolerance: float = Field(default=5.0, gt=1.0)
    check_every: int = Field(default=1, ge=1)
    polish: bool = True
    polish_refine_iters: int = Field(default=3, ge=0)
    # 0 disables polishing before the splitting residuals converge
    polish_interval: int = Field(default=25, ge=0)
    active_set_iters: int = Field(default=10, ge=1)
    fallback: bool = QP_FALLBACK
    ipm_max_iter: int = Field(default=100, ge=1)
    ipm_tol: float = Field(default=1e-10, gt=0.0)


# ---------------------- Residuals ----------------------

def kkt_residuals(problem: QpProblem, x, y) -> KktResiduals:
    """Residuals of the KKT system evaluated from scratch on the unscaled data."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    H, g, C, lo, up = problem.H, problem.g, problem.C, problem.lower, problem.upper
    dual = float(np.max(np.abs(H @ x + g + C.T @ y), initial=0.0))
    if problem.n_constraints == 0:
        return KktResiduals(primal=0.0, dual=dual, complementarity=0.0)
    Cx = C @ x
    primal = float(np.max(np.maximum(lo - Cx, 0.0) + np.maximum(Cx - up, 0.0)))
    yp = np.maximum(y, 0.0)
    ym = np.maximum(-y, 0.0)
    # a multiplier on an infinite bound is itself the violation
    gap_up = np.where(np.isfinite(up), np.abs(up - Cx), 1.0)
    gap_lo = np.where(np.isfinite(lo), np.abs(Cx - lo), 1.0)
    comp_up = np.where(yp > 0.0, yp * gap_up, 0.0)
    comp_lo = np.where(ym > 0.0, ym * gap_lo, 0.0)
    comp = float(np.max(np.maximum(comp_up, comp_lo)))
    return KktResiduals(primal=primal, dual=dual, complementarity=comp)


# ---------------------- ADMM workspace ----------------------

class QpSolver:
    """One workspace per problem; not shared across threads."""

    def __init__(self, problem: QpProblem, settings: Optional[QpSettings] = None):
        self.problem = problem
        self.settings = settings or QpSettings()
        self._scale()
        self._init_rho()
        self._factor()

    # ----- setup -----

    def _scale(self) -> None:
        p, s = self.problem, self.settings
        d, k = p.dim, p.n_constraints
        D, E, c = np.ones(d), np.ones(k), 1.0
        Hs, gs, Cs = p.H.copy(), p.g.copy(), p.C.copy()
        for _ in range(s.scaling_iters):
            col = np.maximum(np.max(np.abs(Hs), axis=0, initial=0.0), np.max(np.abs(Cs), axis=0, initial=0.0))
            row = np.max(np.abs(Cs), axis=1, initial=0.0)
            dx = 1.0 / np.sqrt(_limit_scaling(col))
            dz = 1.0 / np.sqrt(_limit_scaling(row))
            Hs = dx[:, None] * Hs * dx[None, :]
            Cs = dz[:, None] * Cs * dx[None, :]
            gs = dx * gs
            D *= dx
            E *= dz
            h_mean = float(np.mean(np.max(np.abs(Hs), axis=0, initial=0.0))) if d else 0.0
            gamma = 1.0 / float(_limit_scaling(np.array([max(h_mean, float(np.max(np.abs(gs), initial=0.0)))]))[0])
            Hs *= gamma
            gs *= gamma
            c *= gamma
        self.D, self.E, self.c = D, E, c
        self.Hs, self.gs, self.Cs = Hs, gs, Cs
        self.ls, self.us = E * p.lower, E * p.upper

    def _init_rho(self) -> None:
        p, s = self.problem, self.settings
        k = p.n_constraints
        rho = np.full(k, s.rho)
        free = ~np.isfinite(p.lower) & ~np.isfinite(p.upper)
        eq = np.isfinite(p.lower) & (np.abs(p.upper - p.lower) < 1e-12)
        rho[free] = RHO_MIN
        rho[eq] = RHO_EQ_FACTOR * s.rho
        self.rho_scalar = s.rho
        self.rho_vec = rho
        self._free, self._eq = free, eq

    def _factor(self) -> None:
        M = self.Hs + self.settings.sigma * np.eye(self.problem.dim) + self.Cs.T @ (self.rho_vec[:, None] * self.Cs)
        self._chol = sla.cho_factor(M, lower=True, check_finite=False) if self.problem.dim else None

    def _update_rho(self, new_rho: float) -> None:
        new_rho = float(np.clip(new_rho, RHO_MIN, RHO_MAX))
        self.rho_scalar = new_rho
        rho = np.full(self.problem.n_constraints, new_rho)
        rho[self._free] = RHO_MIN
        rho[self._eq] = RHO_EQ_FACTOR * new_rho
        self.rho_vec = rho
        self._factor()

    # ----- scaling helpers -----

    def _unscale(self, x, z, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.D * x, z / self.E, self.E * y / self.c

    def _scale_start(self, x, y) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        p = self.problem
        x = np.asarray(x, dtype=float)
        z = np.clip(p.C @ x, p.lower, p.upper)
        y = np.zeros(p.n_constraints) if y is None else np.asarray(y, dtype=float)
        return x / self.D, self.E * z, self.c * y / self.E

    # ----- solve -----

    def solve(self, warm_start: Optional[Tuple[np.ndarray, Optional[np.ndarray]]] = None) -> QpSolution:
        t0 = time.perf_counter()
        p, s = self.problem, self.settings
        d, k = p.dim, p.n_constraints
        if d == 0:
            return QpSolution(primal=np.zeros(0), dual=np.zeros(k), objective=p.constant,
                              status=QpStatus.OPTIMAL, iterations=0, solve_time=time.perf_counter() - t0)
        if warm_start is not None:
            x, z, y = self._scale_start(warm_start[0], warm_start[1])
        else:
            x, z, y = np.zeros(d), np.zeros(k), np.zeros(k)

        status, certificate, polished, method = QpStatus.MAX_ITERATIONS, None, False, "admm"
        xu, zu, yu = self._unscale(x, z, y)
        tried: Optional[bytes] = None
        it = 0
        for it in range(1, s.max_iter + 1):
            x_prev, y_prev = x, y
            rhs = s.sigma * x - self.gs + self.Cs.T @ (self.rho_vec * z - y)
            x_t = sla.cho_solve(self._chol, rhs, check_finite=False)
            z_t = self.Cs @ x_t
            x = s.alpha * x_t + (1.0 - s.alpha) * x_prev
            z_r = s.alpha * z_t + (1.0 - s.alpha) * z
            z_new = np.clip(z_r + y / self.rho_vec, self.ls, self.us) if k else z_r
            y = y + self.rho_vec * (z_r - z_new)
            z = z_new

            if it % s.check_every and it != s.max_iter:
                continue
            xu, zu, yu = self._unscale(x, z, y)
            r_p, r_d, e_p, e_d = self._residuals(xu, zu, yu)
            candidate = None
            if r_p <= e_p and r_d <= e_d:
                candidate = self._finalize(xu, zu, yu)
            elif s.polish and s.polish_interval and k and it % s.polish_interval == 0:
                # the active set often settles long before the residuals do
                key = self._active_key(zu, yu)
                if key != tried:
                    tried = key
                    candidate = self._finalize(xu, zu, yu, refine=False)
            if candidate is not None:
                xu, yu, polished = candidate
                status = QpStatus.OPTIMAL
                break
            cert = self._infeasibility(x - x_prev, y - y_prev)
            if cert is not None:
                status, certificate = QpStatus.INFEASIBLE, cert
                break
            if s.adaptive_rho_interval and it % s.adaptive_rho_interval == 0 and k:
                new_rho = self._suggest_rho(x, z, y)
                if new_rho > s.adaptive_rho_tolerance * self.rho_scalar or new_rho < self.rho_scalar / s.adaptive_rho_tolerance:
                    self._update_rho(new_rho)

        if status == QpStatus.MAX_ITERATIONS:
            candidate = self._finalize(xu, zu, yu)
            if candidate is None and s.fallback:
                finish = self._interior_point()
                if finish is not None:
                    xi, zi, yi, ipm_iters = finish
                    it += ipm_iters
                    method = "interior_point"
                    xu, yu = xi, yi
                    candidate = self._finalize(xi, zi, yi)
                    log("info", "qp_fallback", admm_iterations=it - ipm_iters, ipm_iterations=ipm_iters,
                        accepted=candidate is not None, dim=d, constraints=k)
            if candidate is not None:
                xu, yu, polished = candidate
                status = QpStatus.OPTIMAL

        obj = p.objective(xu) if status != QpStatus.INFEASIBLE else float("inf")
        sol = QpSolution(primal=xu, dual=yu, objective=obj, status=status, iterations=it,
                         solve_time=time.perf_counter() - t0, polished=polished, certificate=certificate,
                         method=method)
        if status == QpStatus.OPTIMAL:
            log("debug", "qp_solved", iterations=it, polished=polished, method=method, dim=d, constraints=k)
        elif status == QpStatus.INFEASIBLE:
            log("info", "qp_infeasible", iterations=it, certificate=certificate)
        else:
            log("warn", "qp_max_iterations", iterations=it, dim=d, constraints=k)
        return sol

    def _residuals(self, xu, zu, yu) -> Tuple[float, float, float, float]:
        p, s = self.problem, self.settings
        Cx = p.C @ xu
        Hx = p.H @ xu
        Cty = p.C.T @ yu
        r_p = _inf_norm(Cx - zu)
        r_d = _inf_norm(Hx + p.g + Cty)
        e_p = s.eps_abs + s.eps_rel * max(_inf_norm(Cx), _inf_norm(zu))
        e_d = s.eps_abs + s.eps_rel * max(_inf_norm(Hx), _inf_norm(Cty), _inf_norm(p.g))
        return r_p, r_d, e_p, e_d

    def _suggest_rho(self, x, z, y) -> float:
        """Balances the normalized primal and dual residuals of the scaled problem."""
        Cx = self.Cs @ x
        Hx = self.Hs @ x
        Cty = self.Cs.T @ y
        r_p = _inf_norm(Cx - z) / (max(_inf_norm(Cx), _inf_norm(z)) + DIV_TOL)
        r_d = _inf_norm(Hx + self.gs + Cty) / (max(_inf_norm(Hx), _inf_norm(Cty), _inf_norm(self.gs)) + DIV_TOL)
        return self.rho_scalar * float(np.sqrt(r_p / (r_d + DIV_TOL)))

    # ----- polish -----

    def _active_sets(self, zu, yu) -> Tuple[np.ndarray, np.ndarray]:
        p = self.problem
        lower = ((zu - p.lower < -yu) | self._eq) & np.isfinite(p.lower)
        upper = (p.upper - zu < yu) & ~lower & np.isfinite(p.upper)
        return lower, upper

    def _active_key(self, zu, yu) -> bytes:
        lower, upper = self._active_sets(zu, yu)
        return lower.tobytes() + upper.tobytes()

    def _finalize(self, xu, zu, yu, refine: bool = True):
        """Polished iterate if it passes the KKT check, else the raw one, else None."""
        tol = self.settings.kkt_tol
        if self.settings.polish and self.problem.n_constraints:
            polished = self._polish(zu, yu, self.settings.active_set_iters if refine else 1)
            if polished is not None:
                xp, yp = polished
                if kkt_residuals(self.problem, xp, yp).within(tol):
                    return xp, yp, True
        if kkt_residuals(self.problem, xu, yu).within(tol):
            return xu, yu, False
        return None

    def _polish(self, zu, yu, rounds: int = 1) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """
        Equality-constrained solve on the guessed active set. Extra rounds move
        violated rows into the set and drop rows whose multiplier has the
        wrong sign.
        """
        p = self.problem
        lower, upper = self._active_sets(zu, yu)
        fin_lo, fin_up = np.isfinite(p.lower), np.isfinite(p.upper)
        bound_scale = 1.0 + max(_inf_norm(p.lower[fin_lo]), _inf_norm(p.upper[fin_up]))
        out = None
        for _ in range(rounds):
            out = self._solve_active(lower, upper)
            if out is None:
                return None
            x, y = out
            Cx = p.C @ x
            y_tol = 1e-9 * max(1.0, _inf_norm(y))
            c_tol = 1e-9 * bound_scale
            free = ~(lower | upper)
            new_lower = (lower & (self._eq | (y <= y_tol))) | (free & fin_lo & (Cx < p.lower - c_tol))
            new_upper = (upper & (y >= -y_tol)) | (free & fin_up & (Cx > p.upper + c_tol))
            if np.array_equal(new_lower, lower) and np.array_equal(new_upper, upper):
                break
            lower, upper = new_lower, new_upper
        return out

    def _solve_active(self, lower: np.ndarray, upper: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        p = self.problem
        d = p.dim
        act = lower | upper
        Ca = p.C[act]
        ba = np.where(lower, p.lower, p.upper)[act]
        na = Ca.shape[0]
        delta = 1e-9
        K0 = np.block([[p.H, Ca.T], [Ca, np.zeros((na, na))]])
        Kd = K0 + np.diag(np.concatenate([np.full(d, delta), np.full(na, -delta)]))
        rhs = np.concatenate([-p.g, ba])
        try:
            lu = sla.lu_factor(Kd, check_finite=False)
            sol = sla.lu_solve(lu, rhs, check_finite=False)
            for _ in range(self.settings.polish_refine_iters):
                sol = sol + sla.lu_solve(lu, rhs - K0 @ sol, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return None
        if not np.all(np.isfinite(sol)):
            return None
        y = np.zeros(p.n_constraints)
        y[act] = sol[d:]
        return sol[:d], y

    # ----- interior-point finish -----

    def _interior_point(self) -> Optional[Tuple[np.ndarray, np.ndarray, np.ndarray, int]]:
        """
        Mehrotra predictor-corrector on the scaled problem, written as
        Gx + s = h (s >= 0) for the finite one-sided rows and Ax = b for the
        equality rows. Returns the unscaled (x, z, y) and the iteration count.
        """
        st = self.settings
        H, g, C = self.Hs, self.gs, self.Cs
        d = H.shape[0]
        eq = self._eq
        up = np.isfinite(self.us) & ~eq
        lo = np.isfinite(self.ls) & ~eq
        G = np.vstack([C[up], -C[lo]])
        h = np.concatenate([self.us[up], -self.ls[lo]])
        A = C[eq]
        b = 0.5 * (self.ls[eq] + self.us[eq])
        n_in, n_eq = G.shape[0], A.shape[0]
        n_up = int(np.count_nonzero(up))

        x, nu = np.zeros(d), np.zeros(n_eq)
        slack = np.maximum(h - G @ x, 1.0)
        lam = np.ones(n_in)
        reg = 1e-10
        g_scale = 1.0 + _inf_norm(g)
        h_scale = 1.0 + max(_inf_norm(h), _inf_norm(b))
        it = 0
        for it in range(1, st.ipm_max_iter + 1):
            r_d = H @ x + g + G.T @ lam + A.T @ nu
            r_in = G @ x + slack - h
            r_eq = A @ x - b
            mu = float(slack @ lam) / n_in if n_in else 0.0
            if (_inf_norm(r_d) <= st.ipm_tol * g_scale and max(_inf_norm(r_in), _inf_norm(r_eq)) <= st.ipm_tol * h_scale
                    and mu <= st.ipm_tol):
                break
            w = lam / slack
            K = np.block([[H + G.T @ (w[:, None] * G) + reg * np.eye(d), A.T],
                          [A, -reg * np.eye(n_eq)]])
            try:
                lu = sla.lu_factor(K, check_finite=False)
            except (ValueError, np.linalg.LinAlgError):
                return None

            def newton(r_c):
                rhs = np.concatenate([-r_d - G.T @ (w * r_in - r_c / slack), -r_eq])
                sol = sla.lu_solve(lu, rhs, check_finite=False)
                dx, dnu = sol[:d], sol[d:]
                dlam = w * (G @ dx + r_in) - r_c / slack
                ds = -r_in - G @ dx
                return dx, ds, dlam, dnu

            dx, ds, dlam, dnu = newton(slack * lam)
            step = 1.0
            if n_in:
                a_aff = min(1.0, _step_to_boundary(slack, ds), _step_to_boundary(lam, dlam))
                mu_aff = float((slack + a_aff * ds) @ (lam + a_aff * dlam)) / n_in
                sigma = (mu_aff / mu) ** 3 if mu > 0.0 else 0.0
                dx, ds, dlam, dnu = newton(slack * lam + ds * dlam - sigma * mu)
                step = min(1.0, 0.99 * min(_step_to_boundary(slack, ds), _step_to_boundary(lam, dlam)))
            x, slack, lam, nu = x + step * dx, slack + step * ds, lam + step * dlam, nu + step * dnu
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(nu))):
                return None

        y = np.zeros(self.problem.n_constraints)
        y[up] += lam[:n_up]
        y[lo] -= lam[n_up:]
        y[eq] = nu
        z = np.clip(C @ x, self.ls, self.us)
        xu, zu, yu = self._unscale(x, z, y)
        return xu, zu, yu, it

    def _infeasibility(self, dx, dy) -> Optional[str]:
        p, s = self.problem, self.settings
        eps = s.eps_inf
        if p.n_constraints:
            dyu = self.E * dy
            ny = float(np.max(np.abs(dyu)))
            if ny > eps:
                v = dyu / ny
                pos, neg = np.maximum(v, 0.0), np.minimum(v, 0.0)
                if not (np.any((pos > 0) & ~np.isfinite(p.upper)) or np.any((neg < 0) & ~np.isfinite(p.lower))):
                    up = np.where(np.isfinite(p.upper), p.upper, 0.0)
                    lo = np.where(np.isfinite(p.lower), p.lower, 0.0)
                    support = float(up @ pos + lo @ neg)
                    if support < -eps and float(np.max(np.abs(p.C.T @ v))) < eps:
                        return "primal"
        dxu = self.D * dx
        nx = float(np.max(np.abs(dxu), initial=0.0))
        if nx > eps:
            v = dxu / nx
            if float(p.g @ v) < -eps and float(np.max(np.abs(p.H @ v), initial=0.0)) < eps:
                Cv = p.C @ v
                ok_up = np.all(~np.isfinite(p.upper) | (Cv <= eps))
                ok_lo = np.all(~np.isfinite(p.lower) | (Cv >= -eps))
                if ok_up and ok_lo:
                    return "dual"
        return None


def _limit_scaling(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float).copy()
    v[v < SCALE_MIN] = 1.0
    return np.minimum(v, SCALE_MAX)


def _inf_norm(v: np.ndarray) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _step_to_boundary(v: np.ndarray, dv: np.ndarray) -> float:
    """Largest step keeping v + a*dv nonnegative."""
    neg = dv < 0.0
    if not np.any(neg):
        return float("inf")
    return float(np.min(-v[neg] / dv[neg]))


def solve_qp(problem: QpProblem, warm_start: Optional[Tuple[np.ndarray, Optional[np.ndarray]]] = None,
             settings: Optional[QpSettings] = None) -> QpSolution:
    return QpSolver(problem, settings).solve(warm_start)


# ---------------------- SQP ----------------------

class NlpEval(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    cost: float
    cons: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    grad: Optional[np.ndarray] = None
    hess: Optional[np.ndarray] = None
    jac: Optional[np.ndarray] = None

    def violation(self) -> float:
        if self.cons.size == 0:
            return 0.0
        return float(np.max(np.maximum(self.lower - self.cons, 0.0) + np.maximum(self.cons - self.upper, 0.0)))

    def violation_l1(self) -> float:
        if self.cons.size == 0:
            return 0.0
        return float(np.sum(np.maximum(self.lower - self.cons, 0.0) + np.maximum(self.cons - self.upper, 0.0)))


class NlpSpec(ABC):
    """
    Smooth problem min cost(z) s.t. lower <= cons(z) <= upper. `evaluate`
    returns a Gauss-Newton Hessian together with the gradient and Jacobian
    when derivatives are requested.
    """

    @property
    @abstractmethod
    def dim(self) -> int: ...

    @abstractmethod
    def evaluate(self, z: np.ndarray, derivatives: bool = True) -> NlpEval: ...


class SqpResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    z: np.ndarray
    cost: float
    status: str
    iterations: int
    qp_iterations: int
    cost_history: List[float]
    merit_history: List[float]
    solve_time: float
    violation: float


def solve_nlp_sqp(spec: NlpSpec, initial_guess, max_iter: int = SQP_MAX_ITER, step_tol: float = SQP_STEP_TOL,
                  settings: Optional[QpSettings] = None) -> SqpResult:
    t0 = time.perf_counter()
    z = np.asarray(initial_guess, dtype=float).reshape(spec.dim)
    ev = spec.evaluate(z)
    if spec.dim == 0:
        return SqpResult(z=z, cost=ev.cost, status="converged", iterations=0, qp_iterations=0,
                         cost_history=[ev.cost], merit_history=[ev.cost], solve_time=time.perf_counter() - t0,
                         violation=ev.violation())

    best: Optional[Tuple[np.ndarray, float, float]] = None
    if ev.violation() <= FEAS_TOL:
        best = (z.copy(), ev.cost, ev.violation())
    cost_history, merit_history = [ev.cost], [ev.cost]
    mu, status, iterations, qp_iters = 10.0, "max_iterations", 0, 0
    dual = None

    for k in range(1, max_iter + 1):
        qp = QpProblem.build(ev.hess, ev.grad, ev.jac, ev.lower - ev.cons, ev.upper - ev.cons)
        warm = (np.zeros(spec.dim), dual) if dual is not None and dual.shape[0] == qp.n_constraints else None
        sol = solve_qp(qp, warm, settings)
        qp_iters += sol.iterations
        if sol.status == QpStatus.INFEASIBLE:
            if k == 1:
                raise QpInfeasible("SQP subproblem infeasible at the first iteration")
            status = "qp_infeasible"
            break
        if not np.all(np.isfinite(sol.primal)):
            status = "qp_failed"
            break
        p_step = sol.primal
        dual = sol.dual
        if float(np.linalg.norm(p_step)) < step_tol:
            status = "converged"
            break

        mu = max(mu, 2.0 * float(np.max(np.abs(dual), initial=0.0)))
        viol0 = ev.violation_l1()
        merit0 = ev.cost + mu * viol0
        slope = float(ev.grad @ p_step) - mu * viol0
        alpha, accepted = 1.0, None
        for _ in range(30):
            trial = spec.evaluate(z + alpha * p_step, derivatives=False)
            merit = trial.cost + mu * trial.violation_l1()
            if merit <= merit0 + 1e-4 * alpha * min(slope, 0.0):
                accepted = merit
                break
            alpha *= 0.5
        if accepted is None:
            status = "line_search_failed"
            break

        z = z + alpha * p_step
        ev = spec.evaluate(z)
        iterations += 1
        cost_history.append(ev.cost)
        merit_history.append(accepted)
        viol = ev.violation()
        log("debug", "sqp_iteration", k=k, cost=ev.cost, violation=viol, alpha=alpha, qp_iterations=sol.iterations)
        if viol <= FEAS_TOL and (best is None or ev.cost <= best[1]):
            best = (z.copy(), ev.cost, viol)
        if alpha * float(np.linalg.norm(p_step)) < step_tol:
            status = "converged"
            break

    if best is None:
        raise SqpFailure(f"no feasible iterate after {iterations} SQP iterations (status {status})")
    log("debug", "sqp_done", status=status, iterations=iterations, cost=best[1])
    return SqpResult(z=best[0], cost=best[1], status=status, iterations=iterations, qp_iterations=qp_iters,
                     cost_history=cost_history, merit_history=merit_history,
                     solve_time=time.perf_counter() - t0, violation=best[2])


# ---------------------- Problem dump ----------------------

_SECTIONS = ("H", "g", "C", "lower", "upper")


def dump_problem(problem: QpProblem, path: Union[str, Path]) -> Path:
    """Plain-text sectioned dump: a header line per matrix followed by its rows."""
    path = Path(path)
    buf = io.StringIO()
    buf.write("# qp-problem v1\n")
    buf.write(f"constant {problem.constant!r}\n")
    for name in _SECTIONS:
        M = np.atleast_2d(getattr(problem, name))
        if name in ("g", "lower", "upper"):
            M = M.reshape(1, -1)
        buf.write(f"{name} {M.shape[0]} {M.shape[1]}\n")
        if M.shape[1] == 0:
            continue
        for row in M:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def load_problem(path: Union[str, Path]) -> QpProblem:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    pos = 0
    head = lines[pos].split()
    if head[0] != "constant":
        raise ValueError(f"{path}: expected 'constant' header")
    constant = float(head[1])
    pos += 1
    data = {}
    for name in _SECTIONS:
        head = lines[pos].split()
        if head[0] != name:
            raise ValueError(f"{path}: expected section '{name}', got '{head[0]}'")
        rows, cols = int(head[1]), int(head[2])
        pos += 1
        stored = rows if cols > 0 else 0
        vals = [[float(v) for v in lines[pos + r].split()] for r in range(stored)]
        pos += stored
        M = np.array(vals, dtype=float).reshape(rows, cols) if stored else np.zeros((rows, cols))
        data[name] = M.reshape(-1) if name in ("g", "lower", "upper") else M
    d = data["g"].shape[0]
    return QpProblem(H=data["H"].reshape(d, d), g=data["g"], C=data["C"].reshape(-1, d),
                     lower=data["lower"], upper=data["upper"], constant=constant)
