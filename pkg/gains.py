# gains.py
"""
Ancillary feedback and terminal ingredients.

P solves the discrete algebraic Riccati equation for (A, B, Q, R), the gain is
K = -(R + B'PB)^-1 B'PA and the terminal region is {x : ||x||_P <= epsilon}.

Env:
- DARE_TOL (default: 1e-12)
- DARE_MAX_ITER (default: 10000)
- DARE_RESIDUAL_MAX (default: 1e-8)
- STAB_TOL (default: 1e-3) relative singular-value floor of the controllability matrix
- TERMINAL_SAMPLES (default: 1000)
- TERMINAL_EPS_MAX (default: 10.0)
- SLACK_WEIGHT (default: 1e4)
"""
from __future__ import annotations

import os
from typing import Optional, Tuple

import numpy as np
import scipy.linalg as sla
from pydantic import BaseModel, ConfigDict, Field, model_validator

from logs import log
from plant import N_INPUT, N_STATE, Box, ControlError

DARE_TOL = float(os.getenv("DARE_TOL", "1e-12"))
DARE_MAX_ITER = int(os.getenv("DARE_MAX_ITER", "10000"))
DARE_RESIDUAL_MAX = float(os.getenv("DARE_RESIDUAL_MAX", "1e-8"))
STAB_TOL = float(os.getenv("STAB_TOL", "1e-3"))
TERMINAL_SAMPLES = int(os.getenv("TERMINAL_SAMPLES", "1000"))
TERMINAL_EPS_MAX = float(os.getenv("TERMINAL_EPS_MAX", "10.0"))
TERMINAL_EPS_MIN = 1e-9
SLACK_WEIGHT = float(os.getenv("SLACK_WEIGHT", "1e4"))


class NotStabilizable(ControlError):
    pass


class RiccatiDivergence(ControlError):
    pass


class TerminalSetEmpty(ControlError):
    pass


# ---------------------- Models ----------------------

def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


class CostWeights(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    Q: np.ndarray
    R: np.ndarray
    P: Optional[np.ndarray] = None
    slack_weight: float = Field(default=SLACK_WEIGHT, gt=0.0)

    @model_validator(mode="after")
    def _check(self) -> "CostWeights":
        for name, M, strict in (("Q", self.Q, False), ("R", self.R, True), ("P", self.P, False)):
            if M is None:
                continue
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ValueError(f"{name} must be square")
            if not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            lam_min = float(np.min(np.linalg.eigvalsh(M)))
            if strict and lam_min <= 0.0:
                raise ValueError(f"{name} must be positive definite")
            if not strict and lam_min < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        return self

    def with_terminal(self, P: np.ndarray) -> "CostWeights":
        return CostWeights(Q=self.Q, R=self.R, P=_sym(P), slack_weight=self.slack_weight)


def default_weights(q: float = 0.1, r: float = 0.01, slack_weight: float = SLACK_WEIGHT) -> CostWeights:
    return CostWeights(Q=q * np.eye(N_STATE), R=r * np.eye(N_INPUT), slack_weight=slack_weight)


class GainSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    K: np.ndarray
    P: np.ndarray
    epsilon: Optional[float] = None
    closed_loop_spectral_radius: float
    residual: float
    reduced: bool = False
    basis: Optional[np.ndarray] = None

    def with_epsilon(self, epsilon: float) -> "GainSet":
        return self.model_copy(update={"epsilon": float(epsilon)})

    @property
    def k_norm(self) -> float:
        return float(np.linalg.norm(self.K, 2))


class TerminalDecreaseReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    ok: bool
    max_slack: float
    samples: int
    witness: Optional[np.ndarray] = None


# ---------------------- Riccati ----------------------

def dare_residual(P, A, B, Q, R) -> float:
    BtPA = B.T @ P @ A
    rhs = A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA) + Q
    return float(np.linalg.norm(P - rhs))


def _gain(P, A, B, R) -> np.ndarray:
    return -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(M)))))


def controllable_subspace(A, B, tol: float = STAB_TOL) -> Tuple[np.ndarray, np.ndarray]:
    """Orthonormal bases (T_c, T_u) of the controllable subspace and its complement."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n = A.shape[0]
    blocks, AkB = [], B
    for _ in range(n):
        blocks.append(AkB)
        AkB = A @ AkB
    U, s, _ = np.linalg.svd(np.hstack(blocks))
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((n, 0)), np.eye(n)
    rank = int(np.sum(s > tol * s[0]))
    return U[:, :rank], U[:, rank:]


def is_stabilizable(A, B, tol: float = STAB_TOL) -> bool:
    T_c, T_u = controllable_subspace(A, B, tol)
    if T_u.shape[1] == 0:
        return True
    A_uu = T_u.T @ np.atleast_2d(A) @ T_u
    return spectral_radius(A_uu) < 1.0 - 1e-9


def _doubling(A, B, Q, R) -> np.ndarray:
    n = A.shape[0]
    I = np.eye(n)
    Ak, Gk, Hk = A.copy(), B @ np.linalg.solve(R, B.T), Q.copy()
    for it in range(DARE_MAX_ITER):
        W = I + Gk @ Hk
        try:
            W_A = np.linalg.solve(W, Ak)
            W_G = np.linalg.solve(W, Gk)
        except np.linalg.LinAlgError as e:
            raise RiccatiDivergence(f"doubling step singular at iteration {it}: {e}")
        H_next = _sym(Hk + Ak.T @ Hk @ W_A)
        G_next = _sym(Gk + Ak @ W_G @ Ak.T)
        A_next = Ak @ W_A
        if not np.all(np.isfinite(H_next)):
            raise RiccatiDivergence(f"doubling diverged at iteration {it}")
        delta = np.linalg.norm(H_next - Hk)
        Ak, Gk, Hk = A_next, G_next, H_next
        if delta <= DARE_TOL * max(1.0, np.linalg.norm(Hk)):
            return Hk
    raise RiccatiDivergence(f"no convergence after {DARE_MAX_ITER} doubling iterations")


def _newton_refine(P, A, B, Q, R, steps: int = 3) -> np.ndarray:
    for _ in range(steps):
        K = _gain(P, A, B, R)
        AK = A + B @ K
        if spectral_radius(AK) >= 1.0:
            break
        P_next = _sym(sla.solve_discrete_lyapunov(AK.T, Q + K.T @ R @ K))
        if not np.all(np.isfinite(P_next)):
            break
        if dare_residual(P_next, A, B, Q, R) > dare_residual(P, A, B, Q, R):
            break
        P = P_next
    return P


def solve_dare(A, B, Q, R) -> GainSet:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    if B.shape[0] != A.shape[0]:
        B = B.T if B.shape[1] == A.shape[0] else B
    if np.min(np.linalg.eigvalsh(_sym(R))) <= 0.0:
        raise ValueError("R must be positive definite")
    if not is_stabilizable(A, B):
        raise NotStabilizable("(A, B) is not stabilizable within the numerical rank tolerance")

    P = _newton_refine(_doubling(A, B, Q, R), A, B, Q, R)
    K = _gain(P, A, B, R)
    rho = spectral_radius(A + B @ K)
    res = dare_residual(P, A, B, Q, R)
    if res >= DARE_RESIDUAL_MAX:
        raise RiccatiDivergence(f"Riccati residual {res:.3e} above {DARE_RESIDUAL_MAX:.1e}")
    if rho >= 1.0:
        raise NotStabilizable(f"closed loop spectral radius {rho:.6f} >= 1")
    log("debug", "dare_solved", rho=rho, residual=res, p_norm=float(np.linalg.norm(P, 2)))
    return GainSet(K=K, P=P, closed_loop_spectral_radius=rho, residual=res)


def solve_dare_reduced(A, B, Q, R) -> GainSet:
    """DARE on the controllable subspace; uncontrolled directions get zero gain."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    T_c, _ = controllable_subspace(A, B)
    if T_c.shape[1] == 0:
        raise NotStabilizable("controllable subspace is empty")
    A_r = T_c.T @ A @ T_c
    B_r = T_c.T @ B
    Q_r = _sym(T_c.T @ Q @ T_c)
    inner = solve_dare(A_r, B_r, Q_r, R)
    K = inner.K @ T_c.T
    P = _sym(T_c @ inner.P @ T_c.T)
    return GainSet(K=K, P=P, closed_loop_spectral_radius=inner.closed_loop_spectral_radius,
                   residual=inner.residual, reduced=True, basis=T_c)


def synthesize(A, B, weights: CostWeights) -> GainSet:
    try:
        return solve_dare(A, B, weights.Q, weights.R)
    except NotStabilizable as e:
        log("info", "gain_reduced", reason=str(e)[:200])
        return solve_dare_reduced(A, B, weights.Q, weights.R)


# ---------------------- Terminal set ----------------------

def _p_range(P: np.ndarray, tol: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    lam, V = np.linalg.eigh(_sym(P))
    keep = lam > tol * max(1.0, float(np.max(lam)) if lam.size else 1.0)
    return lam[keep], V[:, keep]


def _unit_p_sphere(P: np.ndarray, count: int, seed: int) -> np.ndarray:
    """Points with ||x||_P = 1 spread over the range of P."""
    lam, V = _p_range(P)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, lam.size))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return (d / np.sqrt(lam)) @ V.T


def _unit_p_ball(P: np.ndarray, count: int, seed: int) -> np.ndarray:
    lam, V = _p_range(P)
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((count, lam.size))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / max(lam.size, 1))
    return (d * r / np.sqrt(lam)) @ V.T


def verify_terminal_decrease(gain: GainSet, A, B, weights: CostWeights,
                             sample_count: int = TERMINAL_SAMPLES, seed: int = 0) -> TerminalDecreaseReport:
    """V_f((A+BK)x) - V_f(x) <= -(x'Qx + (Kx)'R(Kx)) on samples of X_eps."""
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    eps = gain.epsilon if gain.epsilon is not None else 1.0
    X = eps * _unit_p_ball(gain.P, sample_count, seed)
    X = np.vstack([np.zeros((1, A.shape[0])), X])
    A_cl = A + B @ gain.K
    X_next = X @ A_cl.T
    U = X @ gain.K.T
    v_now = np.einsum("ij,jk,ik->i", X, gain.P, X)
    v_next = np.einsum("ij,jk,ik->i", X_next, gain.P, X_next)
    stage = np.einsum("ij,jk,ik->i", X, weights.Q, X) + np.einsum("ij,jk,ik->i", U, weights.R, U)
    slack = v_next - v_now + stage
    tol = 1e-10 * np.maximum(1.0, v_now)
    bad = np.nonzero(slack > tol)[0]
    witness = X[bad[np.argmax(slack[bad])]] if bad.size else None
    return TerminalDecreaseReport(ok=bad.size == 0, max_slack=float(np.max(slack)),
                                  samples=int(X.shape[0]), witness=witness)


def terminal_radius(gain: GainSet, weights: CostWeights, input_box: Box, state_box: Box, A, B,
                    center=None, samples: int = TERMINAL_SAMPLES, eps_max: float = TERMINAL_EPS_MAX,
                    seed: int = 0) -> float:
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    n = A.shape[0]
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    D = _unit_p_sphere(gain.P, samples, seed)
    KD = D @ gain.K.T
    A_cl = A + B @ gain.K
    ND = D @ A_cl.T
    pn_next = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", ND, gain.P, ND), 0.0))
    ulo, uhi = input_box.lo, input_box.hi
    slo, shi = state_box.lo, state_box.hi

    def feasible(eps: float) -> bool:
        U = eps * KD
        if np.any(U < ulo) or np.any(U > uhi):
            return False
        Xs = center + eps * D
        if np.any(Xs < slo) or np.any(Xs > shi):
            return False
        return bool(np.all(pn_next <= 1.0 + 1e-9))

    if feasible(eps_max):
        eps = eps_max
    elif not feasible(TERMINAL_EPS_MIN):
        raise TerminalSetEmpty("terminal region collapses below 1e-9")
    else:
        lo, hi = TERMINAL_EPS_MIN, eps_max
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if feasible(mid):
                lo = mid
            else:
                hi = mid
        eps = lo
    log("debug", "terminal_radius", epsilon=eps, reduced=gain.reduced)
    return float(eps)
