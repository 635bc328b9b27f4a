import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError
from scipy.optimize import minimize

from gains import CostWeights, synthesize
from linearize import linearize
from ocp import TrackingReference, build_ocp2
from plant import Box, LinearPlant
from solver import (
    NlpEval, NlpSpec, QpInfeasible, QpProblem, QpSettings, QpSolver, QpStatus, dump_problem, kkt_residuals,
    load_problem, solve_nlp_sqp, solve_qp,
)
from tube import TighteningMode, build_tube_profile, predictive_state_set


def test_unconstrained_minimum():
    p = QpProblem.build(np.diag([2.0, 4.0]), [-2.0, -4.0])
    sol = solve_qp(p)
    assert sol.ok
    assert sol.primal == pytest.approx([1.0, 1.0], abs=1e-5)
    assert sol.objective == pytest.approx(-3.0, abs=1e-6)


def test_active_bound_and_multiplier():
    # min (x - 2)^2 s.t. x <= 1
    p = QpProblem.build([[2.0]], [-4.0], C=[[1.0]], lower=[-np.inf], upper=[1.0], constant=4.0)
    sol = solve_qp(p)
    assert sol.ok
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-6)
    assert sol.dual[0] == pytest.approx(2.0, abs=1e-5)
    assert sol.objective == pytest.approx(1.0, abs=1e-6)
    assert kkt_residuals(p, sol.primal, sol.dual).within(1e-6)


def test_equality_constraint():
    # min x'x s.t. x0 + x1 = 1
    p = QpProblem.build(2 * np.eye(2), np.zeros(2), C=[[1.0, 1.0]], lower=[1.0], upper=[1.0])
    sol = solve_qp(p)
    assert sol.ok
    assert sol.primal == pytest.approx([0.5, 0.5], abs=1e-6)


def test_primal_infeasible_certificate():
    p = QpProblem.build([[1.0]], [0.0], C=[[1.0], [1.0]], lower=[1.0, -np.inf], upper=[np.inf, 0.0])
    sol = solve_qp(p)
    assert sol.status == QpStatus.INFEASIBLE
    assert sol.certificate == "primal"
    assert not sol.ok


def test_dual_infeasible_certificate():
    p = QpProblem.build([[0.0]], [-1.0])
    sol = solve_qp(p)
    assert sol.status == QpStatus.INFEASIBLE
    assert sol.certificate == "dual"


def test_problem_validation():
    with pytest.raises(ValidationError):
        QpProblem(H=np.eye(2), g=np.zeros(3), C=np.zeros((0, 3)), lower=np.zeros(0), upper=np.zeros(0))
    with pytest.raises(ValidationError):
        QpProblem.build(np.eye(1), [0.0], C=[[1.0]], lower=[1.0], upper=[0.0])


def test_max_iterations_reported():
    p = QpProblem.build(np.diag([1.0, 1e-3]), [1.0, 1.0], C=np.eye(2), lower=[-1.0, -1.0], upper=[1.0, 1.0])
    sol = QpSolver(p, QpSettings(max_iter=1, polish=False, fallback=False)).solve()
    assert sol.status in (QpStatus.MAX_ITERATIONS, QpStatus.OPTIMAL)
    assert sol.iterations == 1


def test_warm_start_from_solution_finishes_fast():
    rng = np.random.default_rng(1)
    M = rng.standard_normal((6, 6))
    p = QpProblem.build(M @ M.T + np.eye(6), rng.standard_normal(6), C=np.eye(6),
                        lower=-0.3 * np.ones(6), upper=0.3 * np.ones(6))
    cold = solve_qp(p)
    warm = solve_qp(p, warm_start=(cold.primal, cold.dual))
    assert cold.ok and warm.ok
    assert warm.iterations <= max(1.0, 0.1 * cold.iterations)
    assert warm.primal == pytest.approx(cold.primal, abs=1e-5)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000), d=st.integers(min_value=1, max_value=8))
def test_box_qp_matches_reference_solver(seed, d):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((d, d))
    H = M @ M.T + 0.5 * np.eye(d)
    g = 3.0 * rng.standard_normal(d)
    p = QpProblem.build(H, g, C=np.eye(d), lower=-np.ones(d), upper=np.ones(d))
    sol = solve_qp(p)
    assert sol.ok
    ref = minimize(lambda x: p.objective(x), np.zeros(d), jac=lambda x: H @ x + g,
                   bounds=[(-1.0, 1.0)] * d, method="L-BFGS-B", options={"ftol": 1e-14, "gtol": 1e-10})
    assert sol.objective <= ref.fun + 1e-5
    assert np.all(np.abs(sol.primal) <= 1.0 + 1e-6)


class _LinearlyConstrainedLsq(NlpSpec):
    """min (z0 - 1)^2 + (z1 - 2)^2 s.t. lower <= z0 + z1 <= bound."""

    def __init__(self, bound: float = 2.0, lower: float = -np.inf):
        self.bound = bound
        self.lo = lower

    @property
    def dim(self) -> int:
        return 2

    def evaluate(self, z, derivatives=True):
        r = z - np.array([1.0, 2.0])
        s = z[0] + z[1]
        ev = NlpEval(cost=float(r @ r), cons=np.array([s, s]),
                     lower=np.array([-np.inf, self.lo]), upper=np.array([self.bound, np.inf]))
        if derivatives:
            ev.grad = 2 * r
            ev.hess = 2 * np.eye(2)
            ev.jac = np.array([[1.0, 1.0], [1.0, 1.0]])
        return ev


def test_sqp_solves_quadratic_problem_in_one_step():
    res = solve_nlp_sqp(_LinearlyConstrainedLsq(), np.zeros(2))
    assert res.status == "converged"
    assert res.z == pytest.approx([0.5, 1.5], abs=1e-5)
    assert res.iterations == 1
    assert res.violation <= 1e-6
    assert all(b <= a + 1e-12 for a, b in zip(res.cost_history[1:], res.cost_history[2:]))


def test_sqp_infeasible_first_subproblem():
    with pytest.raises(QpInfeasible):
        solve_nlp_sqp(_LinearlyConstrainedLsq(bound=0.0, lower=5.0), np.zeros(2))


def test_dump_and_load(tmp_path):
    p = QpProblem.build([[2.0, 0.5], [0.5, 1.0]], [0.1, -0.3], C=[[1.0, 0.0], [1.0, 1.0]],
                        lower=[-np.inf, 0.0], upper=[1.0 / 3.0, np.inf], constant=0.25)
    path = dump_problem(p, tmp_path / "qp.txt")
    assert path.read_text().startswith("# qp-problem v1\n")
    q = load_problem(path)
    assert np.array_equal(q.H, p.H)
    assert np.array_equal(q.g, p.g)
    assert np.array_equal(q.C, p.C)
    assert np.array_equal(q.lower, p.lower)
    assert np.array_equal(q.upper, p.upper)
    assert q.constant == p.constant


def test_dump_without_constraints(tmp_path):
    p = QpProblem.build(np.eye(2), [1.0, 1.0])
    q = load_problem(dump_problem(p, tmp_path / "qp.txt"))
    assert q.n_constraints == 0
    assert q.dim == 2


def test_iteration_limit_is_finished_by_interior_point():
    # both bounds active; three splitting steps are far from converged
    p = QpProblem.build(np.diag([2.0, 4.0]), [-4.0, 8.0], C=np.eye(2), lower=[-1.0, -1.0], upper=[1.0, 1.0])
    sol = QpSolver(p, QpSettings(max_iter=3, polish=False)).solve()
    assert sol.ok
    assert sol.method == "interior_point"
    assert sol.primal == pytest.approx([1.0, -1.0], abs=1e-6)
    assert sol.dual == pytest.approx([2.0, -4.0], abs=1e-5)
    assert kkt_residuals(p, sol.primal, sol.dual).within(1e-6)


def test_interior_point_handles_equality_rows():
    p = QpProblem.build(2 * np.eye(2), np.zeros(2), C=[[1.0, 1.0], [1.0, 0.0]], lower=[1.0, -np.inf],
                        upper=[1.0, 0.2])
    sol = QpSolver(p, QpSettings(max_iter=2, polish=False)).solve()
    assert sol.ok
    assert sol.method == "interior_point"
    assert sol.primal == pytest.approx([0.2, 0.8], abs=1e-6)


def test_active_set_polish_recovers_degenerate_box():
    # many saturated coordinates with large multipliers
    d = 40
    H = np.diag(np.linspace(1e-3, 1.0, d))
    g = np.linspace(-50.0, 50.0, d)
    p = QpProblem.build(H, g, C=np.eye(d), lower=-0.2 * np.ones(d), upper=0.2 * np.ones(d))
    sol = solve_qp(p, settings=QpSettings(fallback=False))
    assert sol.ok
    assert sol.polished
    assert kkt_residuals(p, sol.primal, sol.dual).within(1e-6)
    assert sol.primal == pytest.approx(np.clip(-g / np.diag(H), -0.2, 0.2), abs=1e-8)


@pytest.mark.parametrize("seed", range(50))
def test_mpc_structured_instances_meet_kkt_tolerance(seed, short_horizon):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(2, 5)), int(rng.integers(1, 3))
    plant = LinearPlant(0.5 * rng.standard_normal((n, n)), rng.standard_normal((n, m)),
                        state_box=Box(lower=(-10.0,) * n, upper=(10.0,) * n),
                        input_box=Box(lower=(-1.0,) * m, upper=(1.0,) * m))
    weights = CostWeights(Q=np.eye(n), R=0.1 * np.eye(m))
    x0 = rng.uniform(-0.5, 0.5, n)
    model = linearize(plant, x0, np.zeros(m), short_horizon.delta)
    gains = synthesize(model.A, model.B, weights).with_epsilon(float(rng.uniform(0.05, 1.0)))
    tube = build_tube_profile(model.A, model.B, gains.K, plant.state_box, plant.input_box, short_horizon.N,
                              eta=0.0, l=0.0, mode=TighteningMode.NONE)
    ref = TrackingReference.constant(rng.uniform(-1.0, 1.0, n), short_horizon.N)
    ocp = build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, weights, short_horizon, ref)
    sol = solve_qp(ocp.qp)
    assert sol.ok
    assert kkt_residuals(ocp.qp, sol.primal, sol.dual).within(1e-6)
