import numpy as np
import pytest
from pydantic import ValidationError

from gains import CostWeights, default_weights, synthesize
from linearize import linearize
from ocp import (
    HorizonConfig, OcpSolution, TerminalMode, TrackingReference, build_ocp1, build_ocp2, condense, horizon_cost,
    rollout_affine, shifted_guess, solve_ocp1, solve_ocp2, stage_cost, terminal_cost,
)
from plant import Box, ConstraintViolation, LinearPlant, initial_reach_state
from tube import TighteningMode, build_tube_profile, predictive_state_set

DI_WEIGHTS = CostWeights(Q=np.eye(2), R=np.array([[0.1]]))


def _di_plant(u_max=1.0):
    return LinearPlant(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]),
                       state_box=Box(lower=(-10.0, -1.0), upper=(10.0, 1.0)),
                       input_box=Box(lower=(-u_max,), upper=(u_max,)))


def _di_setup(horizon, x0, ref_state=(0.0, 0.0), u_max=1.0, epsilon=1.0):
    plant = _di_plant(u_max)
    model = linearize(plant, x0, np.zeros(1), horizon.delta)
    gains = synthesize(model.A, model.B, DI_WEIGHTS).with_epsilon(epsilon)
    tube = build_tube_profile(model.A, model.B, gains.K, plant.state_box, plant.input_box, horizon.N,
                              eta=0.0, l=0.0, mode=TighteningMode.NONE)
    ref = TrackingReference.constant(np.asarray(ref_state), horizon.N)
    return plant, model, gains, tube, ref


def test_stage_cost_examples(weights):
    assert stage_cost(np.zeros(5), np.zeros(3), weights) == 0.0
    assert stage_cost(np.eye(5)[0], np.zeros(3), weights) == pytest.approx(0.1)
    assert stage_cost(np.zeros(5), np.ones(3), weights) == pytest.approx(0.03)
    with pytest.raises(ValueError):
        stage_cost(np.zeros(4), np.zeros(3), weights)


def test_terminal_cost_needs_p(weights):
    assert terminal_cost(np.ones(5), weights) == 0.0
    w = weights.with_terminal(np.eye(5))
    assert terminal_cost(np.ones(5), w) == pytest.approx(5.0)


def test_horizon_config():
    assert HorizonConfig().N == 30
    assert HorizonConfig(horizon_T=3, horizon_unit="steps", m_smooth=1, m_triggered=2).N == 3
    with pytest.raises(ValidationError):
        HorizonConfig(horizon_T=3, horizon_unit="steps", m_smooth=1, m_triggered=28)


def test_condensed_rollout_matches_direct_rollout():
    rng = np.random.default_rng(0)
    A, B, c = np.array([[1.0, 0.1], [0.0, 1.0]]), np.array([[0.005], [0.1]]), np.array([0.01, -0.02])
    x0 = np.array([1.0, 0.5])
    U = rng.standard_normal((5, 1))
    base, G = condense(A, B, c, x0, 5)
    X = rollout_affine(A, B, c, x0, U)
    for i in range(6):
        assert base[i] + G[i] @ U.reshape(-1) == pytest.approx(X[i])


def test_ocp2_at_reference_gives_zero_input():
    hz = HorizonConfig(delta=0.1, horizon_T=1, horizon_unit="steps", m_smooth=1, m_triggered=1)
    x0 = np.zeros(2)
    _, model, gains, tube, ref = _di_setup(hz, x0)
    ocp = build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, DI_WEIGHTS, hz, ref)
    sol = solve_ocp2(ocp)
    assert sol.ok
    assert sol.nominal_inputs == pytest.approx(np.zeros((1, 1)), abs=1e-6)
    assert sol.cost == pytest.approx(0.0, abs=1e-9)


def test_ocp2_zero_input_box_gives_pure_drift(short_horizon):
    x0 = np.array([1.0, 0.2])
    _, model, gains, tube, ref = _di_setup(short_horizon, x0, u_max=0.0, epsilon=0.0)
    sol = solve_ocp2(build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, DI_WEIGHTS,
                                short_horizon, ref))
    assert sol.ok
    assert sol.nominal_inputs == pytest.approx(np.zeros((6, 1)), abs=1e-5)
    drift = rollout_affine(model.A, model.B, model.offset_discrete, x0, np.zeros((6, 1)))
    assert sol.nominal_states == pytest.approx(drift, abs=1e-5)


def test_ocp2_dimensions(short_horizon):
    x0 = np.array([1.0, 0.2])
    _, model, gains, tube, ref = _di_setup(short_horizon, x0)
    ocp = build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, DI_WEIGHTS, short_horizon, ref)
    N, m, n = short_horizon.N, 1, 2
    # S has one row per tracked coordinate with positive P eigenvalue
    d = 2
    assert ocp.qp.dim == m * N + 1
    assert ocp.qp.n_constraints == m * N + n * N + 2 * d + 1


def test_ocp2_cost_matches_independent_summation(short_horizon):
    x0 = np.array([2.0, -0.5])
    _, model, gains, tube, ref = _di_setup(short_horizon, x0)
    sol = solve_ocp2(build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, DI_WEIGHTS,
                                short_horizon, ref))
    assert sol.ok
    w = DI_WEIGHTS.with_terminal(gains.P)
    assert horizon_cost(sol, w, ref) == pytest.approx(sol.cost, rel=1e-9)
    assert sol.objective == pytest.approx(sol.cost + DI_WEIGHTS.slack_weight * sol.slack ** 2, abs=1e-5)
    assert np.all(np.abs(sol.nominal_inputs) <= 1.0 + 1e-6)
    assert np.all(np.abs(sol.nominal_states[:, 1]) <= 1.0 + 1e-5)


def test_hard_terminal_mode_fixes_slack(short_horizon):
    x0 = np.array([0.1, 0.0])
    _, model, gains, tube, ref = _di_setup(short_horizon, x0, epsilon=5.0)
    ocp = build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, DI_WEIGHTS, short_horizon, ref,
                     terminal_mode=TerminalMode.HARD)
    sol = solve_ocp2(ocp)
    assert sol.ok
    assert sol.slack == pytest.approx(0.0, abs=1e-6)


def test_linear_plant_ocp1_matches_ocp2(short_horizon):
    x0 = np.array([2.0, -0.5])
    plant, model, gains, tube, ref = _di_setup(short_horizon, x0)
    qp_sol = solve_ocp2(build_ocp2(model, tube, predictive_state_set(x0, 0.0), gains, DI_WEIGHTS,
                                   short_horizon, ref))
    nlp = build_ocp1(plant, x0, DI_WEIGHTS, short_horizon, ref, tube, gains)
    sqp_sol = solve_ocp1(nlp)
    assert sqp_sol.ok
    assert sqp_sol.nominal_inputs == pytest.approx(qp_sol.nominal_inputs, abs=1e-8)
    assert sqp_sol.cost == pytest.approx(qp_sol.cost, rel=1e-8, abs=1e-10)


def test_ocp1_rejects_initial_state_outside_box(short_horizon):
    plant, _, gains, tube, ref = _di_setup(short_horizon, np.zeros(2))
    with pytest.raises(ConstraintViolation):
        build_ocp1(plant, np.array([0.0, 5.0]), DI_WEIGHTS, short_horizon, ref, tube, gains)


def test_ocp1_improves_on_zero_input_for_arm(arm, short_horizon):
    weights = default_weights()
    x0 = initial_reach_state(arm.params)
    model = linearize(arm, x0, np.zeros(3), short_horizon.delta)
    gains = synthesize(model.A, model.B, weights).with_epsilon(0.5)
    tube = build_tube_profile(model.A, model.B, gains.K, arm.state_box, arm.input_box, short_horizon.N,
                              eta=arm.eta1, l=0.0, index_cap=short_horizon.m_smooth)
    target = x0.copy()
    target[:2] = (2.0, 6.0)
    mask = np.array([True, True, False, False, False])
    ref = TrackingReference.constant(target, short_horizon.N, mask=mask)
    nlp = build_ocp1(arm, x0, weights, short_horizon, ref, tube, gains)
    sol = solve_ocp1(nlp)
    assert sol.ok
    U0 = np.zeros((short_horizon.N, 3))
    idle = nlp.layout.cost(nlp.trajectory(U0), U0, 0.0)
    assert sol.cost < idle
    assert np.all(np.abs(sol.nominal_inputs) <= arm.input_box.hi + 1e-6)


def test_shifted_guess():
    sol = OcpSolution(nominal_inputs=np.arange(6.0).reshape(3, 2), nominal_states=np.zeros((4, 2)),
                      cost=0.0, objective=0.0, status="optimal", solve_time=0.0)
    g = shifted_guess(sol, 1)
    assert g == pytest.approx([2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 0.0])
    assert shifted_guess(sol, 5) == pytest.approx(np.zeros(7))
