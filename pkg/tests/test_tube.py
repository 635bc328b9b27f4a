import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plant import Box, sample_disturbance
from tube import (
    InfeasibleTightening, TighteningMode, build_tube_profile, deviation_bound, max_eigenvalue_modulus,
    predictive_state_set, saturate, state_margin, tighten_input_box, tighten_state_box, tube_growth_factor,
)

W = math.pi / 16
INPUT_BOX = Box(lower=(-W,) * 3, upper=(W,) * 3)


@pytest.mark.parametrize("A, expected", [
    (np.eye(3), 1.0),
    (np.diag([0.5, 2.0]), 2.0),
    (np.array([[math.cos(0.3), -math.sin(0.3)], [math.sin(0.3), math.cos(0.3)]]), 1.0),
])
def test_max_eigenvalue_modulus(A, expected):
    assert max_eigenvalue_modulus(A) == pytest.approx(expected)


def test_max_eigenvalue_modulus_rejects_bad_input():
    with pytest.raises(ValueError):
        max_eigenvalue_modulus(np.ones((2, 3)))
    with pytest.raises(ValueError):
        max_eigenvalue_modulus(np.array([[np.nan]]))


@pytest.mark.parametrize("lam, m, eta, expected", [
    (0.7, 0, 1.0, 0.0),
    (2.0, 3, 1.0, 7.0),
    (1.0, 5, 0.1, 0.5),
])
def test_deviation_bound_values(lam, m, eta, expected):
    assert deviation_bound(lam, m, eta) == pytest.approx(expected)


@settings(max_examples=100, deadline=None)
@given(lam=st.floats(min_value=0.0, max_value=3.0), m=st.integers(min_value=0, max_value=30),
       eta=st.floats(min_value=0.0, max_value=1.0))
def test_deviation_bound_recursion_and_monotonicity(lam, m, eta):
    # D(m+1) = lam * D(m) + eta
    d_m = deviation_bound(lam, m, eta)
    d_next = deviation_bound(lam, m + 1, eta)
    assert d_next == pytest.approx(lam * d_m + eta, rel=1e-9, abs=1e-12)
    assert d_next >= d_m * (1 - 1e-12) - 1e-12


def test_deviation_bound_rejects_negative_steps():
    with pytest.raises(ValueError):
        deviation_bound(1.0, -1, 0.1)


def test_growth_factor_covers_nonnormal_matrices():
    A = np.array([[0.5, 10.0], [0.0, 0.5]])
    assert max_eigenvalue_modulus(A) == pytest.approx(0.5)
    assert tube_growth_factor(A) == pytest.approx(np.linalg.norm(A, 2))
    B, K = np.array([[0.0], [1.0]]), np.array([[2.0, 0.0]])
    assert tube_growth_factor(A, B, K) == pytest.approx(np.linalg.norm(A, 2) + 2.0)


def test_deviation_bound_contains_disturbed_linear_rollouts():
    A = np.array([[1.0, 0.1], [0.0, 0.95]])
    eta, m = 0.01, 6
    radius = deviation_bound(tube_growth_factor(A), m, eta)
    x0 = np.array([1.0, -0.5])
    nominal = np.linalg.matrix_power(A, m) @ x0
    tube = predictive_state_set(nominal, radius)
    for seed in range(200):
        rng = np.random.default_rng(seed)
        x = x0
        for _ in range(m):
            x = A @ x + sample_disturbance(rng, eta, 2)
        assert tube.contains(x)


def test_predictive_set_membership():
    s = predictive_state_set(np.array([1.0, 2.0]), 0.0)
    assert s.contains([1.0, 2.0])
    assert not s.contains([1.0, 2.001])
    s = predictive_state_set(np.zeros(3), 0.5)
    assert s.contains([0.3, 0.4, 0.0])
    assert s.distance([0.3, 0.4, 0.0]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        predictive_state_set(np.zeros(2), -1.0)


def test_state_margin_example():
    assert state_margin(2, 0.1, 0.5) == pytest.approx(0.45)
    assert state_margin(0, 0.1, 0.5) == 0.0


def test_tighten_state_box_moves_only_finite_bounds():
    inf = float("inf")
    box = Box(lower=(-inf, 0.0), upper=(inf, 1.0))
    t = tighten_state_box(box, 2, 0.1, 0.5)
    assert not t.infeasible
    assert t.box.lower[1] == pytest.approx(0.45)
    assert t.box.upper[1] == pytest.approx(0.55)
    assert t.box.lower[0] == -inf
    assert tighten_state_box(box, 0, 0.1, 0.5).box == box


def test_tighten_state_box_flags_crossed_bounds():
    box = Box(lower=(0.0,), upper=(0.1,))
    t = tighten_state_box(box, 3, 0.1, 0.5)
    assert t.infeasible
    assert t.box is None


def test_tighten_input_box():
    assert tighten_input_box(INPUT_BOX, np.zeros((3, 5)), 1.0).box == INPUT_BOX
    assert tighten_input_box(INPUT_BOX, np.eye(3, 5), 0.0).box == INPUT_BOX
    # ||K|| = 2, radius pi/64 -> margin pi/32 leaves [-pi/32, pi/32]
    t = tighten_input_box(INPUT_BOX, 2.0 * np.eye(3, 5), math.pi / 64)
    assert t.box.upper[0] == pytest.approx(math.pi / 32)
    # a margin past the half-width empties the box
    assert tighten_input_box(INPUT_BOX, 2.0 * np.eye(3, 5), math.pi / 32 * 1.001).infeasible


def test_profile_caps_tightening_index():
    A, B = np.eye(2), np.array([[0.0], [0.1]])
    K = np.array([[-1.0, -1.0]])
    box = Box(lower=(-1.0, -1.0), upper=(1.0, 1.0))
    ubox = Box(lower=(-1.0,), upper=(1.0,))
    prof = build_tube_profile(A, B, K, box, ubox, horizon=6, eta=0.01, l=0.1, index_cap=2)
    assert len(prof.radii) == 7
    assert len(prof.per_step_state_boxes) == 7
    capped = prof.per_step_state_boxes[2]
    assert all(b == capped for b in prof.per_step_state_boxes[2:])
    assert prof.per_step_state_boxes[0] == box
    # state mode keeps the input box
    assert prof.tightened_input_box == ubox
    assert prof.require_feasible() is prof


def test_profile_full_mode_tightens_inputs():
    A, B = np.eye(2), np.array([[0.0], [0.1]])
    K = np.array([[-1.0, -1.0]])
    box = Box(lower=(-1.0, -1.0), upper=(1.0, 1.0))
    ubox = Box(lower=(-1.0,), upper=(1.0,))
    prof = build_tube_profile(A, B, K, box, ubox, horizon=4, eta=0.01, l=0.1, index_cap=2,
                              mode=TighteningMode.FULL)
    margin = np.linalg.norm(K, 2) * prof.radii[2]
    assert prof.tightened_input_box.upper[0] == pytest.approx(1.0 - margin)


def test_profile_certified_mode_uses_certified_eta():
    A, B = np.eye(2), np.array([[0.0], [0.1]])
    K = np.zeros((1, 2))
    box = Box(lower=(-1.0, -1.0), upper=(1.0, 1.0))
    ubox = Box(lower=(-1.0,), upper=(1.0,))
    prof = build_tube_profile(A, B, K, box, ubox, horizon=3, eta=0.01, l=0.0,
                              mode=TighteningMode.CERTIFIED, eta_certified=0.05)
    assert prof.eta == 0.05
    assert prof.radii[3] == pytest.approx(0.15)


def test_profile_none_mode_leaves_boxes():
    A, B = np.eye(2), np.array([[0.0], [0.1]])
    box = Box(lower=(-1.0, -1.0), upper=(1.0, 1.0))
    ubox = Box(lower=(-1.0,), upper=(1.0,))
    prof = build_tube_profile(A, B, np.zeros((1, 2)), box, ubox, horizon=3, eta=10.0, l=1.0,
                              mode=TighteningMode.NONE)
    assert not prof.infeasible
    assert all(b == box for b in prof.per_step_state_boxes)


def test_infeasible_profile_names_the_step():
    A, B = np.eye(1), np.array([[0.1]])
    box = Box(lower=(0.0,), upper=(0.1,))
    ubox = Box(lower=(-1.0,), upper=(1.0,))
    prof = build_tube_profile(A, B, np.zeros((1, 1)), box, ubox, horizon=5, eta=0.1, l=0.5)
    assert prof.infeasible
    assert prof.infeasible_step == 1
    with pytest.raises(InfeasibleTightening) as exc:
        prof.require_feasible()
    assert exc.value.step == 1


def test_saturate():
    u, flag = saturate([0.1, -0.1, 0.0], INPUT_BOX)
    assert not flag
    u, flag = saturate([1.0, -0.1, 0.0], INPUT_BOX)
    assert flag
    assert u[0] == pytest.approx(W)
