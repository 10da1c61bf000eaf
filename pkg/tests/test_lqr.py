import numpy as np
import pytest
import scipy.linalg

import koopmpc as kp
from koopmpc.lqr import (
    ConditioningError,
    RiccatiConvergenceError,
    solve_dare,
    solve_dlyap,
    spectral_radius,
)
from koopmpc.lqr import InstabilityError
from oracles import dare_value_iteration

GOLDEN = (1.0 + np.sqrt(5.0)) / 2.0


def scalar(v):
    return np.array([[float(v)]])


def test_scalar_golden_ratio():
    sol = solve_dare(scalar(1), scalar(1), scalar(1), scalar(1))
    assert abs(sol.P[0, 0] - GOLDEN) <= 1e-9
    assert sol.residual <= 1e-10


def test_zero_dynamics_returns_state_weight():
    Qc = np.diag([2.0, 3.0])
    sol = solve_dare(np.zeros((2, 2)), np.ones((2, 1)), Qc, scalar(1))
    np.testing.assert_allclose(sol.P, Qc, atol=1e-12)
    np.testing.assert_allclose(sol.K, np.zeros((1, 2)), atol=1e-12)


def test_example1_dare_residual_and_stability(ex1):
    assert ex1.ric.residual <= 1e-10
    A_K = ex1.model.A + ex1.model.B @ ex1.ric.K
    assert spectral_radius(A_K) < 1.0


def test_solution_symmetry(ex1):
    assert np.linalg.norm(ex1.ric.P - ex1.ric.P.T) <= 1e-12


def _vi_instances():
    model = kp.example1_koopman_model()
    rng = np.random.default_rng(7)
    A3 = rng.normal(size=(3, 3))
    A3 *= 0.9 / spectral_radius(A3)
    return [
        (scalar(1), scalar(1), scalar(1), scalar(1)),
        (np.zeros((2, 2)), np.ones((2, 1)), np.diag([2.0, 3.0]), scalar(1)),
        (np.diag([0.5, 0.8]), np.array([[1.0], [1.0]]), np.eye(2), scalar(1)),
        (model.A, model.B, model.C.T @ model.C, scalar(1)),
        (A3, rng.normal(size=(3, 1)), np.eye(3), scalar(0.5)),
    ]


@pytest.mark.parametrize("idx", range(5))
def test_value_iteration_oracle(idx):
    A, B, Qc, R = _vi_instances()[idx]
    sol = solve_dare(A, B, Qc, R)
    P_vi = dare_value_iteration(A, B, Qc, R, steps=500)
    assert np.max(np.abs(sol.P - P_vi)) <= 1e-6


@pytest.mark.parametrize("idx", range(5))
def test_against_scipy_dare(idx):
    A, B, Qc, R = _vi_instances()[idx]
    if np.linalg.matrix_rank(Qc) < Qc.shape[0]:
        Qc = Qc + 1e-9 * np.eye(Qc.shape[0])
    sol = solve_dare(A, B, Qc, R)
    P_ref = scipy.linalg.solve_discrete_are(A, B, Qc, R)
    assert np.max(np.abs(sol.P - P_ref)) <= 1e-7 * max(1.0, np.max(np.abs(P_ref)))


def test_closed_loop_decrease_identity(ex1):
    # z'((A+BK)'P(A+BK) - P)z = -z'(C'QC + K'RK)z for the solved pair.
    model, ric, cost = ex1.model, ex1.ric, ex1.cost
    A_K = model.A + model.B @ ric.K
    Qc = model.C.T @ cost.Q @ model.C
    M_lhs = A_K.T @ ric.P @ A_K - ric.P
    M_rhs = -(Qc + ric.K.T @ cost.R @ ric.K)
    rng = np.random.default_rng(1)
    for _ in range(100):
        z = rng.normal(size=3)
        assert abs(z @ M_lhs @ z - z @ M_rhs @ z) <= 1e-8 * max(1.0, z @ z)


def test_nonconvergence_carries_residual():
    with pytest.raises(RiccatiConvergenceError) as info:
        solve_dare(scalar(1), scalar(1), scalar(1), scalar(1), tol=1e-16, max_iter=3)
    assert info.value.residual > 0


def test_conditioning_error_on_singular_input_weight():
    with pytest.raises(ConditioningError):
        solve_dare(np.zeros((1, 1)), np.zeros((1, 1)), scalar(1), scalar(0))


def test_dlyap_scalar_series():
    P = solve_dlyap(scalar(0.5), scalar(1))
    assert abs(P[0, 0] - 4.0 / 3.0) <= 1e-10


def test_dlyap_zero_dynamics():
    Q = np.diag([1.5, 2.5])
    np.testing.assert_allclose(solve_dlyap(np.zeros((2, 2)), Q), Q, atol=1e-14)


def test_dlyap_decoupled_diagonal():
    P = solve_dlyap(np.diag([0.9, 0.5]), np.eye(2))
    np.testing.assert_allclose(np.diag(P), [1.0 / 0.19, 4.0 / 3.0], atol=1e-10)
    assert abs(P[0, 1]) <= 1e-12


def test_dlyap_dominates_weight(ex1):
    eigs = np.linalg.eigvalsh(ex1.ing.Phat - ex1.ing.Qhat)
    assert eigs[0] >= -1e-10


def test_dlyap_rejects_unstable():
    with pytest.raises(InstabilityError):
        solve_dlyap(scalar(1.0), scalar(1))


def test_lqr_policy_zero_state(ex1):
    ctrl = kp.lqr_policy(ex1.ric.K, ex1.dict3)
    u, diag = ctrl(np.zeros(2))
    np.testing.assert_allclose(u, np.zeros(1), atol=1e-12)
    assert diag["status"] == "ok"


def test_lqr_policy_pinned_value(ex1):
    # Regression snapshot: K psi((1, 0)) for the exact lifted design.
    ctrl = kp.lqr_policy(ex1.ric.K, ex1.dict3)
    u, _ = ctrl(np.array([1.0, 0.0]))
    assert abs(u[0] - 5.445097839359465) <= 1e-6


def test_lqr_policy_zero_gain():
    d = kp.get_dictionary("example1")
    ctrl = kp.lqr_policy(np.zeros((1, 3)), d)
    rng = np.random.default_rng(0)
    for _ in range(5):
        u, _ = ctrl(rng.normal(size=2))
        np.testing.assert_array_equal(u, np.zeros(1))


def test_lqr_policy_dimension_check(ex1):
    with pytest.raises(ValueError, match="columns"):
        kp.lqr_policy(np.zeros((1, 2)), ex1.dict3)


def test_riccati_solution_serializable(ex1):
    payload = ex1.ric.to_dict()
    np.testing.assert_array_equal(np.asarray(payload["P"]), ex1.ric.P)
    assert payload["iterations"] > 0
