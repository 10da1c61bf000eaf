import numpy as np
import pytest

import koopmpc as kp
from conftest import PRINTED_PENDULUM_A, PRINTED_PENDULUM_B, PRINTED_TAYLOR_A, PRINTED_TAYLOR_B


def test_lift_example1_values():
    d = kp.get_dictionary("example1")
    np.testing.assert_allclose(kp.lift(d, np.array([2.0, 3.0])), [2.0, 3.0, 4.0])
    np.testing.assert_array_equal(kp.lift(d, np.zeros(2)), np.zeros(3))


def test_lift_pendulum_values():
    d = kp.get_dictionary("pendulum3")
    np.testing.assert_allclose(
        kp.lift(d, np.array([np.pi / 2, 1.0])), [np.pi / 2, 1.0, 1.0]
    )


def test_lift_dimension_mismatch():
    d = kp.get_dictionary("example1")
    with pytest.raises(ValueError, match="dimension"):
        kp.lift(d, np.zeros(3))


def test_identity_first_reconstruction():
    rng = np.random.default_rng(0)
    for name in ("example1", "pendulum3", "identity2"):
        d = kp.get_dictionary(name)
        C = d.identity_first_matrix()
        for _ in range(50):
            x = rng.uniform(-5, 5, d.n)
            np.testing.assert_array_equal(C @ kp.lift(d, x), x)


def test_koopman_step_values():
    model = kp.example1_koopman_model()
    np.testing.assert_array_equal(
        kp.koopman_step(model, np.zeros(3), np.zeros(1)), np.zeros(3)
    )
    np.testing.assert_allclose(
        kp.koopman_step(model, np.array([1.0, 0.0, 1.0]), np.zeros(1)),
        [0.9, -5.0, 0.81],
    )


def test_koopman_step_printed_pendulum_matrices():
    model = kp.LiftedModel(
        A=PRINTED_PENDULUM_A, B=PRINTED_PENDULUM_B, C=np.array([[1.0, 0, 0], [0, 1.0, 0]])
    )
    np.testing.assert_allclose(
        kp.koopman_step(model, np.array([0.0, 0.0, 1.0]), np.zeros(1)),
        [0.0, 0.1962, 0.998],
    )


def test_koopman_step_dimension_errors():
    model = kp.example1_koopman_model()
    with pytest.raises(ValueError):
        kp.koopman_step(model, np.zeros(2), np.zeros(1))
    with pytest.raises(ValueError):
        kp.koopman_step(model, np.zeros(3), np.zeros(2))


def test_one_step_error_exact_embedding_grid():
    plant = kp.get_plant("example1")
    d = kp.get_dictionary("example1")
    model = kp.example1_koopman_model()
    g = np.linspace(-2, 2, 20)
    X1, X2, U = np.meshgrid(g, g, g, indexing="ij")
    x = np.stack([X1.ravel(), X2.ravel()], axis=-1)
    u = U.reshape(-1, 1)
    err = kp.one_step_error(model, d, plant, x, u)
    assert np.max(np.abs(err)) <= 1e-12


def test_one_step_error_at_origin():
    plant = kp.get_plant("pendulum")
    d = kp.get_dictionary("pendulum3")
    model = kp.LiftedModel(
        A=PRINTED_PENDULUM_A, B=PRINTED_PENDULUM_B, C=np.array([[1.0, 0, 0], [0, 1.0, 0]])
    )
    np.testing.assert_array_equal(
        kp.one_step_error(model, d, plant, np.zeros(2), np.zeros(1)), np.zeros(3)
    )


def test_one_step_error_taylor_padded_pendulum():
    # Taylor linearization embedded in the 3-dim lift with zero padding; the
    # residual at x = (1, 0), u = 0 follows from expanding psi(f(x, u)) by
    # hand: f = (1, 0.1962 sin 1), psi(f) = (1, 0.1962 sin 1, sin 1), and the
    # padded model predicts (1, 0.1962, 0) from psi(x) = (1, 0, sin 1).
    plant = kp.get_plant("pendulum")
    d = kp.get_dictionary("pendulum3")
    A_t, B_t = kp.taylor_linearize(plant, np.zeros(2), np.zeros(1))
    A_pad = np.zeros((3, 3))
    A_pad[:2, :2] = A_t
    B_pad = np.zeros((3, 1))
    B_pad[:2] = B_t
    model = kp.LiftedModel(A=A_pad, B=B_pad, C=np.array([[1.0, 0, 0], [0, 1.0, 0]]))
    err = kp.one_step_error(model, d, plant, np.array([1.0, 0.0]), np.zeros(1))
    s1 = np.sin(1.0)
    oracle = np.array([1.0, 0.1962 * s1, s1]) - A_pad @ np.array([1.0, 0.0, s1])
    np.testing.assert_allclose(err, oracle, atol=1e-12)
    np.testing.assert_allclose(
        err, [0.0, -0.03110339278065802, 0.8414709848078965], atol=1e-12
    )


def test_taylor_linearize_example1():
    plant = kp.get_plant("example1")
    A_t, B_t = kp.taylor_linearize(plant, np.zeros(2), np.zeros(1))
    np.testing.assert_allclose(A_t, [[0.9, 0.0], [0.0, 1.5]], atol=1e-6)
    np.testing.assert_allclose(B_t, [[0.0], [1.0]], atol=1e-6)


def test_taylor_linearize_pendulum_matches_printed():
    plant = kp.get_plant("pendulum")
    A_t, B_t = kp.taylor_linearize(plant, np.zeros(2), np.zeros(1))
    np.testing.assert_allclose(A_t, PRINTED_TAYLOR_A, atol=1e-6)
    np.testing.assert_allclose(B_t, PRINTED_TAYLOR_B, atol=1e-6)


def test_taylor_linearize_linear_plant_exact():
    plant = kp.Plant(name="lin", n=1, m=1, step=lambda x, u: 2.0 * x + u)
    A_t, B_t = kp.taylor_linearize(plant, np.zeros(1), np.zeros(1))
    np.testing.assert_allclose(A_t, [[2.0]], atol=1e-10)
    np.testing.assert_allclose(B_t, [[1.0]], atol=1e-10)


def test_taylor_linearize_rejects_bad_step():
    plant = kp.get_plant("example1")
    with pytest.raises(ValueError, match="positive"):
        kp.taylor_linearize(plant, np.zeros(2), np.zeros(1), h=0.0)


def test_finite_difference_second_order():
    # Central differences converge at order h^2: halving h cuts the error by
    # about 4 on a plant with nonvanishing third derivative.
    plant = kp.get_plant("pendulum")
    x0 = np.array([0.7, 0.0])
    exact = np.array([[1.0, 0.02], [0.1962 * np.cos(0.7), 0.996]])
    e1 = np.abs(kp.taylor_linearize(plant, x0, np.zeros(1), h=1e-3)[0] - exact).max()
    e2 = np.abs(kp.taylor_linearize(plant, x0, np.zeros(1), h=5e-4)[0] - exact).max()
    assert 3.0 < e1 / e2 < 5.0


def test_builtin_plants_fix_origin_and_are_deterministic():
    for name in ("example1", "pendulum"):
        plant = kp.get_plant(name)
        np.testing.assert_array_equal(
            plant.step(np.zeros(plant.n), np.zeros(plant.m)), np.zeros(plant.n)
        )
        x = np.array([0.3, -1.2])
        u = np.array([0.7])
        np.testing.assert_array_equal(plant.step(x, u), plant.step(x, u))


def test_lifted_model_rejects_bad_c():
    with pytest.raises(ValueError, match="identity-first"):
        kp.LiftedModel(A=np.eye(3), B=np.zeros((3, 1)), C=np.array([[0.0, 1, 0], [1, 0, 0]]))
    with pytest.raises(ValueError, match="square"):
        kp.LiftedModel(A=np.zeros((2, 3)), B=np.zeros((2, 1)), C=np.eye(2))


def test_stage_cost_rejects_indefinite():
    with pytest.raises(ValueError, match="positive definite"):
        kp.StageCost(Q=np.diag([1.0, 0.0]), R=np.eye(1))
    with pytest.raises(ValueError, match="positive definite"):
        kp.StageCost(Q=np.eye(2), R=[[-1.0]])


def test_check_lifted_model_flags_uncontrollable_unstable_mode():
    model = kp.LiftedModel(A=np.diag([2.0, 0.5]), B=np.array([[0.0], [1.0]]), C=np.eye(2))
    report = kp.check_lifted_model(model)
    assert not report.stabilizable
    assert any("stabilizability" in f for f in report.failed)


def test_check_lifted_model_flags_unobservable_mode():
    model = kp.LiftedModel(
        A=2.0 * np.eye(2), B=np.array([[1.0], [1.0]]), C=np.array([[1.0, 0.0]])
    )
    report = kp.check_lifted_model(model)
    assert not report.observable


def test_check_lifted_model_passes_example1():
    report = kp.check_lifted_model(kp.example1_koopman_model())
    assert report.ok


def test_box_interior_radius_and_clip():
    box = kp.Box([-2.0, -1.0], [3.0, 4.0])
    assert box.interior_radius() == 1.0
    assert box.contains(np.array([0.5, -0.5]))
    assert not box.contains(np.array([0.5, -1.5]))
    np.testing.assert_array_equal(box.clip(np.array([5.0, -9.0])), [3.0, -1.0])
    with pytest.raises(ValueError, match="empty"):
        kp.Box([1.0], [0.0])


def test_registry_lookup_errors():
    with pytest.raises(KeyError, match="unknown plant"):
        kp.get_plant("nope")
    with pytest.raises(KeyError, match="unknown dictionary"):
        kp.get_dictionary("nope")
