"""Shared fixtures: the quadratic example pipeline and the pendulum pipeline."""

from types import SimpleNamespace

import numpy as np
import pytest

import koopmpc as kp

PRINTED_PENDULUM_A = np.array(
    [[1.0, 0.02, 0.0], [0.0, 0.996, 0.1962], [0.002, 0.02, 0.998]]
)
PRINTED_PENDULUM_B = np.array([[0.0], [0.02], [0.0]])
PRINTED_TAYLOR_A = np.array([[1.0, 0.02], [0.1962, 0.996]])
PRINTED_TAYLOR_B = np.array([[0.0], [0.02]])


@pytest.fixture(scope="session")
def ex1():
    """Quadratic two-state plant with its exact lifted model and LQR/MPC designs."""
    plant = kp.get_plant("example1")
    dict3 = kp.get_dictionary("example1")
    dict2 = kp.identity_dictionary(2)
    model = kp.example1_koopman_model()
    cost = kp.StageCost(Q=np.eye(2), R=np.eye(1))
    box = kp.Box([-10.0], [10.0])
    ric = kp.solve_dare(model.A, model.B, model.C.T @ cost.Q @ model.C, cost.R)
    A_t, B_t = kp.taylor_linearize(plant, np.zeros(2), np.zeros(1))
    taylor = kp.LiftedModel(A=A_t, B=B_t, C=np.eye(2))
    ric_t = kp.solve_dare(A_t, B_t, cost.Q, cost.R)
    ing = kp.design_terminal(model, cost, box)
    cm = kp.build_condensed(model, cost, ing, 5, box)
    return SimpleNamespace(
        plant=plant,
        dict3=dict3,
        dict2=dict2,
        model=model,
        taylor=taylor,
        cost=cost,
        box=box,
        ric=ric,
        ric_t=ric_t,
        ing=ing,
        cm=cm,
    )


@pytest.fixture(scope="session")
def pend():
    """Pendulum pipeline on the default one-step-pair dataset (seed 0)."""
    plant = kp.get_plant("pendulum")
    dict3 = kp.get_dictionary("pendulum3")
    dict2 = kp.identity_dictionary(2)
    dataset = kp.generate_dataset(
        plant, kp.Box([-2, -8], [2, 8]), kp.Box([-40], [40]), 199_800, 2, seed=0
    )
    model = kp.edmd_fit(dataset, dict3)
    A_t, B_t = kp.taylor_linearize(plant, np.zeros(2), np.zeros(1))
    taylor = kp.LiftedModel(A=A_t, B=B_t, C=np.eye(2))
    cost = kp.StageCost(Q=10 * np.eye(2), R=np.eye(1))
    box = kp.Box([-40.0], [40.0])
    ing = kp.design_terminal(model, cost, box)
    ing_t = kp.design_terminal(taylor, cost, box)
    cm = kp.build_condensed(model, cost, ing, 20, box)
    cm_t = kp.build_condensed(taylor, cost, ing_t, 20, box)
    return SimpleNamespace(
        plant=plant,
        dict3=dict3,
        dict2=dict2,
        dataset=dataset,
        model=model,
        taylor=taylor,
        cost=cost,
        box=box,
        ing=ing,
        ing_t=ing_t,
        cm=cm,
        cm_t=cm_t,
    )


@pytest.fixture(scope="session")
def pend_rollout_dataset():
    """Pendulum dataset with the long-rollout sampling layout (200 x 1000)."""
    plant = kp.get_plant("pendulum")
    return kp.generate_dataset(
        plant, kp.Box([-2, -8], [2, 8]), kp.Box([-40], [40]), 200, 1000, seed=0
    )
