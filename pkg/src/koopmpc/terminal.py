"""Terminal cost and terminal set for the lifted-space MPC.

The terminal pair is built from the lifted LQR: with gain ``K`` and closed
loop ``A_K = A + BK``, pick ``Qhat > 0`` with ``Qhat >= C'QC + K'RK``, solve
``A_K' Phat A_K - Phat + Qhat = 0`` and use ``V_f(z) = z'Phat z`` with the
sublevel set ``{z : V_f(z) <= tau}``.  The level ``tau`` is sized so that the
terminal gain is guaranteed admissible: ``tau = lambda_min(R) * r_U^2`` with
``r_U`` the radius of the largest origin-centered ball inside the input box,
which makes ``||Kz|| <= sqrt(tau / lambda_min(R)) = r_U`` for all ``z`` in
the set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lqr import solve_dare, solve_dlyap
from .model import Box, LiftedModel, StageCost

__all__ = [
    "TerminalIngredients",
    "DesignError",
    "design_terminal",
    "terminal_cost",
    "verify_prop1",
    "spd_sqrt",
    "sample_terminal_set",
    "ingredients_to_dict",
    "ingredients_from_dict",
]


class DesignError(RuntimeError):
    """Terminal design is impossible for the given data."""


@dataclass(frozen=True)
class TerminalIngredients:
    """LQR gain and Riccati matrix plus the terminal weight, level and bound."""

    K: np.ndarray
    P: np.ndarray
    Phat: np.ndarray
    Qhat: np.ndarray
    tau: float
    sigma_phat: float

    @property
    def n_z(self) -> int:
        return self.Phat.shape[0]

    @property
    def lambda_qhat(self) -> float:
        return float(np.linalg.eigvalsh(self.Qhat)[0])


def spd_sqrt(M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric square root and inverse square root of an SPD matrix."""
    w, V = np.linalg.eigh(np.asarray(M, dtype=float))
    if w[0] <= 0:
        raise ValueError("matrix is not positive definite")
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def design_terminal(
    model: LiftedModel,
    cost: StageCost,
    input_box: Box,
    eps: float | None = None,
) -> TerminalIngredients:
    """Construct the terminal gain, weight and level for a lifted model.

    Parameters
    ----------
    model : LiftedModel
        Lifted predictor, assumed to pass the PBH rank tests.
    cost : StageCost
        Stage weights (Q, R).
    input_box : Box
        Input constraint set; must contain the origin in its interior.
    eps : float, optional
        Regularization added to ``C'QC + K'RK`` so the intermediate weight is
        strictly positive definite (that sum is generically rank deficient in
        the lifted space).  Defaults to ``1e-6 * lambda_min(Q)``.

    Raises
    ------
    DesignError
        If the input box has empty interior around the origin.
    """
    if input_box.dim != model.m:
        raise ValueError("input box dimension does not match the model")
    r_u = input_box.interior_radius()
    if r_u <= 0:
        raise DesignError("input box must contain the origin in its interior")
    if eps is None:
        eps = 1e-6 * cost.lambda_q
    if eps <= 0:
        raise ValueError("eps must be positive")

    Qc = model.C.T @ cost.Q @ model.C
    ric = solve_dare(model.A, model.B, Qc, cost.R)
    K = ric.K
    Qhat = Qc + K.T @ cost.R @ K + eps * np.eye(model.n_z)
    A_K = model.A + model.B @ K
    Phat = solve_dlyap(A_K, Qhat)
    tau = cost.lambda_r * r_u**2
    sigma_phat = float(np.linalg.eigvalsh(Phat)[-1])
    return TerminalIngredients(
        K=K, P=ric.P, Phat=Phat, Qhat=Qhat, tau=tau, sigma_phat=sigma_phat
    )


def terminal_cost(ingredients: TerminalIngredients, z: np.ndarray) -> float:
    """Evaluate ``V_f(z) = z'Phat z``."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != ingredients.n_z:
        raise ValueError(f"z has dimension {z.shape[-1]}, expected {ingredients.n_z}")
    return float(z @ ingredients.Phat @ z)


def sample_terminal_set(
    ingredients: TerminalIngredients,
    num_samples: int,
    rng: np.random.Generator,
    boundary_fraction: float = 0.5,
) -> np.ndarray:
    """Sample points of ``{z : V_f(z) <= tau}``, interior plus boundary shell.

    Uniform ball/sphere samples are mapped through ``sqrt(tau) * Phat^(-1/2)``
    so the ellipsoid is covered exactly.  Returns shape ``(num_samples, n_z)``.
    """
    n_z = ingredients.n_z
    _, inv_sqrt = spd_sqrt(ingredients.Phat)
    dirs = rng.standard_normal((num_samples, n_z))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    n_boundary = int(round(boundary_fraction * num_samples))
    radii = np.ones(num_samples)
    if num_samples > n_boundary:
        radii[n_boundary:] = rng.uniform(0.0, 1.0, num_samples - n_boundary) ** (1.0 / n_z)
    y = dirs * radii[:, None]
    return np.sqrt(ingredients.tau) * y @ inv_sqrt


def verify_prop1(
    ingredients: TerminalIngredients,
    model: LiftedModel,
    cost: StageCost,
    input_box: Box,
    num_samples: int = 10_000,
    seed: int = 0,
    input_tol: float = 1e-9,
) -> dict:
    """Sampled check that the terminal controller decreases ``V_f`` admissibly.

    Over samples ``z`` of the terminal set, reports the minimum of
    ``-l(Cz, Kz) - (V_f(A_K z) - V_f(z))`` (nonnegative up to roundoff when
    the design is sound) and whether ``Kz`` stays in the input box at every
    sample.
    """
    rng = np.random.default_rng(seed)
    Z = sample_terminal_set(ingredients, num_samples, rng)
    A_K = model.A + model.B @ ingredients.K
    Z_next = Z @ A_K.T
    vf = np.einsum("ij,jk,ik->i", Z, ingredients.Phat, Z)
    vf_next = np.einsum("ij,jk,ik->i", Z_next, ingredients.Phat, Z_next)
    X = Z @ model.C.T
    U = Z @ ingredients.K.T
    stage = np.einsum("ij,jk,ik->i", X, cost.Q, X) + np.einsum(
        "ij,jk,ik->i", U, cost.R, U
    )
    margins = -stage - (vf_next - vf)
    admissible = bool(
        np.all(U >= input_box.lower - input_tol)
        and np.all(U <= input_box.upper + input_tol)
    )
    return {
        "min_margin": float(np.min(margins)),
        "all_inputs_admissible": admissible,
        "num_samples": num_samples,
    }


def ingredients_to_dict(ingredients: TerminalIngredients) -> dict:
    return {
        "K": ingredients.K.tolist(),
        "P": ingredients.P.tolist(),
        "Phat": ingredients.Phat.tolist(),
        "Qhat": ingredients.Qhat.tolist(),
        "tau": ingredients.tau,
        "sigma_phat": ingredients.sigma_phat,
    }


def ingredients_from_dict(payload: dict) -> TerminalIngredients:
    return TerminalIngredients(
        K=np.asarray(payload["K"], dtype=float),
        P=np.asarray(payload["P"], dtype=float),
        Phat=np.asarray(payload["Phat"], dtype=float),
        Qhat=np.asarray(payload["Qhat"], dtype=float),
        tau=float(payload["tau"]),
        sigma_phat=float(payload["sigma_phat"]),
    )
