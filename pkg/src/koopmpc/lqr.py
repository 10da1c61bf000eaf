"""Discrete Riccati and Lyapunov solvers, lifted LQR gain and policy.

The infinite-horizon regulator in the lifted space minimizes
``sum_k (z_k' C'QC z_k + u_k' R u_k)`` subject to ``z+ = A z + B u``.  Its
value matrix ``P`` is the positive definite fixed point of

    P = C'QC + A'PA - A'PB (R + B'PB)^-1 B'PA

and the optimal gain is ``K = -(R + B'PB)^-1 B'PA``, applied to the plant as
``u = K psi(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Controller, Dictionary, lift

__all__ = [
    "RiccatiSolution",
    "RiccatiConvergenceError",
    "ConditioningError",
    "InstabilityError",
    "solve_dare",
    "solve_dlyap",
    "lqr_policy",
    "spectral_radius",
]

# A matrix counts as Schur stable only with this much margin below 1.
SCHUR_MARGIN = 1e-9


class RiccatiConvergenceError(RuntimeError):
    """Fixed-point iteration did not converge; carries the last residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConditioningError(RuntimeError):
    """A linear solve inside the iteration is numerically singular."""


class InstabilityError(RuntimeError):
    """The closed-loop matrix is not Schur stable."""


@dataclass(frozen=True)
class RiccatiSolution:
    """Value matrix ``P``, gain ``K``, final residual and iteration count."""

    P: np.ndarray
    K: np.ndarray
    residual: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "P": self.P.tolist(),
            "K": self.K.tolist(),
            "residual": self.residual,
            "iterations": self.iterations,
        }


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def _riccati_rhs(A, B, Qc, R, P):
    S = R + B.T @ P @ B
    cond = np.linalg.cond(S)
    if not np.isfinite(cond) or cond > 1e14:
        raise ConditioningError(
            f"R + B'PB is numerically singular (condition number {cond:.3e})"
        )
    G = np.linalg.solve(S, B.T @ P @ A)
    return Qc + A.T @ P @ A - A.T @ P @ B @ G, G


def solve_dare(
    A: np.ndarray,
    B: np.ndarray,
    Qc: np.ndarray,
    R: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 100_000,
) -> RiccatiSolution:
    """Solve the discrete algebraic Riccati equation by fixed-point iteration.

    Iterates the Riccati map from ``P0 = Qc`` until the Frobenius norm of the
    iterate change drops below ``tol``.  The caller is responsible for
    stabilizability/observability of the data (see
    :func:`koopmpc.model.check_lifted_model`).

    Parameters
    ----------
    A, B : np.ndarray
        Lifted dynamics matrices.
    Qc : np.ndarray
        State weight in the lifted space, typically ``C'QC`` (PSD).
    R : np.ndarray
        Input weight (positive definite).
    tol : float
        Successive-iterate Frobenius tolerance.
    max_iter : int
        Iteration budget; exceeding it raises
        :class:`RiccatiConvergenceError` with the last residual attached.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Qc = np.atleast_2d(np.asarray(Qc, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Qc.copy()
    change = np.inf
    for it in range(1, max_iter + 1):
        P_next, _ = _riccati_rhs(A, B, Qc, R, P)
        P_next = 0.5 * (P_next + P_next.T)
        change = float(np.linalg.norm(P_next - P, "fro"))
        P = P_next
        if change <= tol:
            break
    else:
        raise RiccatiConvergenceError(
            f"Riccati iteration did not reach tol={tol:g} in {max_iter} iterations "
            f"(last change {change:.3e})",
            residual=change,
        )
    rhs, G = _riccati_rhs(A, B, Qc, R, P)
    residual = float(np.linalg.norm(P - rhs, "fro"))
    K = -G
    return RiccatiSolution(P=P, K=K, residual=residual, iterations=it)


def solve_dlyap(
    A_K: np.ndarray,
    Qhat: np.ndarray,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> np.ndarray:
    """Solve ``A_K' P A_K - P + Qhat = 0`` for a Schur-stable ``A_K``.

    Uses the doubling form of the series iteration ``P <- Qhat + A_K' P A_K``:
    each pass doubles the number of accumulated series terms, so convergence
    takes O(log) passes.
    """
    A_K = np.atleast_2d(np.asarray(A_K, dtype=float))
    Qhat = np.atleast_2d(np.asarray(Qhat, dtype=float))
    rho = spectral_radius(A_K)
    if rho >= 1.0 - SCHUR_MARGIN:
        raise InstabilityError(
            f"closed-loop matrix has spectral radius {rho:.12g}; need < 1"
        )
    P = Qhat.copy()
    M = A_K.copy()
    for _ in range(max_iter):
        P_next = P + M.T @ P @ M
        M = M @ M
        change = float(np.linalg.norm(P_next - P, "fro"))
        P = 0.5 * (P_next + P_next.T)
        if change <= tol:
            break
    residual = float(np.linalg.norm(A_K.T @ P @ A_K - P + Qhat, "fro"))
    if residual > max(tol, 1e-10) * max(1.0, float(np.linalg.norm(Qhat, "fro"))):
        raise RiccatiConvergenceError(
            f"Lyapunov doubling stalled at residual {residual:.3e}", residual=residual
        )
    return P


def lqr_policy(K: np.ndarray, dictionary: Dictionary, name: str = "koopman-lqr") -> Controller:
    """Wrap a lifted gain as a state-feedback controller ``u = K psi(x)``."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape[1] != dictionary.n_z:
        raise ValueError(
            f"gain has {K.shape[1]} columns, dictionary lifts to {dictionary.n_z}"
        )

    def law(x: np.ndarray) -> tuple[np.ndarray, dict]:
        return K @ lift(dictionary, x), {"status": "ok"}

    return Controller(name=name, law=law)
