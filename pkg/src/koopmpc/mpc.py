"""Condensed finite-horizon MPC in the lifted space, solved by ADMM.

Predicted lifted states are eliminated through the stacked prediction
matrices, leaving a strictly convex QP in the stacked input sequence alone:

    V_N(z, u) = (O_N z + T_N u)' Qbar (O_N z + T_N u) + u' Rbar u

subject to the per-step input box and the terminal ellipsoid
``V_f(O_bar z + T_bar u) <= tau``.  The solver splits the problem into a
smooth quadratic plus two projections: component-wise clipping onto the box,
and an exact ball projection for the terminal constraint after scaling the
terminal state by ``Phat^(1/2)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import block_diag, cho_factor, cho_solve

from .model import Box, LiftedModel, StageCost
from .terminal import TerminalIngredients, spd_sqrt

__all__ = [
    "CondensedMpc",
    "MpcSolution",
    "InfeasibleError",
    "build_condensed",
    "solve_kmpc",
    "mpc_law",
    "shifted_sequence",
    "value_function",
]

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 50_000
DEFAULT_RHO = 1.0

# Residual balancing: double/halve the penalty when the primal and dual
# residuals drift apart by more than this ratio.
_BALANCE_RATIO = 10.0
_BALANCE_FACTOR = 2.0
# Infeasibility heuristic: terminal-consensus residual stalls over a window
# of this many iterations while the associated dual keeps growing.
_STALL_WINDOW = 1000
_STALL_DECREASE = 1e-12


class InfeasibleError(RuntimeError):
    """No input sequence satisfies the constraints for this initial state."""


@dataclass(frozen=True)
class CondensedMpc:
    """Stacked prediction matrices and constraint data for a fixed horizon."""

    N: int
    model: LiftedModel
    cost: StageCost
    terminal: TerminalIngredients
    input_box: Box
    O_N: np.ndarray
    T_N: np.ndarray
    Obar_N: np.ndarray
    Tbar_N: np.ndarray
    Qbar: np.ndarray
    Rbar: np.ndarray

    @property
    def num_vars(self) -> int:
        return self.N * self.model.m

    def stacked_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.tile(self.input_box.lower, self.N)
        hi = np.tile(self.input_box.upper, self.N)
        return lo, hi


@dataclass(frozen=True)
class MpcSolution:
    """Optimal (or best available) input sequence with solver statistics."""

    u_seq: np.ndarray
    value: float
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int

    def to_dict(self) -> dict:
        return {
            "u_seq": self.u_seq.tolist(),
            "value": self.value,
            "status": self.status,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "iterations": self.iterations,
        }


def build_condensed(
    model: LiftedModel,
    cost: StageCost,
    terminal: TerminalIngredients,
    N: int,
    input_box: Box,
) -> CondensedMpc:
    """Assemble the stacked prediction and weight matrices for horizon ``N``."""
    if N < 1:
        raise ValueError("horizon must be >= 1")
    if input_box.dim != model.m:
        raise ValueError("input box dimension does not match the model")
    if terminal.n_z != model.n_z:
        raise ValueError("terminal ingredients dimension does not match the model")
    n_z, m = model.n_z, model.m

    powers = [np.eye(n_z)]
    for _ in range(N):
        powers.append(model.A @ powers[-1])

    O_N = np.vstack(powers)
    T_N = np.zeros(((N + 1) * n_z, N * m))
    for i in range(1, N + 1):
        for j in range(i):
            T_N[i * n_z : (i + 1) * n_z, j * m : (j + 1) * m] = (
                powers[i - 1 - j] @ model.B
            )
    Obar_N = powers[N]
    Tbar_N = T_N[N * n_z :, :].copy()

    Q_tilde = model.C.T @ cost.Q @ model.C
    Qbar = block_diag(*([Q_tilde] * N + [terminal.Phat]))
    Rbar = block_diag(*([cost.R] * N))
    return CondensedMpc(
        N=N,
        model=model,
        cost=cost,
        terminal=terminal,
        input_box=input_box,
        O_N=O_N,
        T_N=T_N,
        Obar_N=Obar_N,
        Tbar_N=Tbar_N,
        Qbar=Qbar,
        Rbar=Rbar,
    )


def value_function(cm: CondensedMpc, z: np.ndarray, u: np.ndarray) -> float:
    """Objective value by explicit rollout of the lifted predictor.

    Deliberately independent of the condensed matrices so it can cross-check
    them: sums the stage costs along ``z+ = Az + Bu`` and adds the terminal
    cost at the final predicted state.
    """
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float).reshape(cm.N, cm.model.m)
    total = 0.0
    zk = z.copy()
    for k in range(cm.N):
        xk = cm.model.C @ zk
        total += float(xk @ cm.cost.Q @ xk + u[k] @ cm.cost.R @ u[k])
        zk = cm.model.A @ zk + cm.model.B @ u[k]
    total += float(zk @ cm.terminal.Phat @ zk)
    return total


def _condensed_data(cm: CondensedMpc, z: np.ndarray):
    """Quadratic data (H, q, c0) and scaled terminal map (G, g) at state z."""
    H = 2.0 * (cm.T_N.T @ cm.Qbar @ cm.T_N + cm.Rbar)
    H = 0.5 * (H + H.T)
    Oz = cm.O_N @ z
    q = 2.0 * cm.T_N.T @ (cm.Qbar @ Oz)
    c0 = float(Oz @ cm.Qbar @ Oz)
    phat_sqrt, _ = spd_sqrt(cm.terminal.Phat)
    G = phat_sqrt @ cm.Tbar_N
    g = phat_sqrt @ (cm.Obar_N @ z)
    return H, q, c0, G, g


def _project_ball(w: np.ndarray, radius: float) -> np.ndarray:
    nrm = float(np.linalg.norm(w))
    if nrm <= radius:
        return w
    return w * (radius / nrm)


def _polish(H, q, G, g, tau, lo, hi, u_admm, y1):
    """Active-set refinement of the ADMM iterate.

    Fixes the box components the splitting identified as binding, treats the
    terminal ellipsoid through a scalar multiplier, and solves the resulting
    equality-constrained QP exactly.  The refined point replaces the iterate
    only if it is feasible and KKT-consistent, in which case it is the exact
    optimizer of this strictly convex QP.
    """
    at_lower = u_admm + y1 <= lo
    at_upper = u_admm + y1 >= hi
    fixed = at_lower | at_upper
    free = ~fixed
    u_fix = np.where(at_upper, hi, np.where(at_lower, lo, 0.0))

    def solve_free(mu: float) -> np.ndarray | None:
        u = u_fix.copy()
        if not np.any(free):
            return u
        M = H[np.ix_(free, free)] + 2.0 * mu * G[:, free].T @ G[:, free]
        rhs = q[free].copy()
        if np.any(fixed):
            rhs += H[np.ix_(free, fixed)] @ u_fix[fixed]
            rhs += 2.0 * mu * G[:, free].T @ (g + G[:, fixed] @ u_fix[fixed])
        else:
            rhs += 2.0 * mu * G[:, free].T @ g
        try:
            u[free] = np.linalg.solve(M, -rhs)
        except np.linalg.LinAlgError:
            return None
        return u

    def terminal_gap(u: np.ndarray) -> float:
        w = G @ u + g
        return float(w @ w) - tau

    mu = 0.0
    u_pol = solve_free(0.0)
    if u_pol is None:
        return u_admm
    if terminal_gap(u_pol) > 0.0:
        # Ellipsoid active: bisect the scalar multiplier until the terminal
        # state sits on the boundary.
        mu_lo, mu_hi = 0.0, 1.0
        for _ in range(200):
            u_hi = solve_free(mu_hi)
            if u_hi is None:
                return u_admm
            if terminal_gap(u_hi) < 0.0:
                break
            mu_hi *= 4.0
        else:
            return u_admm
        for _ in range(120):
            mu_mid = 0.5 * (mu_lo + mu_hi)
            u_mid = solve_free(mu_mid)
            if u_mid is None:
                return u_admm
            if terminal_gap(u_mid) > 0.0:
                mu_lo = mu_mid
            else:
                mu_hi = mu_mid
            if mu_hi - mu_lo <= 1e-15 * max(1.0, mu_hi):
                break
        mu = mu_hi
        u_pol = solve_free(mu)
        if u_pol is None:
            return u_admm

    if not (np.all(u_pol >= lo - 1e-9) and np.all(u_pol <= hi + 1e-9)):
        return u_admm
    if terminal_gap(u_pol) > 1e-9 * max(1.0, tau):
        return u_admm
    # KKT sign pattern: lam = -(grad f + mu * grad ellipsoid) must vanish on
    # free components, be >= 0 at upper bounds and <= 0 at lower bounds.
    lam = -(H @ u_pol + q + 2.0 * mu * G.T @ (G @ u_pol + g))
    scale = 1.0 + float(np.max(np.abs(H @ u_pol + q)))
    kkt_tol = 1e-6 * scale
    if np.any(np.abs(lam[free]) > kkt_tol):
        return u_admm
    if np.any(lam[at_upper] < -kkt_tol) or np.any(lam[at_lower] > kkt_tol):
        return u_admm
    return np.clip(u_pol, lo, hi)


def solve_kmpc(
    cm: CondensedMpc,
    z: np.ndarray,
    warm_start: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    rho: float = DEFAULT_RHO,
    polish: bool = True,
) -> MpcSolution:
    """Solve the condensed MPC problem at lifted state ``z``.

    Operator-splitting iteration with two projection blocks: clipping onto
    the stacked input box and exact projection of the scaled terminal state
    onto the ball of radius ``sqrt(tau)``.  The penalty parameter is adapted
    by residual balancing; termination requires both primal and dual
    residuals below ``tol``.  A converged iterate is refined by an
    active-set polish before being returned.

    Returns a solution with status ``"optimal"``, ``"max_iter"`` (best
    iterate attached) or ``"infeasible"`` (detected by a stalling terminal
    consensus residual with a growing dual).
    """
    z = np.asarray(z, dtype=float)
    if z.shape != (cm.model.n_z,):
        raise ValueError(f"z must have shape ({cm.model.n_z},), got {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("z must be finite")
    if tol <= 0:
        raise ValueError("tol must be positive")

    H, q, c0, G, g = _condensed_data(cm, z)
    lo, hi = cm.stacked_bounds()
    sqrt_tau = np.sqrt(cm.terminal.tau)
    nv = cm.num_vars

    def objective(u):
        return 0.5 * float(u @ H @ u) + float(q @ u) + c0

    # Fast path: unconstrained minimizer already feasible.
    u_uc = np.linalg.solve(H, -q)
    w_uc = G @ u_uc + g
    if (
        np.all(u_uc >= lo)
        and np.all(u_uc <= hi)
        and float(w_uc @ w_uc) <= cm.terminal.tau
    ):
        return MpcSolution(
            u_seq=u_uc,
            value=objective(u_uc),
            status="optimal",
            primal_residual=0.0,
            dual_residual=0.0,
            iterations=0,
        )

    GtG = G.T @ G
    u = np.zeros(nv) if warm_start is None else np.asarray(warm_start, dtype=float).copy()
    v = np.clip(u, lo, hi)
    s = _project_ball(G @ u + g, sqrt_tau)
    y1 = np.zeros(nv)
    y2 = np.zeros(G.shape[0])

    factor = cho_factor(H + rho * (np.eye(nv) + GtG))
    r_prim = r_dual = np.inf
    status = "max_iter"
    stall_best = np.inf
    stall_prev_best = np.inf
    stall_y2_start = 0.0

    it = 0
    for it in range(1, max_iter + 1):
        rhs = -q + rho * (v - y1) + rho * G.T @ (s - g - y2)
        u = cho_solve(factor, rhs)
        Gu_g = G @ u + g
        v_old, s_old = v, s
        v = np.clip(u + y1, lo, hi)
        s = _project_ball(Gu_g + y2, sqrt_tau)
        y1 = y1 + u - v
        y2 = y2 + Gu_g - s

        r_box = u - v
        r_cons = Gu_g - s
        r_prim = float(np.sqrt(np.dot(r_box, r_box) + np.dot(r_cons, r_cons)))
        r_dual = rho * float(np.linalg.norm((v - v_old) + G.T @ (s - s_old)))
        if r_prim <= tol and r_dual <= tol:
            status = "optimal"
            break

        rc_norm = float(np.linalg.norm(r_cons))
        stall_best = min(stall_best, rc_norm)
        if it % _STALL_WINDOW == 0:
            # Unscaled dual (invariant under penalty rescaling).
            dual_norm = rho * float(np.linalg.norm(y2))
            if (
                stall_prev_best - stall_best < _STALL_DECREASE
                and dual_norm > stall_y2_start
                and rc_norm > tol
            ):
                status = "infeasible"
                break
            stall_prev_best = stall_best
            stall_best = np.inf
            stall_y2_start = dual_norm

        if it % 10 == 0:
            if r_prim > _BALANCE_RATIO * r_dual and rho < 1e6:
                rho *= _BALANCE_FACTOR
                y1 /= _BALANCE_FACTOR
                y2 /= _BALANCE_FACTOR
                factor = cho_factor(H + rho * (np.eye(nv) + GtG))
            elif r_dual > _BALANCE_RATIO * r_prim and rho > 1e-6:
                rho /= _BALANCE_FACTOR
                y1 *= _BALANCE_FACTOR
                y2 *= _BALANCE_FACTOR
                factor = cho_factor(H + rho * (np.eye(nv) + GtG))

    if status == "optimal" and polish:
        u = _polish(H, q, G, g, cm.terminal.tau, lo, hi, u, y1)

    return MpcSolution(
        u_seq=u,
        value=objective(u),
        status=status,
        primal_residual=r_prim,
        dual_residual=r_dual,
        iterations=it,
    )


def mpc_law(
    cm: CondensedMpc,
    z: np.ndarray,
    warm_start: np.ndarray | None = None,
    **solver_kwargs,
) -> tuple[np.ndarray, MpcSolution]:
    """First block of the optimal input sequence at lifted state ``z``.

    Raises :class:`InfeasibleError` when the solver declares the problem
    infeasible; the caller decides the fallback.
    """
    sol = solve_kmpc(cm, z, warm_start=warm_start, **solver_kwargs)
    if sol.status == "infeasible":
        raise InfeasibleError(f"MPC infeasible at z={np.asarray(z).tolist()}")
    return sol.u_seq[: cm.model.m].copy(), sol


def shifted_sequence(cm: CondensedMpc, z: np.ndarray, u_opt: np.ndarray) -> np.ndarray:
    """One-step shifted input sequence, closed with the terminal gain.

    Drops the first input of ``u_opt`` and appends ``K phi(N; z, u_opt)``
    where ``phi(N; ...)`` is the nominal terminal state.  Feasible at the
    nominal successor ``A z + B u_opt(0)`` whenever ``u_opt`` was feasible at
    ``z``.
    """
    z = np.asarray(z, dtype=float)
    u_opt = np.asarray(u_opt, dtype=float)
    m = cm.model.m
    z_terminal = cm.Obar_N @ z + cm.Tbar_N @ u_opt
    tail = cm.terminal.K @ z_terminal
    return np.concatenate([u_opt[m:], tail])
