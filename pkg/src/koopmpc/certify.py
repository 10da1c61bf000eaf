"""Numerical stability certificates for the lifted-space MPC loop.

Everything here is sampled or closed-form numerics, not proof: Lipschitz-type
constants are maxima over explicit sample clouds (lower bounds of the true
constants, reproducible through the recorded attaining point), the Lyapunov
decrease margin is a sampled minimum, and the constant ledger chains the
sampled estimates through closed-form formulas into the two error thresholds
``delta1`` (one-step feasibility) and ``delta2`` (value decrease).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .model import Controller, Dictionary, LiftedModel, Plant, lift
from .mpc import CondensedMpc, InfeasibleError, solve_kmpc
from .terminal import TerminalIngredients, sample_terminal_set

if TYPE_CHECKING:
    from .sim import Trajectory

__all__ = [
    "LipschitzEstimate",
    "CertificateReport",
    "LyapunovCheckResult",
    "DecayFit",
    "CoverageError",
    "LevelError",
    "estimate_lift_lipschitz",
    "estimate_closed_loop_error",
    "estimate_cz",
    "appendix_constants",
    "derived_constants",
    "lyapunov_check",
    "fit_decay_rate",
    "admissible_rho_level",
]

CERTIFICATE_SCHEMA_VERSION = 1

# Trajectory norms at or below this floor are treated as numerically zero.
DECAY_FLOOR = 1e-12


class CoverageError(RuntimeError):
    """Too many samples were skipped for the estimate to be meaningful."""


class LevelError(RuntimeError):
    """No sample landed inside the requested sublevel set."""


@dataclass(frozen=True)
class LipschitzEstimate:
    """Sampled maximum ratio, with the point attaining it for reproducibility."""

    constant: float
    radius: float
    num_samples: int
    argmax_point: np.ndarray
    seed: int


@dataclass(frozen=True)
class LyapunovCheckResult:
    """Sampled decrease margin and sublevel-set exit count."""

    alpha3_margin: float
    invariance_violations: int
    num_samples: int


@dataclass(frozen=True)
class DecayFit:
    """Geometric envelope ``||x_t|| <= c rho^t ||x_0||`` fitted to a trajectory."""

    c: float
    rho: float
    certified: bool


def _sample_cloud(n: int, num_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-ball sample cloud: half boundary shell, half uniform in the ball."""
    dirs = rng.standard_normal((num_samples, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = np.ones(num_samples)
    half = num_samples // 2
    radii[half:] = rng.uniform(0.0, 1.0, num_samples - half) ** (1.0 / n)
    return dirs * radii[:, None]


def estimate_lift_lipschitz(
    dictionary: Dictionary,
    r: float,
    num_samples: int = 10_000,
    seed: int = 0,
) -> LipschitzEstimate:
    """Sampled bound constant for ``||psi(x)|| <= L_psi ||x||`` on the r-ball.

    The sample cloud is drawn on the unit ball and scaled by ``r``, so
    estimates at nested radii reuse the same directions.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    X = r * _sample_cloud(dictionary.n, num_samples, rng)
    norms = np.linalg.norm(X, axis=1)
    ratios = np.linalg.norm(lift(dictionary, X), axis=1) / norms
    best = int(np.argmax(ratios))
    return LipschitzEstimate(
        constant=float(ratios[best]),
        radius=r,
        num_samples=num_samples,
        argmax_point=X[best].copy(),
        seed=seed,
    )


def estimate_closed_loop_error(
    plant: Plant,
    model: LiftedModel,
    dictionary: Dictionary,
    controller: Controller,
    r: float,
    num_samples: int = 10_000,
    seed: int = 0,
    max_skip_fraction: float = 0.1,
) -> LipschitzEstimate:
    """Sampled constant for the closed-loop one-step prediction error.

    Maximizes ``||psi(f(x, u)) - A psi(x) - B u|| / ||x||`` with
    ``u = controller(x)`` over the scaled unit-ball cloud.  Samples where the
    controller is infeasible are skipped and counted; exceeding
    ``max_skip_fraction`` raises :class:`CoverageError`.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    X = r * _sample_cloud(plant.n, num_samples, rng)
    best_ratio = -np.inf
    best_point = X[0]
    skipped = 0
    for x in X:
        try:
            u, _ = controller(x)
        except InfeasibleError:
            skipped += 1
            continue
        z = lift(dictionary, x)
        err = lift(dictionary, plant.step(x, u)) - model.A @ z - model.B @ u
        ratio = float(np.linalg.norm(err) / np.linalg.norm(x))
        if ratio > best_ratio:
            best_ratio = ratio
            best_point = x
    if skipped > max_skip_fraction * num_samples:
        raise CoverageError(
            f"controller infeasible at {skipped}/{num_samples} samples"
        )
    return LipschitzEstimate(
        constant=best_ratio,
        radius=r,
        num_samples=num_samples - skipped,
        argmax_point=best_point.copy(),
        seed=seed,
    )


def estimate_cz(
    cm: CondensedMpc,
    num_samples: int = 50,
    seed: int = 0,
    slack: float = 1e-8,
) -> float:
    """Quadratic upper-bound constant ``c_z`` for the optimal value function.

    Uses the terminal-gain rollout as the feasible candidate: along
    ``z_k = A_K^k z`` the objective is ``z' S_N z`` with

        S_N = sum_k A_K^k' (Q~ + K'RK) A_K^k + A_K^N' Phat A_K^N

    and ``c_z`` is the largest eigenvalue of ``S_N``.  The bound is verified
    to dominate sampled ``V_N*(z) / ||z||^2`` over the terminal set, where
    the candidate is feasible by construction; samples where the candidate
    is not admissible are excluded from verification.
    """
    model, cost, ing = cm.model, cm.cost, cm.terminal
    A_K = model.A + model.B @ ing.K
    Q_stage = model.C.T @ cost.Q @ model.C + ing.K.T @ cost.R @ ing.K
    S = np.zeros_like(A_K)
    M = np.eye(model.n_z)
    for _ in range(cm.N):
        S += M.T @ Q_stage @ M
        M = A_K @ M
    S += M.T @ ing.Phat @ M
    c_z = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])

    rng = np.random.default_rng(seed)
    Z = sample_terminal_set(ing, num_samples, rng)
    lo, hi = cm.input_box.lower, cm.input_box.upper
    for z in Z:
        nz2 = float(z @ z)
        if nz2 == 0.0:
            continue
        zk, admissible = z.copy(), True
        for _ in range(cm.N):
            uk = ing.K @ zk
            if np.any(uk < lo - 1e-12) or np.any(uk > hi + 1e-12):
                admissible = False
                break
            zk = A_K @ zk
        if not admissible or float(zk @ ing.Phat @ zk) > ing.tau + 1e-9:
            continue
        val = solve_kmpc(cm, z).value
        if val > c_z * nz2 + slack * (1.0 + c_z * nz2):
            raise AssertionError(
                f"candidate bound violated: V_N*={val:.6e} > c_z ||z||^2 = {c_z * nz2:.6e}"
            )
    return c_z


@dataclass(frozen=True)
class CertificateReport:
    """Constant ledger of the stability certificate.

    All derived constants (``c1``..``c4``, ``gamma``, ``delta1``, ``delta2``)
    are pure functions of the recorded inputs, so a serialized report can be
    recomputed and checked field by field.  The Lyapunov margin, sublevel
    level and decay fit are sampled diagnostics attached by the pipeline.
    """

    l_psi: float
    l_cl: float
    c_z: float
    c_x: float
    lambda_q: float
    lambda_r: float
    tau: float
    lambda_qhat: float
    sigma_phat: float
    sigma_a: float
    sigma_b: float
    sigma_1: float
    sigma_2: float
    sigma_3: float
    sigma_4: float
    c1: float
    c2: float
    c3: float
    c4: float
    gamma: float
    delta1: float
    delta2: float
    l_below_delta: bool
    alpha3_margin: float | None = None
    invariance_violations: int | None = None
    rho_level: float | None = None
    decay_c: float | None = None
    decay_rho: float | None = None
    decay_certified: bool | None = None

    def to_dict(self) -> dict:
        payload = {"schema_version": CERTIFICATE_SCHEMA_VERSION}
        for name in self.__dataclass_fields__:
            payload[name] = getattr(self, name)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> "CertificateReport":
        fields = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        return cls(**fields)


def _positive_root(sigma: float, beta: float, target: float) -> float:
    """Positive root of ``sigma d^2 + 2 beta d = target`` (cancellation-safe)."""
    if target <= 0:
        raise ValueError("target must be positive")
    return target / (beta + np.sqrt(beta**2 + sigma * target))


def derived_constants(
    l_psi: float,
    l_cl: float,
    c_z: float,
    c_x: float,
    lambda_q: float,
    lambda_r: float,
    tau: float,
    lambda_qhat: float,
    sigma_phat: float,
    sigma_a: float,
    sigma_b: float,
    sigma_1: float,
    sigma_2: float,
    sigma_3: float,
    sigma_4: float,
) -> dict:
    """Closed-form chain from the recorded inputs to the ledger constants."""
    c1 = c_z * l_psi**2 / lambda_r
    c2 = sigma_a * l_psi + sigma_b * np.sqrt(c1)
    gamma = min(tau / 2.0, lambda_qhat * tau / (2.0 * sigma_phat))
    beta1 = sigma_1 * c2 + sigma_2 * np.sqrt(c1)
    beta2 = sigma_3 * c2 + sigma_4 * np.sqrt(c1)
    c3 = sigma_1 * l_cl**2 + 2.0 * beta1 * l_cl
    c4 = sigma_3 * l_cl**2 + 2.0 * beta2 * l_cl
    delta1 = _positive_root(sigma_1, beta1, gamma / c_x)
    delta2 = _positive_root(sigma_3, beta2, lambda_q)
    return {
        "c1": float(c1),
        "c2": float(c2),
        "c3": float(c3),
        "c4": float(c4),
        "gamma": float(gamma),
        "delta1": float(delta1),
        "delta2": float(delta2),
        "l_below_delta": bool(l_cl < min(delta1, delta2)),
    }


def appendix_constants(
    cm: CondensedMpc,
    ingredients: TerminalIngredients,
    l_psi: float,
    l_cl: float,
    c_z: float,
    c_x: float,
) -> CertificateReport:
    """Assemble the constant ledger for a designed MPC.

    Parameters
    ----------
    cm : CondensedMpc
        Condensed problem carrying the stacked prediction matrices.
    ingredients : TerminalIngredients
        Terminal design used by ``cm``.
    l_psi, l_cl : float
        Estimated lifting and closed-loop error constants.
    c_z : float
        Quadratic upper-bound constant of the value function.
    c_x : float
        ``sup ||x||^2`` over the certified sublevel set (closed form:
        ``rho_level / lambda_min(Q)``).
    """
    for name, val in (("l_psi", l_psi), ("c_z", c_z), ("c_x", c_x)):
        if not np.isfinite(val) or val <= 0:
            raise ValueError(f"{name} must be positive and finite, got {val}")
    if not np.isfinite(l_cl) or l_cl < 0:
        raise ValueError(f"l_cl must be nonnegative and finite, got {l_cl}")

    Phat = ingredients.Phat
    sigma_1 = float(np.linalg.svd(cm.Obar_N.T @ Phat @ cm.Obar_N, compute_uv=False)[0])
    sigma_2 = float(np.linalg.svd(cm.Obar_N.T @ Phat @ cm.Tbar_N, compute_uv=False)[0])
    sigma_3 = float(np.linalg.svd(cm.O_N.T @ cm.Qbar @ cm.O_N, compute_uv=False)[0])
    sigma_4 = float(np.linalg.svd(cm.O_N.T @ cm.Qbar @ cm.T_N, compute_uv=False)[0])
    inputs = {
        "l_psi": float(l_psi),
        "l_cl": float(l_cl),
        "c_z": float(c_z),
        "c_x": float(c_x),
        "lambda_q": cm.cost.lambda_q,
        "lambda_r": cm.cost.lambda_r,
        "tau": ingredients.tau,
        "lambda_qhat": ingredients.lambda_qhat,
        "sigma_phat": ingredients.sigma_phat,
        "sigma_a": float(np.linalg.svd(cm.model.A, compute_uv=False)[0]),
        "sigma_b": float(np.linalg.svd(cm.model.B, compute_uv=False)[0]),
        "sigma_1": sigma_1,
        "sigma_2": sigma_2,
        "sigma_3": sigma_3,
        "sigma_4": sigma_4,
    }
    return CertificateReport(**inputs, **derived_constants(**inputs))


def admissible_rho_level(
    lambda_q: float, r_hat: float, rho_level: float | None = None
) -> float:
    """Validate (or default) the sublevel height against ``lambda_Q r_hat^2``."""
    limit = lambda_q * r_hat**2
    if rho_level is None:
        return limit
    if not 0 < rho_level <= limit:
        raise ValueError(
            f"rho_level must lie in (0, {limit:.6g}] for radius {r_hat:.6g}, "
            f"got {rho_level:.6g}"
        )
    return rho_level


def lyapunov_check(
    plant: Plant,
    dictionary: Dictionary,
    controller: Controller,
    V: Callable[[np.ndarray], float],
    rho_level: float,
    num_samples: int = 200,
    seed: int = 0,
    sample_radius: float = 1.0,
) -> LyapunovCheckResult:
    """Sampled Lyapunov decrease margin inside ``{x : V(psi(x)) < rho_level}``.

    Rejection-samples states from the ball of ``sample_radius`` (typically
    ``sqrt(rho_level / lambda_Q)``), keeps those inside the sublevel set, and
    reports the minimum of ``[V(psi(x)) - V(psi(x+))] / ||x||^2`` together
    with the number of successors that exit the set.  Verified on samples
    only; this is evidence, not proof.
    """
    if rho_level <= 0:
        raise ValueError("rho_level must be positive")
    rng = np.random.default_rng(seed)
    margins = []
    violations = 0
    attempts = 0
    max_attempts = max(50 * num_samples, 1000)
    while len(margins) < num_samples and attempts < max_attempts:
        attempts += 1
        x = sample_radius * _sample_cloud(plant.n, 1, rng)[0]
        nx2 = float(x @ x)
        if nx2 == 0.0:
            continue
        v_here = V(lift(dictionary, x))
        if v_here >= rho_level:
            continue
        u, _ = controller(x)
        x_next = plant.step(x, u)
        v_next = V(lift(dictionary, x_next))
        margins.append((v_here - v_next) / nx2)
        if v_next >= rho_level:
            violations += 1
    if not margins:
        raise LevelError(
            f"no sample of radius {sample_radius:g} fell below level {rho_level:g}"
        )
    return LyapunovCheckResult(
        alpha3_margin=float(np.min(margins)),
        invariance_violations=violations,
        num_samples=len(margins),
    )


def fit_decay_rate(traj: "Trajectory") -> DecayFit:
    """Tightest geometric envelope over a closed-loop trajectory.

    Least-squares fits the slope of ``log ||x_t||`` over the samples above
    the numerical floor, then lifts the intercept until the envelope
    dominates every sample; ``c >= 1`` always holds because the envelope must
    cover ``t = 0``.  A non-decaying trajectory yields ``rho >= 1`` with
    ``certified=False``.
    """
    states = np.asarray(traj.states, dtype=float)
    if states.shape[0] < 10:
        raise ValueError("need a trajectory of at least 10 states for the fit")
    norms = np.linalg.norm(states, axis=1)
    if norms[0] <= 0:
        raise ValueError("initial state must be nonzero")
    above = np.nonzero(norms <= DECAY_FLOOR)[0]
    cutoff = int(above[0]) if above.size else norms.shape[0]
    t = np.arange(cutoff)
    y = np.log(norms[:cutoff]) - np.log(norms[0])
    if cutoff < 2:
        return DecayFit(c=1.0, rho=0.0, certified=True)
    slope = float(np.polyfit(t, y, 1)[0])
    c = float(np.exp(np.max(y - slope * t)))
    rho = float(np.exp(slope))
    return DecayFit(c=c, rho=rho, certified=rho < 1.0)
