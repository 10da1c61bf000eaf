"""Plants, observable dictionaries, lifted linear predictors and modeling error.

The central modeling idea: a nonlinear plant ``x+ = f(x, u)`` with equilibrium
at the origin is lifted through a dictionary of scalar observables
``z = psi(x)`` so that the dynamics are (approximately) linear in the lifted
coordinates, ``z+ = A z + B u``.  The first ``n`` observables are always the
coordinate maps, so the physical state is recovered exactly by ``x = C z``
with ``C = [I 0]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Plant",
    "Dictionary",
    "LiftedModel",
    "StageCost",
    "Box",
    "Controller",
    "AssumptionCheck",
    "lift",
    "koopman_step",
    "one_step_error",
    "taylor_linearize",
    "check_lifted_model",
    "get_plant",
    "get_dictionary",
    "example1_plant",
    "pendulum_plant",
    "example1_dictionary",
    "pendulum_dictionary",
    "identity_dictionary",
    "example1_koopman_model",
]

# Physical constants of the built-in pendulum (mass, length, friction,
# gravity, sampling time).
PENDULUM_MASS = 1.0
PENDULUM_LENGTH = 1.0
PENDULUM_FRICTION = 0.2
PENDULUM_GRAVITY = 9.81
PENDULUM_TS = 0.02


@dataclass(frozen=True)
class Plant:
    """Discrete-time nonlinear plant ``x+ = step(x, u)``.

    ``step`` must be deterministic, fix the origin (``step(0, 0) = 0``) and
    broadcast over leading batch dimensions: ``x`` with shape ``(..., n)`` and
    ``u`` with shape ``(..., m)`` produce ``(..., n)``.
    """

    name: str
    n: int
    m: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Dictionary:
    """Ordered list of scalar observables with the identity-first convention.

    The first ``n`` observables are the coordinate maps ``x -> x_i``, so
    ``C @ lift(x) == x`` exactly with ``C = [I_n 0]``.  Each observable maps
    arrays of shape ``(..., n)`` to shape ``(...,)``.
    """

    name: str
    n: int
    observables: tuple[Callable[[np.ndarray], np.ndarray], ...]

    @property
    def n_z(self) -> int:
        return len(self.observables)

    def identity_first_matrix(self) -> np.ndarray:
        """The reconstruction matrix ``C = [I_n 0]`` of shape ``(n, n_z)``."""
        C = np.zeros((self.n, self.n_z))
        C[:, : self.n] = np.eye(self.n)
        return C


@dataclass(frozen=True)
class LiftedModel:
    """Lifted linear predictor ``z+ = A z + B u`` with ``x = C z``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B must have {A.shape[0]} rows, got {B.shape}")
        if C.shape[1] != A.shape[0]:
            raise ValueError(f"C must have {A.shape[0]} columns, got {C.shape}")
        n = C.shape[0]
        expected = np.hstack([np.eye(n), np.zeros((n, A.shape[0] - n))])
        if not np.array_equal(C, expected):
            raise ValueError("C must equal [I_n 0] (identity-first convention)")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def n_z(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class StageCost:
    """Quadratic stage cost ``l(x, u) = x'Qx + u'Ru`` with ``Q, R > 0``."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric, got shape {M.shape}")
            if np.linalg.eigvalsh(M)[0] <= 0:
                raise ValueError(f"{name} must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)

    @property
    def lambda_q(self) -> float:
        """Minimum eigenvalue of Q."""
        return float(np.linalg.eigvalsh(self.Q)[0])

    @property
    def lambda_r(self) -> float:
        """Minimum eigenvalue of R."""
        return float(np.linalg.eigvalsh(self.R)[0])

    def evaluate(self, x: np.ndarray, u: np.ndarray) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(x @ self.Q @ x + u @ self.R @ u)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``{v : lower <= v <= upper}``."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be 1-D arrays of equal length")
        if np.any(lo > hi):
            raise ValueError("box is empty: lower > upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, v: np.ndarray, tol: float = 0.0) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lower - tol) and np.all(v <= self.upper + tol))

    def clip(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.lower, self.upper)

    def interior_radius(self) -> float:
        """Radius of the largest origin-centered ball inside the box.

        Zero if the origin is not in the interior.
        """
        r = min(float(np.min(self.upper)), float(np.min(-self.lower)))
        return max(r, 0.0)


@dataclass
class Controller:
    """Named feedback law ``x -> (u, diagnostics)`` on the plant state.

    Diagnostics is a free-form dict; MPC-backed controllers report solver
    status, iterations and the optimal value there.  Stateful laws (warm
    starting) expose ``reset`` so rollouts start from a clean slate.
    """

    name: str
    law: Callable[[np.ndarray], tuple[np.ndarray, dict]]
    reset: Callable[[], None] | None = None

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        return self.law(x)


@dataclass(frozen=True)
class AssumptionCheck:
    """Result of the PBH rank tests on a lifted model."""

    stabilizable: bool
    observable: bool
    failed: tuple[str, ...] = field(default_factory=tuple)

    @property
    def ok(self) -> bool:
        return not self.failed


def lift(dictionary: Dictionary, x: np.ndarray) -> np.ndarray:
    """Evaluate the lifted state ``z = col(psi_1(x), ..., psi_nz(x))``.

    Broadcasts over leading dimensions of ``x``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dictionary.n:
        raise ValueError(
            f"state has dimension {x.shape[-1]}, dictionary expects {dictionary.n}"
        )
    return np.stack([np.asarray(psi(x), dtype=float) for psi in dictionary.observables], axis=-1)


def koopman_step(model: LiftedModel, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """One step of the nominal lifted predictor, ``A z + B u``."""
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.shape[-1] != model.n_z:
        raise ValueError(f"z has dimension {z.shape[-1]}, model expects {model.n_z}")
    if u.shape[-1] != model.m:
        raise ValueError(f"u has dimension {u.shape[-1]}, model expects {model.m}")
    return z @ model.A.T + u @ model.B.T


def one_step_error(
    model: LiftedModel,
    dictionary: Dictionary,
    plant: Plant,
    x: np.ndarray,
    u: np.ndarray,
) -> np.ndarray:
    """One-step modeling error ``psi(f(x, u)) - A psi(x) - B u``.

    Identically zero iff the plant admits an exact lifted linear embedding
    with these matrices on the evaluated points.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != plant.n:
        raise ValueError(f"state has dimension {x.shape[-1]}, plant expects {plant.n}")
    x_next = plant.step(x, u)
    return lift(dictionary, x_next) - koopman_step(model, lift(dictionary, x), u)


def taylor_linearize(
    plant: Plant,
    x0: np.ndarray,
    u0: np.ndarray,
    h: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of ``plant.step`` at ``(x0, u0)`` by central differences.

    Default step ``h = 1e-6`` balances truncation against rounding for smooth
    plants.  Returns ``(A_t, B_t)`` of shapes ``(n, n)`` and ``(n, m)``.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    x0 = np.asarray(x0, dtype=float)
    u0 = np.asarray(u0, dtype=float)
    A_t = np.zeros((plant.n, plant.n))
    B_t = np.zeros((plant.n, plant.m))
    for j in range(plant.n):
        e = np.zeros(plant.n)
        e[j] = h
        A_t[:, j] = (plant.step(x0 + e, u0) - plant.step(x0 - e, u0)) / (2 * h)
    for j in range(plant.m):
        e = np.zeros(plant.m)
        e[j] = h
        B_t[:, j] = (plant.step(x0, u0 + e) - plant.step(x0, u0 - e)) / (2 * h)
    return A_t, B_t


def check_lifted_model(model: LiftedModel, rank_rtol: float = 1e-8) -> AssumptionCheck:
    """PBH rank tests for stabilizability of (A, B) and observability of (A, C).

    Tested at eigenvalues with ``|lambda| >= 1``; rank tolerance is
    ``rank_rtol`` times the largest singular value of the tested pencil.
    """
    n_z = model.n_z
    failed = []
    eigvals = np.linalg.eigvals(model.A)
    # Scale reference for the rank tolerance: the unshifted stacked data, so
    # a pencil that collapses entirely (tiny A and B) still reads deficient.
    scale_b = float(np.linalg.norm(np.hstack([model.A, model.B]), 2))
    scale_c = float(np.linalg.norm(np.vstack([model.A, model.C]), 2))
    for lam in eigvals:
        if abs(lam) < 1.0:
            continue
        pencil_b = np.hstack([model.A - lam * np.eye(n_z), model.B.astype(complex)])
        s = np.linalg.svd(pencil_b, compute_uv=False)
        if s[-1] <= rank_rtol * max(s[0], scale_b):
            failed.append(f"stabilizability at eigenvalue {lam:.6g}")
        pencil_c = np.vstack([model.A - lam * np.eye(n_z), model.C.astype(complex)])
        s = np.linalg.svd(pencil_c, compute_uv=False)
        if s[-1] <= rank_rtol * max(s[0], scale_c):
            failed.append(f"observability at eigenvalue {lam:.6g}")
    stab = not any(f.startswith("stabilizability") for f in failed)
    obsv = not any(f.startswith("observability") for f in failed)
    return AssumptionCheck(stabilizable=stab, observable=obsv, failed=tuple(failed))


# ---------------------------------------------------------------------------
# Built-in plants and dictionaries
# ---------------------------------------------------------------------------


def _example1_step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([0.9 * x1, 1.5 * x2 + u[..., 0] - 5.0 * x1**2], axis=-1)


def _pendulum_step(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    ts = PENDULUM_TS
    ml2 = PENDULUM_MASS * PENDULUM_LENGTH**2
    x1, x2 = x[..., 0], x[..., 1]
    x1_next = x1 + ts * x2
    x2_next = (
        (1.0 - PENDULUM_FRICTION * ts / ml2) * x2
        + (ts / ml2) * u[..., 0]
        + (PENDULUM_GRAVITY * ts / PENDULUM_LENGTH) * np.sin(x1)
    )
    return np.stack([x1_next, x2_next], axis=-1)


def example1_plant() -> Plant:
    """Two-state plant with quadratic coupling and one input on the second state."""
    return Plant(name="example1", n=2, m=1, step=_example1_step)


def pendulum_plant() -> Plant:
    """Damped inverted pendulum discretized at 0.02 s (angle, angular rate)."""
    return Plant(name="pendulum", n=2, m=1, step=_pendulum_step)


def _identity_observable(i: int) -> Callable[[np.ndarray], np.ndarray]:
    return lambda x: x[..., i]


def identity_dictionary(n: int, name: str | None = None) -> Dictionary:
    """Dictionary of just the coordinate maps: ``lift(x) = x``."""
    obs = tuple(_identity_observable(i) for i in range(n))
    return Dictionary(name=name or f"identity{n}", n=n, observables=obs)


def example1_dictionary() -> Dictionary:
    """Observables (x1, x2, x1^2); lifts example1 to an exact linear model."""
    obs = (
        _identity_observable(0),
        _identity_observable(1),
        lambda x: x[..., 0] ** 2,
    )
    return Dictionary(name="example1", n=2, observables=obs)


def pendulum_dictionary() -> Dictionary:
    """Observables (x1, x2, sin x1) used to identify the pendulum."""
    obs = (
        _identity_observable(0),
        _identity_observable(1),
        lambda x: np.sin(x[..., 0]),
    )
    return Dictionary(name="pendulum3", n=2, observables=obs)


def example1_koopman_model() -> LiftedModel:
    """Exact lifted linear model of the example1 plant.

    With observables (x1, x2, x1^2) the quadratic coupling is captured
    exactly: (x1^2)+ = (0.9 x1)^2 = 0.81 x1^2, and the one-step modeling
    error vanishes identically.
    """
    A = np.array(
        [
            [0.9, 0.0, 0.0],
            [0.0, 1.5, -5.0],
            [0.0, 0.0, 0.81],
        ]
    )
    B = np.array([[0.0], [1.0], [0.0]])
    C = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    return LiftedModel(A=A, B=B, C=C)


_PLANTS: dict[str, Callable[[], Plant]] = {
    "example1": example1_plant,
    "pendulum": pendulum_plant,
}

_DICTIONARIES: dict[str, Callable[[], Dictionary]] = {
    "example1": example1_dictionary,
    "pendulum3": pendulum_dictionary,
    "identity2": lambda: identity_dictionary(2),
}


def get_plant(name: str) -> Plant:
    """Look up a built-in plant by identifier."""
    try:
        return _PLANTS[name]()
    except KeyError:
        raise KeyError(f"unknown plant {name!r}; available: {sorted(_PLANTS)}") from None


def get_dictionary(name: str) -> Dictionary:
    """Look up a built-in observable dictionary by identifier."""
    try:
        return _DICTIONARIES[name]()
    except KeyError:
        raise KeyError(
            f"unknown dictionary {name!r}; available: {sorted(_DICTIONARIES)}"
        ) from None
