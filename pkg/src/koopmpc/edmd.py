"""Trajectory data generation and least-squares identification of lifted models.

Snapshots ``(x, u, x_next)`` are collected by rolling a plant forward under
independent uniform inputs.  The lifted matrices ``(A, B)`` then minimize the
Frobenius residual ``|| Z+ - A Z - B U ||_F`` over the stacked lifted
snapshots; ``C`` is fixed structurally to ``[I 0]`` and never regressed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from .model import Box, Dictionary, LiftedModel, Plant, check_lifted_model, lift

__all__ = [
    "Dataset",
    "ResidualReport",
    "SingularFitError",
    "ModelAssumptionError",
    "generate_dataset",
    "edmd_fit",
    "fit_residual_report",
    "save_dataset",
    "load_dataset",
]

# States with any component beyond this magnitude mark a divergent trajectory.
OVERFLOW_GUARD = 1e6


class SingularFitError(RuntimeError):
    """The regressor is rank deficient; ``blocks`` names the deficient parts."""

    def __init__(self, message: str, blocks: tuple[str, ...]):
        super().__init__(message)
        self.blocks = blocks


class ModelAssumptionError(RuntimeError):
    """The identified model failed a stabilizability/observability rank test."""

    def __init__(self, message: str, failed: tuple[str, ...]):
        super().__init__(message)
        self.failed = failed


@dataclass(frozen=True)
class Dataset:
    """Stacked snapshot triples with the seed and sampling metadata.

    ``x``, ``u`` and ``x_next`` have shapes ``(K, n)``, ``(K, m)`` and
    ``(K, n)``; every row satisfies ``x_next = plant.step(x, u)`` and the
    whole set is regenerable from ``meta`` and ``seed``.
    """

    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class ResidualReport:
    """Norm statistics of the one-step lifted residual over a dataset."""

    rms_error: float
    max_error: float
    per_observable_rms: np.ndarray

    def to_dict(self) -> dict:
        return {
            "rms_error": self.rms_error,
            "max_error": self.max_error,
            "per_observable_rms": self.per_observable_rms.tolist(),
        }


def generate_dataset(
    plant: Plant,
    x_ranges: Box,
    u_range: Box,
    num_traj: int,
    length: int,
    seed: int,
) -> Dataset:
    """Roll ``num_traj`` trajectories of ``length`` states under uniform inputs.

    Initial states are uniform over ``x_ranges``; inputs are i.i.d. uniform
    per step over ``u_range`` (piecewise constant over one sample).  Each
    trajectory draws from its own RNG stream derived from the master seed, so
    the result is independent of evaluation order.  A trajectory whose state
    exceeds the overflow guard is truncated there and flagged in ``meta``.
    """
    if num_traj < 1:
        raise ValueError("num_traj must be >= 1")
    if length < 2:
        raise ValueError("length must be >= 2 (at least one transition)")
    if x_ranges.dim != plant.n or u_range.dim != plant.m:
        raise ValueError("sampling boxes must match the plant dimensions")

    streams = np.random.SeedSequence(seed).spawn(num_traj)
    x0 = np.empty((num_traj, plant.n))
    inputs = np.empty((num_traj, length - 1, plant.m))
    for i, ss in enumerate(streams):
        rng = np.random.default_rng(ss)
        x0[i] = rng.uniform(x_ranges.lower, x_ranges.upper)
        inputs[i] = rng.uniform(u_range.lower, u_range.upper, size=(length - 1, plant.m))

    states = np.empty((num_traj, length, plant.n))
    states[:, 0] = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(length - 1):
            states[:, t + 1] = plant.step(states[:, t], inputs[:, t])

    # First index where a trajectory leaves the guard (length if it never does).
    bad = ~np.all(np.abs(states) <= OVERFLOW_GUARD, axis=2) | ~np.all(
        np.isfinite(states), axis=2
    )
    first_bad = np.where(bad.any(axis=1), bad.argmax(axis=1), length)
    truncated = [int(i) for i in np.nonzero(first_bad < length)[0]]

    xs, us, xns = [], [], []
    for i in range(num_traj):
        keep = min(length - 1, int(first_bad[i]) - 1)
        if keep <= 0:
            continue
        xs.append(states[i, :keep])
        us.append(inputs[i, :keep])
        xns.append(states[i, 1 : keep + 1])
    if not xs:
        raise ValueError("all trajectories diverged immediately; no snapshots")

    meta = {
        "plant": plant.name,
        "x_lower": x_ranges.lower.tolist(),
        "x_upper": x_ranges.upper.tolist(),
        "u_lower": u_range.lower.tolist(),
        "u_upper": u_range.upper.tolist(),
        "num_trajectories": num_traj,
        "length": length,
        "truncated_trajectories": truncated,
        "overflow_guard": OVERFLOW_GUARD,
    }
    return Dataset(
        x=np.concatenate(xs),
        u=np.concatenate(us),
        x_next=np.concatenate(xns),
        seed=seed,
        meta=meta,
    )


def _rank_of(M: np.ndarray) -> int:
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    tol = max(M.shape) * np.finfo(float).eps * (s[0] if s[0] > 0 else 1.0)
    return int(np.sum(s > tol))


def edmd_fit(
    data: Dataset,
    dictionary: Dictionary,
    check_assumptions: bool = True,
) -> LiftedModel:
    """Least-squares fit of the lifted matrices ``(A, B)`` from snapshots.

    Solved via an economic QR factorization of the stacked regressor
    ``[Z U]``; the normal equations are reserved for test oracles.  ``C`` is
    fixed to ``[I 0]``.  After the fit the PBH rank tests are run and a
    failure is reported through :class:`ModelAssumptionError` (set
    ``check_assumptions=False`` to skip, e.g. for diagnostics).

    Raises
    ------
    SingularFitError
        If the regressor is rank deficient; the error names the deficient
        block (lifted-state, input, or their combination).
    """
    n_z, m = dictionary.n_z, data.u.shape[1]
    if len(data) == 0:
        raise ValueError("dataset is empty")
    if len(data) < n_z + m:
        raise ValueError(
            f"need at least n_z + m = {n_z + m} snapshots, got {len(data)}"
        )

    Z = lift(dictionary, data.x)
    Z_next = lift(dictionary, data.x_next)
    W = np.hstack([Z, data.u])

    if _rank_of(W) < n_z + m:
        blocks = []
        if _rank_of(Z) < n_z:
            blocks.append("lifted-state")
        if _rank_of(data.u) < m:
            blocks.append("input")
        if not blocks:
            blocks.append("joint lifted-state/input")
        raise SingularFitError(
            f"regressor is rank deficient in the {' and '.join(blocks)} block(s)",
            blocks=tuple(blocks),
        )

    Q_fac, R_fac = np.linalg.qr(W)
    coeffs = solve_triangular(R_fac, Q_fac.T @ Z_next)
    A = coeffs[:n_z].T
    B = coeffs[n_z:].T
    C = dictionary.identity_first_matrix()
    model = LiftedModel(A=A, B=B, C=C)

    if check_assumptions:
        report = check_lifted_model(model)
        if not report.ok:
            raise ModelAssumptionError(
                "identified model failed rank tests: " + "; ".join(report.failed),
                failed=report.failed,
            )
    return model


def fit_residual_report(
    data: Dataset, dictionary: Dictionary, model: LiftedModel
) -> ResidualReport:
    """Residual statistics ``psi(x_next) - A psi(x) - B u`` over a dataset."""
    Z = lift(dictionary, data.x)
    Z_next = lift(dictionary, data.x_next)
    residual = Z_next - Z @ model.A.T - data.u @ model.B.T
    norms = np.linalg.norm(residual, axis=1)
    return ResidualReport(
        rms_error=float(np.sqrt(np.mean(norms**2))),
        max_error=float(np.max(norms)),
        per_observable_rms=np.sqrt(np.mean(residual**2, axis=0)),
    )


def save_dataset(data: Dataset, csv_path: str | Path) -> Path:
    """Write snapshots to columnar CSV plus a JSON sidecar with seed and meta.

    Columns are ``x1..xn, u1..um, x1_next..xn_next``; the sidecar sits next
    to the CSV with a ``.json`` suffix.  Returns the sidecar path.
    """
    csv_path = Path(csv_path)
    n = data.x.shape[1]
    m = data.u.shape[1]
    header = ",".join(
        [f"x{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(m)]
        + [f"x{i + 1}_next" for i in range(n)]
    )
    table = np.hstack([data.x, data.u, data.x_next])
    np.savetxt(csv_path, table, delimiter=",", header=header, comments="", fmt="%.17e")
    sidecar = csv_path.with_suffix(".json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump({"seed": data.seed, "meta": data.meta}, fh, indent=2, sort_keys=True)
    return sidecar


def load_dataset(csv_path: str | Path) -> Dataset:
    """Load a dataset written by :func:`save_dataset`."""
    csv_path = Path(csv_path)
    with open(csv_path.with_suffix(".json"), encoding="utf-8") as fh:
        sidecar = json.load(fh)
    with open(csv_path, encoding="utf-8") as fh:
        names = fh.readline().strip().split(",")
    table = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    n = sum(1 for c in names if c.startswith("x") and not c.endswith("_next"))
    m = sum(1 for c in names if c.startswith("u"))
    return Dataset(
        x=table[:, :n],
        u=table[:, n : n + m],
        x_next=table[:, n + m :],
        seed=sidecar["seed"],
        meta=sidecar["meta"],
    )
