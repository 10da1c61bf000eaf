"""Closed-loop rollouts, accumulated-cost accounting and controller comparison."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .certify import DecayFit, fit_decay_rate
from .model import Controller, Dictionary, Plant, StageCost, lift
from .mpc import CondensedMpc, InfeasibleError, mpc_law, shifted_sequence, solve_kmpc

__all__ = [
    "Trajectory",
    "RunSummary",
    "ComparisonReport",
    "ValueTrace",
    "rollout",
    "compare",
    "value_trace",
    "mpc_controller",
    "save_trajectory_csv",
]


@dataclass(frozen=True)
class Trajectory:
    """Closed-loop record: states, inputs, per-step costs and solver statuses.

    ``states`` has one more row than ``inputs``; ``accumulated_cost`` is the
    prefix sum of ``stage_costs``.  If the controller became infeasible the
    trajectory is truncated and ``infeasible_at`` holds the offending step.
    """

    x0: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    stage_costs: np.ndarray
    accumulated_cost: np.ndarray
    statuses: tuple[str, ...]
    infeasible_at: int | None = None

    @property
    def num_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def total_cost(self) -> float:
        return float(self.accumulated_cost[-1]) if self.accumulated_cost.size else 0.0


@dataclass(frozen=True)
class RunSummary:
    controller: str
    x0: np.ndarray
    total_cost: float
    converged: bool
    final_norm: float
    infeasible: bool
    decay: DecayFit | None

    def to_dict(self) -> dict:
        d = {
            "controller": self.controller,
            "x0": self.x0.tolist(),
            "total_cost": self.total_cost,
            "converged": self.converged,
            "final_norm": self.final_norm,
            "infeasible": self.infeasible,
        }
        if self.decay is not None:
            d["decay"] = {
                "c": self.decay.c,
                "rho": self.decay.rho,
                "certified": self.decay.certified,
            }
        return d


@dataclass(frozen=True)
class ComparisonReport:
    """Per-run summaries plus pairwise relative cost gaps for each start.

    The raw trajectories are kept alongside (same order as ``runs``) for
    artifact writers; they are not part of the JSON payload.
    """

    runs: tuple[RunSummary, ...]
    gaps: tuple[dict, ...]
    trajectories: tuple[Trajectory, ...] = ()

    def to_dict(self) -> dict:
        return {
            "runs": [r.to_dict() for r in self.runs],
            "relative_cost_gaps": list(self.gaps),
        }


@dataclass(frozen=True)
class ValueTrace:
    """Optimal values along a trajectory; truncated where the MPC lost feasibility."""

    values: np.ndarray
    infeasible_at: int | None = None


def rollout(
    plant: Plant,
    controller: Controller,
    cost: StageCost,
    x0: np.ndarray,
    T: int,
) -> Trajectory:
    """Run the closed loop for ``T`` steps from ``x0``.

    Stops early (truncated, flagged) if the controller reports infeasibility;
    recursive-feasibility violations are observable in the result, not fatal.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x0 = np.asarray(x0, dtype=float)
    if controller.reset is not None:
        controller.reset()
    states = [x0.copy()]
    inputs, costs, statuses = [], [], []
    infeasible_at = None
    x = x0.copy()
    for t in range(T):
        try:
            u, diag = controller(x)
        except InfeasibleError:
            infeasible_at = t
            break
        u = np.asarray(u, dtype=float)
        inputs.append(u)
        costs.append(cost.evaluate(x, u))
        statuses.append(str(diag.get("status", "ok")))
        x = plant.step(x, u)
        states.append(x.copy())
    stage_costs = np.asarray(costs)
    return Trajectory(
        x0=x0,
        states=np.asarray(states),
        inputs=np.asarray(inputs).reshape(len(inputs), plant.m),
        stage_costs=stage_costs,
        accumulated_cost=np.cumsum(stage_costs),
        statuses=tuple(statuses),
        infeasible_at=infeasible_at,
    )


def compare(
    plant: Plant,
    controllers: list[Controller],
    cost: StageCost,
    x0s: list[np.ndarray],
    T: int,
    conv_tol: float = 1e-2,
) -> ComparisonReport:
    """Roll every controller from every initial state and tabulate the results.

    For each start, the report carries one summary per controller and the
    relative accumulated-cost gap of every ordered controller pair,
    ``(cost_a - cost_b) / cost_b``.
    """
    if not controllers or not x0s:
        raise ValueError("need at least one controller and one initial state")
    runs: list[RunSummary] = []
    trajectories: list[Trajectory] = []
    costs: dict[tuple[int, int], float] = {}
    for ix, x0 in enumerate(x0s):
        for ic, ctrl in enumerate(controllers):
            traj = rollout(plant, ctrl, cost, np.asarray(x0, dtype=float), T)
            trajectories.append(traj)
            decay = fit_decay_rate(traj) if traj.states.shape[0] >= 10 else None
            final_norm = float(np.linalg.norm(traj.final_state))
            runs.append(
                RunSummary(
                    controller=ctrl.name,
                    x0=np.asarray(x0, dtype=float),
                    total_cost=traj.total_cost,
                    converged=final_norm <= conv_tol and traj.infeasible_at is None,
                    final_norm=final_norm,
                    infeasible=traj.infeasible_at is not None,
                    decay=decay,
                )
            )
            costs[(ix, ic)] = traj.total_cost
    gaps = []
    for ix in range(len(x0s)):
        for ia in range(len(controllers)):
            for ib in range(len(controllers)):
                if ia == ib:
                    continue
                ca, cb = costs[(ix, ia)], costs[(ix, ib)]
                gap = 0.0 if ca == cb else (ca - cb) / cb if cb != 0 else float("inf")
                gaps.append(
                    {
                        "x0_index": ix,
                        "controller": controllers[ia].name,
                        "baseline": controllers[ib].name,
                        "relative_gap": gap,
                    }
                )
    return ComparisonReport(
        runs=tuple(runs), gaps=tuple(gaps), trajectories=tuple(trajectories)
    )


def value_trace(cm: CondensedMpc, dictionary: Dictionary, traj: Trajectory) -> ValueTrace:
    """Optimal MPC value at every visited state, re-solving from scratch."""
    values = []
    infeasible_at = None
    for t, x in enumerate(np.asarray(traj.states)):
        sol = solve_kmpc(cm, lift(dictionary, x))
        if sol.status == "infeasible":
            infeasible_at = t
            break
        values.append(sol.value)
    return ValueTrace(values=np.asarray(values), infeasible_at=infeasible_at)


class _MpcLaw:
    """Stateful MPC law with shifted-sequence warm starting."""

    def __init__(self, cm: CondensedMpc, dictionary: Dictionary, solver_kwargs: dict):
        self._cm = cm
        self._dict = dictionary
        self._kwargs = solver_kwargs
        self._prev: tuple[np.ndarray, np.ndarray] | None = None

    def reset(self) -> None:
        self._prev = None

    def __call__(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        z = lift(self._dict, np.asarray(x, dtype=float))
        warm = None
        if self._prev is not None:
            warm = shifted_sequence(self._cm, *self._prev)
        u0, sol = mpc_law(self._cm, z, warm_start=warm, **self._kwargs)
        self._prev = (z, sol.u_seq)
        return u0, {
            "status": sol.status,
            "iterations": sol.iterations,
            "value": sol.value,
            "primal_residual": sol.primal_residual,
            "dual_residual": sol.dual_residual,
        }


def mpc_controller(
    cm: CondensedMpc,
    dictionary: Dictionary,
    name: str = "koopman-mpc",
    **solver_kwargs,
) -> Controller:
    """Receding-horizon controller around :func:`koopmpc.mpc.solve_kmpc`.

    Warm starts each solve with the one-step shifted previous solution, which
    is feasible for the nominal lifted update and keeps the splitting fast
    along a trajectory.
    """
    law = _MpcLaw(cm, dictionary, solver_kwargs)
    return Controller(name=name, law=law, reset=law.reset)


def save_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    """Write one row per step: ``t, x*, u*, stage_cost, accum_cost, status``."""
    path = Path(path)
    n = traj.states.shape[1]
    m = traj.inputs.shape[1] if traj.inputs.size else 1
    header = (
        ["t"]
        + [f"x{i + 1}" for i in range(n)]
        + [f"u{i + 1}" for i in range(m)]
        + ["stage_cost", "accum_cost", "status"]
    )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t in range(traj.num_steps):
            row = (
                [t]
                + [f"{v:.17e}" for v in traj.states[t]]
                + [f"{v:.17e}" for v in traj.inputs[t]]
                + [f"{traj.stage_costs[t]:.17e}", f"{traj.accumulated_cost[t]:.17e}"]
                + [traj.statuses[t]]
            )
            writer.writerow(row)
