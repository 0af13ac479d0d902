"""Trajectory reproduction from a learned model and empirical certification.

Monte Carlo runs perturb the initial condition and count barrier
violations; the one-step audit re-evaluates the barrier and Lyapunov
conditions of the mean model at arbitrary states.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass

import numpy as np

from .constraints import (
    RiskSpec,
    SafetySpec,
    StabilitySpec,
    barrier_value,
    build_safety_constraint,
    build_stability_constraint,
    lyapunov_value,
)
from .elm import ElmModel, build_input, feature_map, predict_mean

_DIVERGENCE_LIMIT = 1e9


@dataclass(frozen=True)
class RolloutConfig:
    """Settings for reproduction runs and the Monte Carlo study."""

    horizon: int = 500
    noise: bool = False
    initial_perturbation_radius: float = 0.0
    mc_runs: int = 100
    convergence_radius: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be >= 1")
        if self.initial_perturbation_radius < 0 or self.convergence_radius < 0:
            raise ValueError("radii must be >= 0")


@dataclass(frozen=True, eq=False)
class RolloutReport:
    """Per-run statistics and their aggregates for one Monte Carlo study."""

    min_barrier: np.ndarray
    final_distance: np.ndarray
    violation: np.ndarray
    steps_to_converge: np.ndarray
    max_lyapunov_step: np.ndarray
    diverged: np.ndarray

    @property
    def runs(self) -> int:
        return self.min_barrier.size

    @property
    def violation_count(self) -> int:
        return int(np.sum(self.violation))

    @property
    def max_final_distance(self) -> float:
        return float(self.final_distance.max())

    @property
    def mean_steps_to_converge(self) -> float:
        converged = self.steps_to_converge[self.steps_to_converge >= 0]
        return float(converged.mean()) if converged.size else float("nan")

    def summary(self) -> dict:
        return {
            "runs": self.runs,
            "violations": self.violation_count,
            "converged_runs": int(np.sum(self.steps_to_converge >= 0)),
            "max_final_distance": self.max_final_distance,
            "mean_steps_to_converge": self.mean_steps_to_converge,
            "min_barrier_overall": float(self.min_barrier.min()),
            "max_lyapunov_step_overall": float(self.max_lyapunov_step.max()),
            "diverged_runs": int(np.sum(self.diverged)),
        }


def rollout(
    model: ElmModel,
    x0: np.ndarray,
    equilibrium: np.ndarray,
    horizon: int,
    sigma: float = 0.0,
    seed=None,
) -> tuple[np.ndarray, bool]:
    """Iterate the learned map from x0 for `horizon` steps.

    Inputs are rebuilt each step as [x, x - equilibrium, 1].  Returns the
    trajectory (horizon+1 rows when healthy) and a divergence flag; a
    non-finite or astronomically large state truncates the trajectory.
    """
    x = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    eq = np.asarray(equilibrium, dtype=float).ravel()
    rng = np.random.default_rng(seed) if sigma > 0 else None
    states = [x.copy()]
    for _ in range(horizon):
        nxt = predict_mean(model, build_input(x, x - eq))
        if rng is not None:
            nxt = nxt + sigma * rng.standard_normal(x.size)
        if not np.all(np.isfinite(nxt)) or np.linalg.norm(nxt) > _DIVERGENCE_LIMIT:
            return np.array(states), True
        states.append(nxt)
        x = nxt
    return np.array(states), False


def _perturb(rng: np.random.Generator, x0: np.ndarray, radius: float) -> np.ndarray:
    if radius == 0.0:
        return x0.copy()
    direction = rng.standard_normal(x0.size)
    direction /= np.linalg.norm(direction)
    r = radius * rng.uniform() ** (1.0 / x0.size)
    return x0 + r * direction


def _run_once(model, safety, stability, x0, config, sigma, run_idx):
    rng = np.random.default_rng([config.seed, run_idx])
    start = _perturb(rng, x0, config.initial_perturbation_radius)
    traj, diverged = rollout(
        model,
        start,
        stability.equilibrium,
        config.horizon,
        sigma if config.noise else 0.0,
        seed=[config.seed, run_idx, 1],
    )
    barriers = np.array([barrier_value(safety, x) for x in traj])
    dists = np.linalg.norm(traj - stability.equilibrium[None, :], axis=1)
    vals = np.array([lyapunov_value(stability, x) for x in traj])
    if len(traj) > 1:
        lyap_step = float(np.max(np.diff(vals) + stability.rho * vals[:-1]))
    else:
        lyap_step = float("-inf")
    hit = np.nonzero(dists <= config.convergence_radius)[0]
    converged_at = int(hit[0]) if hit.size and dists[-1] <= config.convergence_radius else -1
    return {
        "trajectory": traj,
        "min_barrier": float(barriers.min()),
        "final_distance": float(dists[-1]),
        "violation": bool(barriers.min() < 0.0),
        "steps_to_converge": converged_at,
        "max_lyapunov_step": lyap_step,
        "diverged": diverged,
    }


def _worker_count() -> int:
    raw = os.environ.get("SAFE_SYSID_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def monte_carlo_verify(
    model: ElmModel,
    safety: SafetySpec,
    stability: StabilitySpec,
    nominal_x0: np.ndarray,
    config: RolloutConfig,
    sigma: float = 0.0,
    keep_trajectories: bool = False,
):
    """Roll out mc_runs perturbed starts and report barrier/convergence stats.

    Each run owns a generator seeded by (config.seed, run index), so the
    report is reproducible and independent of execution order.  Violations
    are data, not errors.
    """
    x0 = np.asarray(nominal_x0, dtype=float).ravel()
    if barrier_value(safety, x0) < 0:
        raise ValueError("nominal initial state lies outside the safe set")
    workers = _worker_count()
    indices = range(config.mc_runs)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    lambda i: _run_once(model, safety, stability, x0, config, sigma, i),
                    indices,
                )
            )
    else:
        results = [
            _run_once(model, safety, stability, x0, config, sigma, i) for i in indices
        ]
    report = RolloutReport(
        min_barrier=np.array([r["min_barrier"] for r in results]),
        final_distance=np.array([r["final_distance"] for r in results]),
        violation=np.array([r["violation"] for r in results], dtype=bool),
        steps_to_converge=np.array([r["steps_to_converge"] for r in results]),
        max_lyapunov_step=np.array([r["max_lyapunov_step"] for r in results]),
        diverged=np.array([r["diverged"] for r in results], dtype=bool),
    )
    if keep_trajectories:
        return report, [r["trajectory"] for r in results]
    return report


def one_step_constraint_audit(
    model: ElmModel,
    safety: SafetySpec,
    stability: StabilitySpec,
    states: np.ndarray,
    sigma: float = 0.0,
    risk: RiskSpec | None = None,
    margin_safety: float = 0.0,
    margin_stability: float = 0.0,
    variance_floor="assume",
    tol: float = 1e-8,
) -> list[dict]:
    """Evaluate the one-step conditions of the mean model at given states.

    Per state: barrier value, barrier condition h(x+) - h(x) + gamma h(x),
    Lyapunov value, Lyapunov condition V(x+) - V(x) + rho V(x), and the
    violations of the quadratic training constraints (matching
    check_feasibility).  Sign failures of the strict conditions are
    flagged at tolerance `tol`.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if states.shape[0] == 0:
        raise ValueError("states must be nonempty")
    risk = risk or RiskSpec(p_k=0.9)
    rows = []
    for x in states:
        g = feature_map(model, build_input(x, x - stability.equilibrium))
        nxt = model.output_weights.T @ g
        h = barrier_value(safety, x)
        v = lyapunov_value(stability, x)
        cb = barrier_value(safety, nxt) - h + safety.gamma * h
        cl = lyapunov_value(stability, nxt) - v + stability.rho * v
        cs = build_safety_constraint(
            safety, risk, sigma, x, g, margin_safety, variance_floor
        )
        cst = build_stability_constraint(
            stability, risk, sigma, x, g, margin_stability, variance_floor
        )
        rows.append(
            {
                "state": x.tolist(),
                "barrier": h,
                "barrier_condition": cb,
                "lyapunov": v,
                "lyapunov_condition": cl,
                "safety_violation": max(0.0, cs.value(model.output_weights) - cs.bound),
                "stability_violation": max(0.0, cst.value(model.output_weights) - cst.bound),
                "barrier_flag": bool(cb < -tol),
                "lyapunov_flag": bool(cl > tol),
            }
        )
    return rows
