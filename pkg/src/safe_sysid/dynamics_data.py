"""Training data: a simulated two-link arm under PID control, and
demonstration datasets stored as one CSV per trajectory with a JSON
manifest sidecar.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .elm import build_inputs
from .jsonio import dumps_canonical

logger = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    """A simulated trajectory failed its convergence or bound checks."""


@dataclass(frozen=True)
class TwoLinkParams:
    """Planar two-link arm, point masses at the link ends."""

    L1: float = 1.0
    L2: float = 1.0
    m1: float = 1.0
    m2: float = 1.0
    gravity: float = 9.81
    dt: float = 1e-3

    def __post_init__(self):
        if min(self.L1, self.L2, self.m1, self.m2, self.dt) <= 0:
            raise ValueError("lengths, masses and dt must be positive")
        if self.gravity < 0:
            raise ValueError("gravity must be >= 0")


@dataclass(frozen=True, eq=False)
class PidGains:
    """Per-joint PID gains (arrays of length 2)."""

    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        for name in ("kp", "ki", "kd"):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.kp < 0):
            raise ValueError("kp must be nonnegative")


@dataclass(frozen=True, eq=False)
class TrajectoryDataset:
    """Ordered state trajectories sampled at a fixed period, plus the target.

    Errors e_k = x_k - target are derived on demand, never stored.  When a
    dataset has been translated, `translation` holds the shift that was
    subtracted and `originals` the untouched source arrays, so undoing the
    translation is exact.
    """

    demonstrations: tuple[np.ndarray, ...]
    target: np.ndarray
    period: float
    translation: np.ndarray | None = None
    originals: tuple[np.ndarray, ...] | None = field(default=None, repr=False)

    def __post_init__(self):
        demos = []
        for traj in self.demonstrations:
            traj = np.atleast_2d(np.asarray(traj, dtype=float))
            if traj.shape[0] < 2:
                raise ValueError("each trajectory needs at least 2 samples")
            traj.setflags(write=False)
            demos.append(traj)
        object.__setattr__(self, "demonstrations", tuple(demos))
        target = np.asarray(self.target, dtype=float).ravel()
        target.setflags(write=False)
        object.__setattr__(self, "target", target)
        if self.period <= 0:
            raise ValueError("period must be positive")

    @property
    def dims(self) -> int:
        return self.demonstrations[0].shape[1]


# ---------------------------------------------------------------------------
# two-link arm simulation
# ---------------------------------------------------------------------------


def _mass_matrix(params: TwoLinkParams, q2: float) -> np.ndarray:
    c2 = np.cos(q2)
    a = (params.m1 + params.m2) * params.L1**2 + params.m2 * params.L2**2
    b = params.m2 * params.L1 * params.L2
    return np.array(
        [
            [a + 2.0 * b * c2, params.m2 * params.L2**2 + b * c2],
            [params.m2 * params.L2**2 + b * c2, params.m2 * params.L2**2],
        ]
    )


def _coriolis_torque(params: TwoLinkParams, q2: float, qd: np.ndarray) -> np.ndarray:
    h = params.m2 * params.L1 * params.L2 * np.sin(q2)
    return np.array(
        [-h * qd[1] * (2.0 * qd[0] + qd[1]), h * qd[0] ** 2]
    )


def _gravity_torque(params: TwoLinkParams, q: np.ndarray) -> np.ndarray:
    g = params.gravity
    t2 = params.m2 * g * params.L2 * np.cos(q[0] + q[1])
    t1 = (params.m1 + params.m2) * g * params.L1 * np.cos(q[0]) + t2
    return np.array([t1, t2])


def el_dynamics(
    params: TwoLinkParams, q: np.ndarray, qdot: np.ndarray, u: np.ndarray
) -> np.ndarray:
    """Joint accelerations M(q)^{-1} (u - C(q, qd) qd - G(q))."""
    q = np.asarray(q, dtype=float).ravel()
    qdot = np.asarray(qdot, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    if q.size != 2 or qdot.size != 2 or u.size != 2:
        raise ValueError("q, qdot, u must be 2-vectors")
    rhs = u - _coriolis_torque(params, q[1], qdot) - _gravity_torque(params, q)
    return np.linalg.solve(_mass_matrix(params, q[1]), rhs)


def rk4_step(
    params: TwoLinkParams, q: np.ndarray, qd: np.ndarray, u: np.ndarray, dt: float
) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step of the arm under constant torque u."""

    def deriv(state):
        return np.concatenate([state[2:], el_dynamics(params, state[:2], state[2:], u)])

    y = np.concatenate([q, qd])
    k1 = deriv(y)
    k2 = deriv(y + 0.5 * dt * k1)
    k3 = deriv(y + 0.5 * dt * k2)
    k4 = deriv(y + dt * k3)
    y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return y[:2], y[2:]


def _simulate_pid(
    params: TwoLinkParams,
    gains: PidGains,
    q0: np.ndarray,
    target: np.ndarray,
    steps: int,
    period: float,
) -> np.ndarray:
    """Positions-only record of a PID-regulated run, length steps + 1."""
    substeps = int(round(period / params.dt))
    if substeps < 1 or abs(substeps * params.dt - period) > 1e-12:
        raise ValueError("period must be an integer multiple of dt")
    q = np.asarray(q0, dtype=float).copy()
    qd = np.zeros(2)
    integral = np.zeros(2)
    record = np.empty((steps + 1, 2))
    record[0] = q
    for k in range(steps):
        for _ in range(substeps):
            err = target - q
            u = gains.kp * err + gains.ki * integral - gains.kd * qd
            q, qd = rk4_step(params, q, qd, u, params.dt)
            integral = integral + err * params.dt
        record[k + 1] = q
    return record


DEFAULT_GAINS = PidGains(kp=np.array([60.0, 60.0]), ki=np.array([5.0, 5.0]), kd=np.array([20.0, 20.0]))

JOINT_LIMIT = 1.90
CONVERGENCE_TOL = 0.01


def generate_robot_data(
    params: TwoLinkParams,
    gains: PidGains,
    initial_conditions,
    target: np.ndarray,
    steps: int,
    period: float,
) -> TrajectoryDataset:
    """Simulate one PID run per initial condition and collect positions.

    Every run must end within 0.01 rad of the target and keep both joints
    within +-1.90 rad throughout, otherwise generation fails naming the
    initial condition.
    """
    target = np.asarray(target, dtype=float).ravel()
    demos = []
    for q0 in initial_conditions:
        q0 = np.asarray(q0, dtype=float).ravel()
        traj = _simulate_pid(params, gains, q0, target, steps, period)
        if not np.all(np.isfinite(traj)):
            raise GenerationError(f"trajectory from {q0} diverged")
        if np.linalg.norm(traj[-1] - target) > CONVERGENCE_TOL:
            raise GenerationError(
                f"trajectory from {q0} did not converge: final error "
                f"{np.linalg.norm(traj[-1] - target):.4g} rad"
            )
        if np.abs(traj).max() > JOINT_LIMIT:
            raise GenerationError(
                f"trajectory from {q0} exceeds the +-{JOINT_LIMIT} rad joint bound"
            )
        demos.append(traj)
    return TrajectoryDataset(demonstrations=tuple(demos), target=target, period=period)


# ---------------------------------------------------------------------------
# demonstration files
# ---------------------------------------------------------------------------


def save_dataset(dataset: TrajectoryDataset, directory) -> Path:
    """Write one CSV per demonstration plus a manifest.json; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, traj in enumerate(dataset.demonstrations):
        name = f"demo_{i:02d}.csv"
        np.savetxt(directory / name, traj, delimiter=",", fmt="%.17g")
        files.append(name)
    manifest = {
        "period": dataset.period,
        "dims": dataset.dims,
        "files": files,
        "target": dataset.target.tolist(),
    }
    path = directory / "manifest.json"
    with open(path, "w") as f:
        f.write(dumps_canonical(manifest))
        f.write("\n")
    return path


def load_demonstrations(path, translate_to_origin: bool = False) -> TrajectoryDataset:
    """Load a manifest (or a directory containing manifest.json).

    Without a target in the manifest, the common trajectory endpoint is
    used; endpoints that disagree by more than 5% of the data extent only
    warn, and the mean endpoint wins.  With translate_to_origin, all
    trajectories are shifted so the target sits at the origin; the shift
    is recorded and the original arrays are kept for an exact inverse.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as f:
        manifest = json.load(f)
    directory = path.parent
    demos = []
    for name in manifest["files"]:
        traj = np.loadtxt(directory / name, delimiter=",", ndmin=2)
        if traj.shape[1] != manifest["dims"]:
            raise ValueError(
                f"{name}: expected {manifest['dims']} columns, got {traj.shape[1]}"
            )
        demos.append(traj)
    if not demos:
        raise ValueError(f"{path}: no demonstration files listed")

    if "target" in manifest:
        target = np.asarray(manifest["target"], dtype=float)
    else:
        endpoints = np.array([d[-1] for d in demos])
        target = endpoints.mean(axis=0)
        stacked = np.vstack(demos)
        extent = float(np.linalg.norm(stacked.max(axis=0) - stacked.min(axis=0)))
        worst = float(np.linalg.norm(endpoints - target, axis=1).max())
        if extent > 0 and worst > 0.05 * extent:
            warnings.warn(
                f"demonstration endpoints disagree by {worst:.4g} "
                f"(> 5% of extent {extent:.4g}); using their mean"
            )

    if not translate_to_origin:
        return TrajectoryDataset(tuple(demos), target, float(manifest["period"]))
    shifted = tuple(d - target for d in demos)
    return TrajectoryDataset(
        demonstrations=shifted,
        target=np.zeros_like(target),
        period=float(manifest["period"]),
        translation=target.copy(),
        originals=tuple(demos),
    )


def untranslate(dataset: TrajectoryDataset) -> TrajectoryDataset:
    """Undo a translate_to_origin load, restoring the source arrays exactly."""
    if dataset.translation is None:
        return dataset
    if dataset.originals is None:
        raise ValueError("dataset has a translation but no stored originals")
    return TrajectoryDataset(
        demonstrations=dataset.originals,
        target=dataset.translation.copy(),
        period=dataset.period,
    )


def to_training_pairs(dataset: TrajectoryDataset) -> tuple[np.ndarray, np.ndarray]:
    """Inputs s_k = [x_k, x_k - target, 1] and targets x_{k+1}.

    One pair per consecutive sample, so the count is sum(len - 1) over
    demonstrations.
    """
    inputs = []
    targets = []
    for traj in dataset.demonstrations:
        inputs.append(build_inputs(traj[:-1], dataset.target))
        targets.append(traj[1:])
    return np.vstack(inputs), np.vstack(targets)


def make_synthetic_snake(
    n_demos: int = 7,
    samples: int = 250,
    seed=0,
    endpoint: np.ndarray = (-0.3, 0.25),
    period: float = 0.01,
) -> TrajectoryDataset:
    """Stand-in for a hand-drawn S-shaped demonstration set.

    Produces n_demos winding planar trajectories that share one endpoint
    exactly, with pen speed easing to zero near the end the way digitized
    handwriting does.
    """
    rng = np.random.default_rng(seed)
    endpoint = np.asarray(endpoint, dtype=float)
    demos = []
    for _ in range(n_demos):
        amp = 1.0 + 0.15 * rng.standard_normal()
        phase = 0.3 * rng.standard_normal()
        length = 4.5 + 0.3 * rng.standard_normal()
        # progress eases quadratically so increments shrink toward the end
        s = (1.0 - np.linspace(0.0, 1.0, samples)) ** 2
        x = -length * s
        y = amp * np.sin(2.4 * np.pi * s + phase) * s
        traj = np.column_stack([x, y])
        traj += 0.005 * rng.standard_normal(traj.shape) * s[:, None]
        traj[-1] = 0.0
        traj = traj + endpoint
        demos.append(traj)
    return TrajectoryDataset(tuple(demos), endpoint.copy(), period)
