"""Grid discretization of the state domain and constraint-point selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .constraints import (
    RiskSpec,
    SafetySpec,
    StabilitySpec,
    build_safety_constraint,
    build_stability_constraint,
)
from .elm import ElmModel, feature_matrix

DEFAULT_POINT_CAP = 1_000_000


class TooManyPointsError(ValueError):
    """Requested grid resolution exceeds the point cap."""


@dataclass(frozen=True, eq=False)
class DomainBox:
    """Axis-aligned box to be gridded, lower < upper componentwise."""

    lower: np.ndarray
    upper: np.ndarray
    inflation: float = 0.0

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float).ravel()
        upper = np.asarray(self.upper, dtype=float).ravel()
        if lower.size != upper.size:
            raise ValueError("lower/upper dimension mismatch")
        if not np.all(lower < upper):
            raise ValueError("lower must be strictly below upper componentwise")
        if self.inflation < 0:
            raise ValueError("inflation must be >= 0")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Finite set of states with the grid resolution they were drawn at."""

    points: np.ndarray
    tau: float

    def __post_init__(self):
        points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if points.shape[0] == 0:
            raise ValueError("sample set must be nonempty")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def count(self) -> int:
        return self.points.shape[0]


def domain_from_safety(spec: SafetySpec, inflation: float = 0.2) -> DomainBox:
    """Bounding box of the safe-set ellipse, enlarged by the inflation factor.

    Sampling beyond the ellipse lets the learned model pull excursions back
    into the safe set instead of being unconstrained there.
    """
    half = np.sqrt(np.diag(np.linalg.inv(spec.A)))
    half = half * (1.0 + inflation)
    return DomainBox(spec.center - half, spec.center + half, inflation)


def _axis_points(lo: float, hi: float, tau: float) -> np.ndarray:
    k = int(np.ceil((hi - lo) / tau))
    pts = lo + tau * np.arange(k + 1)
    if pts[-1] > hi:
        pts[-1] = hi
    return pts


def grid_domain(box: DomainBox, tau: float, cap: int = DEFAULT_POINT_CAP) -> SampleSet:
    """Uniform axis-aligned grid with spacing tau covering the box.

    Every point of the box lies within tau/2 of a grid point per axis,
    hence within tau*sqrt(n)/2 in the Euclidean norm.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    axes = [
        _axis_points(lo, hi, tau) for lo, hi in zip(box.lower, box.upper)
    ]
    count = int(np.prod([len(a) for a in axes]))
    if count > cap:
        n = len(axes)
        suggested = tau * (count / cap) ** (1.0 / n)
        raise TooManyPointsError(
            f"grid would contain {count} > {cap} points; try tau >= {suggested:.6g}"
        )
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    return SampleSet(points=points, tau=float(tau))


def select_active_points(
    grid: SampleSet,
    model: ElmModel,
    safety: SafetySpec,
    stability: StabilitySpec,
    risk: RiskSpec,
    sigma: float,
    budget: int,
    seed,
) -> SampleSet:
    """Pick `budget` grid points for constraint enforcement.

    Half the budget goes to the points whose safety/stability constraints
    have the smallest slack under the model's current output weights (the
    nearly violated ones); the rest is a uniform random top-up for
    coverage.  Deterministic for a fixed seed.
    """
    if budget > grid.count:
        raise ValueError(f"budget {budget} exceeds grid size {grid.count}")
    if budget <= 0:
        raise ValueError("budget must be positive")
    if budget == grid.count:
        return grid

    feats = feature_matrix(model, grid.points, stability.equilibrium)
    preds = feats @ model.output_weights
    slack = np.empty(grid.count)
    for i, x in enumerate(grid.points):
        cs = build_safety_constraint(safety, risk, sigma, x, feats[i])
        cl = build_stability_constraint(stability, risk, sigma, x, feats[i])
        r_s = preds[i] - cs.offset
        r_l = preds[i] - cl.offset
        slack[i] = min(
            cs.bound - float(r_s @ cs.shape @ r_s),
            cl.bound - float(r_l @ cl.shape @ r_l),
        )

    n_ranked = (budget + 1) // 2
    order = np.argsort(slack, kind="stable")
    ranked = order[:n_ranked]
    remaining = order[n_ranked:]
    rng = np.random.default_rng(seed)
    topup = rng.choice(remaining, size=budget - n_ranked, replace=False)
    chosen = np.sort(np.concatenate([ranked, topup]))
    return SampleSet(points=grid.points[chosen], tau=grid.tau)


def save_points_csv(samples: SampleSet, path) -> None:
    """One state per row, for audit."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerows(samples.points.tolist())
