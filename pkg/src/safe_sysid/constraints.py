"""Barrier/Lyapunov chance constraints in closed form.

Under Gaussian reconstruction noise, the one-step barrier-decrease and
Lyapunov-decrease conditions become Gaussian random variables whose mean
and variance are available in closed form.  Bounding the tail with the
standard-normal quantile turns each probabilistic condition into one
convex quadratic constraint on the model's output weights; a grid-
resolution margin makes finitely many sampled constraints cover the
whole domain.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import erfinv

from .elm import ElmModel, lipschitz_feature_bound

logger = logging.getLogger(__name__)

_XI_CAP = 1e6

VarianceFloorMode = Literal["assume", "auto"]


class UnsupportedRiskError(ValueError):
    """Risk level below 0.5 would flip the constraint-tightening direction."""


def _check_spd(M: np.ndarray, name: str, sym_tol: float = 1e-12) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} contains non-finite entries")
    scale = max(1.0, float(np.abs(M).max()))
    if np.abs(M - M.T).max() > sym_tol * scale:
        raise ValueError(f"{name} must be symmetric")
    M = 0.5 * (M + M.T)
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    M.setflags(write=False)
    return M


@dataclass(frozen=True, eq=False)
class SafetySpec:
    """Ellipsoidal safe set h(x) = 1 - (x-center)^T A (x-center) >= 0.

    gamma in (0, 1] is the per-step barrier decrease rate, zeta >= 0 the
    slack the barrier condition must clear.
    """

    A: np.ndarray
    center: np.ndarray
    gamma: float
    zeta: float = 0.0

    def __post_init__(self):
        A = _check_spd(self.A, "A")
        object.__setattr__(self, "A", A)
        center = np.asarray(self.center, dtype=float).ravel()
        if center.size != A.shape[0]:
            raise ValueError("center dimension does not match A")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")


@dataclass(frozen=True, eq=False)
class StabilitySpec:
    """Quadratic Lyapunov function V(x) = (x-x*)^T P (x-x*) with rate rho."""

    P: np.ndarray
    equilibrium: np.ndarray
    rho: float
    delta: float = 0.0

    def __post_init__(self):
        P = _check_spd(self.P, "P")
        object.__setattr__(self, "P", P)
        eq = np.asarray(self.equilibrium, dtype=float).ravel()
        if eq.size != P.shape[0]:
            raise ValueError("equilibrium dimension does not match P")
        eq.setflags(write=False)
        object.__setattr__(self, "equilibrium", eq)
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")


@dataclass(frozen=True)
class RiskSpec:
    """Risk tolerance p_k in (0, 1) and variance-floor scale xi >= 1."""

    p_k: float
    xi: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_k < 1.0:
            raise ValueError("p_k must lie in (0, 1)")
        if self.xi < 1.0:
            raise ValueError("xi must be >= 1")


@dataclass(frozen=True)
class MomentPair:
    """Mean and variance of a constraint random variable."""

    mean: float
    variance: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValueError("variance must be >= 0")


@dataclass(frozen=True, eq=False)
class QuadConstraint:
    """One convex quadratic constraint on the output weights W.

    Requires ||shape^{1/2}(W^T feature - offset)||^2 <= bound; built at
    sample_state with the grid margin already subtracted from the bound.
    A negative bound marks the sample point as structurally infeasible.
    """

    shape: np.ndarray
    offset: np.ndarray
    bound: float
    feature: np.ndarray
    tag: str
    sample_state: np.ndarray

    def __post_init__(self):
        shape = _check_spd(self.shape, "shape")
        object.__setattr__(self, "shape", shape)
        for name in ("offset", "feature", "sample_state"):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.offset.size != shape.shape[0]:
            raise ValueError("offset dimension does not match shape matrix")
        if self.tag not in ("safety", "stability"):
            raise ValueError("tag must be 'safety' or 'stability'")

    def value(self, output_weights: np.ndarray) -> float:
        """Left-hand side ||shape^{1/2}(W^T g - offset)||^2 at W."""
        r = output_weights.T @ self.feature - self.offset
        return float(r @ self.shape @ r)


def barrier_value(spec: SafetySpec, x: np.ndarray) -> float:
    """h(x); nonnegative exactly on the safe set."""
    d = np.asarray(x, dtype=float).ravel() - spec.center
    return 1.0 - float(d @ spec.A @ d)


def lyapunov_value(spec: StabilitySpec, x: np.ndarray) -> float:
    """V(x); zero only at the equilibrium."""
    d = np.asarray(x, dtype=float).ravel() - spec.equilibrium
    return float(d @ spec.P @ d)


def ellipse_matrix(iota1: float, iota2: float, alpha: float) -> np.ndarray:
    """2x2 ellipse matrix with semi-axes iota1, iota2 rotated by alpha.

    Eigenvalues are 1/iota1^2 and 1/iota2^2.
    """
    if iota1 <= 0 or iota2 <= 0:
        raise ValueError("ellipse semi-axes must be positive")
    c, s = np.cos(alpha), np.sin(alpha)
    k1, k2 = 1.0 / iota1**2, 1.0 / iota2**2
    return np.array(
        [
            [c * c * k1 + s * s * k2, c * s * (k1 - k2)],
            [c * s * (k1 - k2), s * s * k1 + c * c * k2],
        ]
    )


def safety_moments(
    spec: SafetySpec, predicted_mean: np.ndarray, sigma: float, x_now: np.ndarray
) -> MomentPair:
    """Mean/variance of the barrier condition h(x+) - (1-gamma) h(x).

    With x+ = predicted_mean + noise, noise ~ N(0, sigma^2 I):
      mean = 1 - d^T A d - sigma^2 tr(A) - (1-gamma) h(x_now)
      var  = 4 sigma^2 ||A d||^2 + 2 sigma^4 tr(A^2),   d = mean_next - center.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    d = np.asarray(predicted_mean, dtype=float).ravel() - spec.center
    A = spec.A
    mean = (
        1.0
        - float(d @ A @ d)
        - sigma**2 * float(np.trace(A))
        - (1.0 - spec.gamma) * barrier_value(spec, x_now)
    )
    var = 4.0 * sigma**2 * float(np.sum((A @ d) ** 2)) + 2.0 * sigma**4 * float(
        np.trace(A @ A)
    )
    return MomentPair(mean=mean, variance=var)


def stability_moments(
    spec: StabilitySpec, predicted_mean: np.ndarray, sigma: float, x_now: np.ndarray
) -> MomentPair:
    """Mean/variance of the Lyapunov condition V(x+) - (1-rho) V(x)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    d = np.asarray(predicted_mean, dtype=float).ravel() - spec.equilibrium
    P = spec.P
    mean = (
        float(d @ P @ d)
        + sigma**2 * float(np.trace(P))
        - (1.0 - spec.rho) * lyapunov_value(spec, x_now)
    )
    var = 4.0 * sigma**2 * float(np.sum((P @ d) ** 2)) + 2.0 * sigma**4 * float(
        np.trace(P @ P)
    )
    return MomentPair(mean=mean, variance=var)


def risk_coefficient(p: float) -> float:
    """Standard-normal quantile sqrt(2) * erfinv(2p - 1); zero at p = 0.5."""
    if not 0.0 < p < 1.0:
        raise ValueError("risk level must lie in (0, 1)")
    return float(np.sqrt(2.0) * erfinv(2.0 * p - 1.0))


def apply_variance_floor(moments: MomentPair, risk: RiskSpec) -> float:
    """Effective risk coefficient for the linear-in-variance tail bound.

    The linear bound needs xi^2 * variance >= 1, so for variance below 1
    the coefficient c(p) is scaled by xi = max(risk.xi, 1/sqrt(variance)).
    A zero variance caps xi at 1e6 and logs a diagnostic.
    """
    c = risk_coefficient(risk.p_k)
    if moments.variance >= 1.0:
        return c
    if moments.variance > 0.0:
        xi = max(risk.xi, 1.0 / np.sqrt(moments.variance))
    else:
        xi = np.inf
    if xi > _XI_CAP:
        if risk.p_k != 0.5:
            logger.warning(
                "variance %.3g needs floor scale %.3g; capping at %.0e",
                moments.variance,
                xi,
                _XI_CAP,
            )
        xi = _XI_CAP
    return float(xi * c)


def _floor_variance(M: np.ndarray, sigma: float, mode: VarianceFloorMode) -> float:
    """Variance fed to the floor rule when none is measured.

    "assume" takes the variance lower bound of 1 at face value (the
    coefficient stays c(p)); "auto" uses the smallest variance any output
    weights can realize, 2 sigma^4 tr(M^2), which is weight-free and makes
    the floor valid for every candidate model.
    """
    if mode == "assume":
        return 1.0
    if mode == "auto":
        return 2.0 * sigma**4 * float(np.trace(M @ M))
    raise ValueError(f"unknown variance floor mode {mode!r}")


def effective_risk_coefficient(
    M: np.ndarray,
    sigma: float,
    risk: RiskSpec,
    variance_floor: VarianceFloorMode | float = "assume",
) -> float:
    """Risk coefficient after variance-floor scaling for one constraint family."""
    if isinstance(variance_floor, str):
        var = _floor_variance(M, sigma, variance_floor)
    else:
        var = float(variance_floor)
    return apply_variance_floor(MomentPair(0.0, var), risk)


def _tightened(M: np.ndarray, sigma: float, coeff: float) -> np.ndarray:
    return M + 4.0 * sigma**2 * coeff * (M @ M)


def safety_bound(
    spec: SafetySpec, sigma: float, coeff: float, x_now: np.ndarray
) -> float:
    """Right-hand side of the safety constraint at x_now."""
    A = spec.A
    return (
        1.0
        - spec.zeta
        - sigma**2 * float(np.trace(A))
        - (1.0 - spec.gamma) * barrier_value(spec, x_now)
        - 2.0 * sigma**4 * coeff * float(np.trace(A @ A))
    )


def stability_bound(
    spec: StabilitySpec, sigma: float, coeff: float, x_now: np.ndarray
) -> float:
    """Right-hand side of the stability constraint at x_now."""
    P = spec.P
    return (
        spec.delta
        - sigma**2 * float(np.trace(P))
        + (1.0 - spec.rho) * lyapunov_value(spec, x_now)
        - 2.0 * sigma**4 * coeff * float(np.trace(P @ P))
    )


def _check_build_args(risk: RiskSpec, margin: float) -> None:
    if risk.p_k < 0.5:
        raise UnsupportedRiskError(
            "risk levels below 0.5 make the tightened constraint matrices "
            "indefinite; choose p_k >= 0.5"
        )
    if margin < 0:
        raise ValueError("margin must be >= 0")


def build_safety_constraint(
    spec: SafetySpec,
    risk: RiskSpec,
    sigma: float,
    sample_state: np.ndarray,
    feature: np.ndarray,
    margin: float = 0.0,
    variance_floor: VarianceFloorMode | float = "assume",
) -> QuadConstraint:
    """Quadratic safety constraint at one sample state.

    Shape is A + 4 sigma^2 c A^2 and the bound is the safety right-hand
    side minus the grid margin; a negative bound is returned as-is so the
    caller can report the offending point.
    """
    _check_build_args(risk, margin)
    coeff = effective_risk_coefficient(spec.A, sigma, risk, variance_floor)
    return QuadConstraint(
        shape=_tightened(spec.A, sigma, coeff),
        offset=spec.center,
        bound=safety_bound(spec, sigma, coeff, sample_state) - margin,
        feature=feature,
        tag="safety",
        sample_state=sample_state,
    )


def build_stability_constraint(
    spec: StabilitySpec,
    risk: RiskSpec,
    sigma: float,
    sample_state: np.ndarray,
    feature: np.ndarray,
    margin: float = 0.0,
    variance_floor: VarianceFloorMode | float = "assume",
) -> QuadConstraint:
    """Quadratic stability constraint at one sample state (mirrors safety)."""
    _check_build_args(risk, margin)
    coeff = effective_risk_coefficient(spec.P, sigma, risk, variance_floor)
    return QuadConstraint(
        shape=_tightened(spec.P, sigma, coeff),
        offset=spec.equilibrium,
        bound=stability_bound(spec, sigma, coeff, sample_state) - margin,
        feature=feature,
        tag="stability",
        sample_state=sample_state,
    )


def coverage_margins(
    model: ElmModel,
    safety: SafetySpec,
    stability: StabilitySpec,
    risk: RiskSpec,
    sigma: float,
    x_sample: np.ndarray,
    tau: float,
    variance_floor: VarianceFloorMode | float = "assume",
) -> tuple[float, float]:
    """Constraint tightening that covers all states within tau/2 of x_sample.

    Both constraint functions are Lipschitz in the state; tau times their
    Lipschitz bounds is subtracted from the sampled bounds so that
    satisfying the tightened constraints on a tau-grid implies the
    original constraints everywhere.  The weight-dependent factor
    lambda_max{W M W^T} is replaced by its weight-free upper bound
    W_bar^2 lambda_max{M}, keeping the margins constant during training.
    """
    if tau < 0:
        raise ValueError("tau must be >= 0")
    x = np.asarray(x_sample, dtype=float).ravel()
    g_bar = lipschitz_feature_bound(model)
    root_feat = np.sqrt(model.dims.n_h + 1)
    w_bar = model.weight_bound_out
    x_norm = float(np.linalg.norm(x))

    coeff_s = effective_risk_coefficient(safety.A, sigma, risk, variance_floor)
    shape_s = _tightened(safety.A, sigma, coeff_s)
    lam_shape_s = float(np.linalg.eigvalsh(shape_s).max())
    lam_a = float(np.linalg.eigvalsh(safety.A).max())
    center_norm = float(np.linalg.norm(safety.center))
    chi_s = (w_bar**2 * lam_shape_s * root_feat + w_bar * lam_shape_s * center_norm) * g_bar
    ups_s = (1.0 - safety.gamma) * lam_a * (x_norm + center_norm)

    coeff_l = effective_risk_coefficient(stability.P, sigma, risk, variance_floor)
    shape_l = _tightened(stability.P, sigma, coeff_l)
    lam_shape_l = float(np.linalg.eigvalsh(shape_l).max())
    lam_p = float(np.linalg.eigvalsh(stability.P).max())
    eq_norm = float(np.linalg.norm(stability.equilibrium))
    chi_l = (w_bar**2 * lam_shape_l * root_feat + w_bar * lam_shape_l * eq_norm) * g_bar
    ups_l = (1.0 - stability.rho) * lam_p * (x_norm + eq_norm)

    return tau * (chi_s + ups_s), tau * (chi_l + ups_l)
