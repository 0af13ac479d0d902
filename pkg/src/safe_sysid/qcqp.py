"""Convex QCQP assembly and solver for constrained output-weight learning.

The objective is the Gaussian negative log-likelihood (a ridge-regularized
least squares in the output weights W); each sampled state contributes one
safety and one stability ellipsoidal constraint on W^T g.  The solver is
a primal log-barrier interior-point method with Newton centering: bounds
that are (numerically) zero pin W^T g to the offset exactly and are
eliminated through a null-space reduction, a phase-1 problem finds a
strictly feasible start when the ridge solution violates constraints, and
the barrier path is followed until the duality gap is below tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import scipy.linalg

from .constraints import (
    QuadConstraint,
    RiskSpec,
    SafetySpec,
    StabilitySpec,
    build_safety_constraint,
    build_stability_constraint,
    coverage_margins,
)
from .elm import ElmModel, feature_matrix, features_from_inputs
from .sampler import SampleSet

logger = logging.getLogger(__name__)

_EQ_BOUND_TOL = 1e-10
_NEWTON_TOL = 1e-9
_T_MULT = 30.0
_ARMIJO = 0.25
_MAX_BACKTRACKS = 60


class StructuralInfeasibilityError(ValueError):
    """Some sample points have negative constraint bounds; no W can satisfy them."""

    def __init__(self, offenders: list):
        self.offenders = offenders
        listing = "; ".join(
            f"{tag} at {np.array2string(np.asarray(state), precision=4)} "
            f"(bound {bound:.4g})"
            for tag, state, bound in offenders[:10]
        )
        extra = "" if len(offenders) <= 10 else f" (+{len(offenders) - 10} more)"
        super().__init__(f"negative constraint bounds at {len(offenders)} points: {listing}{extra}")


@dataclass(frozen=True)
class SolverConfig:
    """Interior-point settings.

    tol_gap is relative to 1 + |objective|; tol_feas bounds the reported
    constraint violation for an optimal status; max_iters caps the total
    Newton iteration count across phases.
    """

    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iters: int = 200
    step_backtrack: float = 0.5

    def __post_init__(self):
        if self.tol_feas <= 0 or self.tol_gap <= 0:
            raise ValueError("tolerances must be positive")
        if not 0.0 < self.step_backtrack < 1.0:
            raise ValueError("step_backtrack must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class QcqpProblem:
    """Training features/targets plus the per-sample-point constraints.

    sigma = 0 degenerates the likelihood scale, so the objective then falls
    back to plain (unit-variance) least squares; constraints always use the
    true sigma, which enters them through the assembly step.
    """

    features: np.ndarray
    targets: np.ndarray
    sigma: float
    mu_w: float
    constraints: tuple[QuadConstraint, ...]

    def __post_init__(self):
        features = np.atleast_2d(np.asarray(self.features, dtype=float))
        targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if features.shape[0] != targets.shape[0]:
            raise ValueError("features/targets row counts differ")
        if features.shape[0] == 0:
            raise ValueError("training data must be nonempty")
        if self.mu_w <= 0:
            raise ValueError("mu_w must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        features.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_outputs(self) -> int:
        return self.targets.shape[1]


@dataclass(frozen=True, eq=False)
class Solution:
    """Solver result; status is 'optimal', 'infeasible' or 'max-iters'."""

    weights: np.ndarray
    objective: float
    max_constraint_violation: float
    iterations: int
    status: str
    gap: float


def _data_weight(sigma: float) -> float:
    return 1.0 / (2.0 * sigma**2) if sigma > 0 else 0.5


def objective_value(problem: QcqpProblem, weights: np.ndarray) -> float:
    """Ridge-regularized data misfit at W."""
    resid = problem.targets - problem.features @ weights
    lam = _data_weight(problem.sigma)
    return lam * float(np.sum(resid**2)) + problem.mu_w * float(np.sum(weights**2))


def ridge_solution(
    features: np.ndarray, targets: np.ndarray, sigma: float, mu_w: float
) -> np.ndarray:
    """Unconstrained minimizer (G^T G + 2 mu sigma~^2 I)^{-1} G^T Y."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    lam = _data_weight(sigma)
    reg = mu_w / lam
    gram = features.T @ features + reg * np.eye(features.shape[1])
    return np.linalg.solve(gram, features.T @ targets)


def check_feasibility(
    weights: np.ndarray, problem: QcqpProblem
) -> tuple[float, list[dict]]:
    """Max constraint violation (clipped at 0) and a per-constraint report."""
    report = []
    worst = 0.0
    for idx, con in enumerate(problem.constraints):
        lhs = con.value(weights)
        violation = max(0.0, lhs - con.bound)
        worst = max(worst, violation)
        report.append(
            {
                "index": idx,
                "tag": con.tag,
                "sample_state": con.sample_state.tolist(),
                "lhs": lhs,
                "bound": con.bound,
                "violation": violation,
            }
        )
    return worst, report


def assemble(
    inputs: np.ndarray,
    targets: np.ndarray,
    model: ElmModel,
    safety: SafetySpec,
    stability: StabilitySpec,
    risk: RiskSpec,
    samples: SampleSet,
    sigma: float,
    mu_w: float,
    margin_tau: float = 0.0,
    variance_floor="assume",
) -> QcqpProblem:
    """Build the constrained learning problem.

    inputs/targets are the training pairs (s_k, x_{k+1}).  Each sample
    state yields one safety and one stability constraint; margin_tau > 0
    subtracts the grid-coverage margins computed at the Euclidean
    resolution margin_tau * sqrt(n) (the per-axis grid guarantee).
    Duplicate sample points collapse to a single constraint pair, and any
    negative bound raises with the offending points listed.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if inputs.shape[0] == 0:
        raise ValueError("training data must be nonempty")
    feats = features_from_inputs(model, inputs)

    sample_feats = feature_matrix(model, samples.points, stability.equilibrium)
    n = model.dims.n
    tau_eff = margin_tau * np.sqrt(n) if margin_tau > 0 else 0.0

    constraints: list[QuadConstraint] = []
    seen: set = set()
    offenders: list = []
    for i, x in enumerate(samples.points):
        key = x.tobytes()
        if key in seen:
            continue
        seen.add(key)
        if tau_eff > 0:
            m_s, m_l = coverage_margins(
                model, safety, stability, risk, sigma, x, tau_eff, variance_floor
            )
        else:
            m_s = m_l = 0.0
        cs = build_safety_constraint(
            safety, risk, sigma, x, sample_feats[i], m_s, variance_floor
        )
        cl = build_stability_constraint(
            stability, risk, sigma, x, sample_feats[i], m_l, variance_floor
        )
        for con in (cs, cl):
            if con.bound < 0:
                offenders.append((con.tag, x, con.bound))
            constraints.append(con)
    if offenders:
        raise StructuralInfeasibilityError(offenders)
    return QcqpProblem(
        features=feats,
        targets=targets,
        sigma=sigma,
        mu_w=mu_w,
        constraints=tuple(constraints),
    )


# ---------------------------------------------------------------------------
# interior-point internals
# ---------------------------------------------------------------------------


class _IneqSet:
    """Vectorized evaluation of ellipsoidal inequality constraints in z-space.

    Constraints share a handful of distinct shape matrices, so quadratic
    forms and Hessian contributions are grouped by shape.
    """

    def __init__(self, G: np.ndarray, Ms: Sequence[np.ndarray], C: np.ndarray, b: np.ndarray):
        self.G = G  # (m, F) constraint feature rows
        self.C = C  # (m, n) offsets in output space
        self.b = b  # (m,)
        self.m, self.F = G.shape
        self.n = C.shape[1]
        groups: dict[bytes, list[int]] = {}
        mats: dict[bytes, np.ndarray] = {}
        for i, M in enumerate(Ms):
            key = M.tobytes()
            groups.setdefault(key, []).append(i)
            mats[key] = M
        self.groups = [(mats[k], np.asarray(idx)) for k, idx in groups.items()]

    def residuals(self, Z: np.ndarray) -> np.ndarray:
        return self.G @ Z - self.C

    def values(self, Z: np.ndarray) -> np.ndarray:
        R = self.residuals(Z)
        q = np.empty(self.m)
        for M, idx in self.groups:
            Ri = R[idx]
            q[idx] = np.einsum("ti,ti->t", Ri @ M, Ri)
        return q

    def grad_rows(self, Z: np.ndarray) -> np.ndarray:
        """Rows u_i with grad q_i = 2 u_i, flattened C-order over (F, n)."""
        R = self.residuals(Z)
        MR = np.empty_like(R)
        for M, idx in self.groups:
            MR[idx] = R[idx] @ M
        return (self.G[:, :, None] * MR[:, None, :]).reshape(self.m, self.F * self.n)

    def curvature(self, d: np.ndarray) -> np.ndarray:
        """Sum_i d_i * 2 * kron(g_i g_i^T, M_i) as a dense (F n, F n) matrix."""
        dim = self.F * self.n
        H = np.zeros((dim, dim))
        for M, idx in self.groups:
            Gi = self.G[idx]
            K = Gi.T @ (d[idx][:, None] * Gi)
            H += 2.0 * np.kron(K, M)
        return H


def _solve_newton_system(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    jitter = 0.0
    scale = max(1.0, float(np.trace(H)) / H.shape[0])
    for _ in range(8):
        try:
            cf = scipy.linalg.cho_factor(H + jitter * np.eye(H.shape[0]), lower=True)
            return scipy.linalg.cho_solve(cf, -g)
        except np.linalg.LinAlgError:
            jitter = max(jitter * 100.0, 1e-14 * scale)
    return np.linalg.lstsq(H, -g, rcond=None)[0]


class _Barrier:
    """Newton path-following on t*f(w) + phi(w) for one variable block.

    The optional phase-1 coordinate appends a uniform slack variable s to
    w, relaxing every constraint to q_i <= b_i + s.
    """

    def __init__(self, ineq: _IneqSet, Q, c_lin, phase1: bool, cfg: SolverConfig, log):
        self.ineq = ineq
        self.Q = Q
        self.c_lin = c_lin
        self.phase1 = phase1
        self.cfg = cfg
        self.log = log
        self.dim = ineq.F * ineq.n + (1 if phase1 else 0)

    def _split(self, w):
        if self.phase1:
            return w[:-1].reshape(self.ineq.F, self.ineq.n), w[-1]
        return w.reshape(self.ineq.F, self.ineq.n), 0.0

    def f(self, w):
        if self.phase1:
            return w[-1]
        return 0.5 * float(w @ self.Q @ w) - float(self.c_lin @ w)

    def grad_f(self, w):
        if self.phase1:
            g = np.zeros_like(w)
            g[-1] = 1.0
            return g
        return self.Q @ w - self.c_lin

    def slacks(self, w):
        Z, s = self._split(w)
        return self.ineq.b + s - self.ineq.values(Z)

    def psi(self, t, w, slack):
        return t * self.f(w) + float(-np.sum(np.log(slack)))

    def newton_step(self, t, w, slack):
        Z, _ = self._split(w)
        U = self.ineq.grad_rows(Z)
        d = 1.0 / slack
        d2 = d * d
        nz = self.ineq.F * self.ineq.n
        grad = t * self.grad_f(w)
        H = np.zeros((self.dim, self.dim))
        if self.phase1:
            grad[:nz] += 2.0 * (U.T @ d)
            grad[-1] += -float(np.sum(d))
            H[:nz, :nz] = self.ineq.curvature(d) + 4.0 * (U.T * d2) @ U
            H[:nz, -1] = -2.0 * (U.T @ d2)
            H[-1, :nz] = H[:nz, -1]
            H[-1, -1] = float(np.sum(d2))
        else:
            grad += 2.0 * (U.T @ d)
            H[:, :] = t * self.Q + self.ineq.curvature(d) + 4.0 * (U.T * d2) @ U
        step = _solve_newton_system(H, grad)
        decrement2 = float(-grad @ step)
        return step, decrement2

    def line_search(self, t, w, step, psi0, slope):
        alpha = 1.0
        for _ in range(_MAX_BACKTRACKS):
            trial = w + alpha * step
            slack = self.slacks(trial)
            if np.all(slack > 0):
                if self.psi(t, trial, slack) <= psi0 + _ARMIJO * alpha * slope:
                    return trial, slack, alpha
            alpha *= self.cfg.step_backtrack
        return None, None, 0.0

    def run(self, w0, t0, iters_left, stop_early: Callable | None = None):
        """Follow the central path; returns (w, iters_used, t, converged)."""
        w = np.asarray(w0, dtype=float).copy()
        slack = self.slacks(w)
        if not np.all(slack > 0):
            raise ValueError("barrier start is not strictly feasible")
        t = t0
        used = 0
        while used < iters_left:
            # centering at the current t
            centered = False
            while used < iters_left:
                step, dec2 = self.newton_step(t, w, slack)
                if dec2 / 2.0 <= _NEWTON_TOL:
                    centered = True
                    break
                psi0 = self.psi(t, w, slack)
                trial, trial_slack, alpha = self.line_search(t, w, step, psi0, -dec2)
                used += 1
                if trial is None:
                    centered = True  # no further progress possible at this t
                    break
                w, slack = trial, trial_slack
                if self.log is not None:
                    gap = self.ineq.m / t
                    self.log(
                        f"iter={used} t={t:.3e} obj={self.f(w):.9e} "
                        f"gap={gap:.3e} min_slack={slack.min():.3e}"
                    )
                if stop_early is not None and stop_early(w):
                    return w, used, t, True
            gap = self.ineq.m / t
            if gap <= self.cfg.tol_gap * (1.0 + abs(self.f(w))) and centered:
                return w, used, t, True
            t *= _T_MULT
        return w, used, t, False


def _reduce_equalities(G_eq, C_eq, F, n):
    """Null-space reduction for pinned constraints W^T g = c.

    Returns (W_part, basis, consistent); basis has orthonormal columns and
    W = W_part + basis @ Z parameterizes all solutions.
    """
    keep = np.linalg.norm(G_eq, axis=1) > 0
    if not np.all(keep):
        bad = np.linalg.norm(C_eq[~keep], axis=1) > 1e-10
        if np.any(bad):
            return None, None, False
        G_eq, C_eq = G_eq[keep], C_eq[keep]
    if G_eq.shape[0] == 0:
        return np.zeros((F, n)), np.eye(F), True
    U, S, Vt = np.linalg.svd(G_eq, full_matrices=True)
    rank = int(np.sum(S > 1e-12 * S[0]))
    coeff = (U[:, :rank].T @ C_eq) / S[:rank, None]
    W_part = Vt[:rank].T @ coeff
    resid = np.abs(G_eq @ W_part - C_eq).max()
    scale = max(1.0, np.abs(C_eq).max())
    if resid > 1e-8 * scale:
        return None, None, False
    basis = Vt[rank:].T
    return W_part, basis, True


def solve(problem: QcqpProblem, config: SolverConfig | None = None, log=None) -> Solution:
    """Solve the constrained learning problem deterministically.

    Zero (or numerically zero) bounds become equality constraints and are
    eliminated exactly; if the ridge solution of the remaining problem is
    feasible it is returned as-is, otherwise a phase-1 barrier locates a
    strictly feasible start and the main barrier runs to the gap tolerance.
    """
    cfg = config or SolverConfig()
    F, n = problem.n_features, problem.n_outputs

    def finish(W, iters, status, gap):
        worst, _ = check_feasibility(W, problem)
        return Solution(
            weights=W,
            objective=objective_value(problem, W),
            max_constraint_violation=worst,
            iterations=iters,
            status=status,
            gap=gap,
        )

    bounds = np.array([c.bound for c in problem.constraints])
    if np.any(bounds < -_EQ_BOUND_TOL):
        W0 = ridge_solution(problem.features, problem.targets, problem.sigma, problem.mu_w)
        logger.warning("problem has negative constraint bounds; infeasible")
        return finish(W0, 0, "infeasible", np.inf)

    eq_cons = [c for c in problem.constraints if c.bound <= _EQ_BOUND_TOL]
    ineq_cons = [c for c in problem.constraints if c.bound > _EQ_BOUND_TOL]

    if eq_cons:
        G_eq = np.array([c.feature for c in eq_cons])
        C_eq = np.array([c.offset for c in eq_cons])
        W_part, basis, consistent = _reduce_equalities(G_eq, C_eq, F, n)
        if not consistent:
            W0 = ridge_solution(problem.features, problem.targets, problem.sigma, problem.mu_w)
            return finish(W0, 0, "infeasible", np.inf)
    else:
        W_part, basis = np.zeros((F, n)), np.eye(F)

    Fr = basis.shape[1]
    G_data = problem.features @ basis
    Y_data = problem.targets - problem.features @ W_part

    if ineq_cons:
        G_in = np.array([c.feature for c in ineq_cons]) @ basis
        M_in = [c.shape for c in ineq_cons]
        C_in = np.array(
            [c.offset - W_part.T @ c.feature for c in ineq_cons]
        )
        b_in = np.array([c.bound for c in ineq_cons])
        ineq = _IneqSet(G_in, M_in, C_in, b_in)
    else:
        ineq = None

    if Fr == 0:
        W = W_part
        worst, _ = check_feasibility(W, problem)
        status = "optimal" if worst <= cfg.tol_feas else "infeasible"
        return finish(W, 0, status, 0.0)

    Z = ridge_solution(G_data, Y_data, problem.sigma, problem.mu_w)
    if ineq is None:
        return finish(W_part + basis @ Z, 0, "optimal", 0.0)

    q0 = ineq.values(Z)
    if np.all(q0 <= b_in):
        # unconstrained optimum is feasible, hence optimal
        return finish(W_part + basis @ Z, 0, "optimal", 0.0)

    lam = _data_weight(problem.sigma)
    Q = 2.0 * lam * np.kron(G_data.T @ G_data, np.eye(n)) + 2.0 * problem.mu_w * np.eye(Fr * n)
    c_lin = 2.0 * lam * (G_data.T @ Y_data).reshape(-1)

    iters_total = 0

    # phase 1: minimize a uniform constraint relaxation s
    s0 = float(np.max(q0 - b_in))
    pad = 0.1 * max(1.0, abs(s0))
    w_p1 = np.concatenate([Z.reshape(-1), [s0 + pad]])
    pos_b = b_in[b_in > 1e-12]
    eps_int = 0.05 * min(1.0, float(pos_b.min()) if pos_b.size else 1.0)
    phase1 = _Barrier(ineq, None, None, True, cfg, log)
    t0 = max(1.0, ineq.m / (abs(s0) + 1.0))
    w_p1, used, _, _ = phase1.run(
        w_p1, t0, cfg.max_iters, stop_early=lambda w: w[-1] <= -eps_int
    )
    iters_total += used
    s_found = w_p1[-1]
    if s_found >= 0.0:
        W = W_part + basis @ w_p1[:-1].reshape(Fr, n)
        if iters_total >= cfg.max_iters:
            return finish(W, iters_total, "max-iters", np.inf)
        logger.warning("phase-1 could not find a strictly feasible point (s*=%.3g)", s_found)
        return finish(W, iters_total, "infeasible", np.inf)

    z = w_p1[:-1]
    main = _Barrier(ineq, Q, c_lin, False, cfg, log)
    f0 = abs(main.f(z)) + 1.0
    w, used, t_final, converged = main.run(z, max(1.0, ineq.m / f0), cfg.max_iters - iters_total)
    iters_total += used
    W = W_part + basis @ w.reshape(Fr, n)
    gap = ineq.m / t_final
    status = "optimal" if converged else "max-iters"
    return finish(W, iters_total, status, gap)
