"""Command-line front end: generate | train | verify | export | all.

One JSON config drives a run; --set key.path=value overrides individual
fields.  Exit codes: 0 success, 1 verification found violations, 2 I/O or
config problems, 3 infeasible training problem, 4 solver iteration limit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .constraints import RiskSpec, SafetySpec, StabilitySpec, ellipse_matrix
from .dynamics_data import (
    DEFAULT_GAINS,
    GenerationError,
    PidGains,
    TrajectoryDataset,
    TwoLinkParams,
    generate_robot_data,
    load_demonstrations,
    make_synthetic_snake,
    save_dataset,
    to_training_pairs,
)
from .elm import (
    ElmDims,
    features_from_inputs,
    initialize_model,
    load_model,
    save_model,
)
from .jsonio import dumps_canonical
from .qcqp import (
    QcqpProblem,
    SolverConfig,
    StructuralInfeasibilityError,
    assemble,
    ridge_solution,
    solve,
)
from .rollout import RolloutConfig, monte_carlo_verify, one_step_constraint_audit
from .sampler import domain_from_safety, grid_domain, save_points_csv, select_active_points

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2
EXIT_INFEASIBLE = 3
EXIT_MAXITERS = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated run configuration built from one JSON document."""

    raw: dict
    config_hash: str
    experiment: str
    seed: int
    output_dir: Path
    dataset_path: Path
    translate_to_origin: bool
    dims: ElmDims
    weight_bound_out: float
    sigma: float
    safety: SafetySpec
    stability: StabilitySpec
    risk: RiskSpec
    tau: float
    inflation: float
    budget: int
    margin_tau: float | None
    point_cap: int
    solver: SolverConfig
    rollout: RolloutConfig


def _get(cfg: dict, dotted: str, default=None, required: bool = False):
    node = cfg
    for key in dotted.split("."):
        if not isinstance(node, dict) or key not in node:
            if required:
                raise ConfigError(f"config is missing required field '{dotted}'")
            return default
        node = node[key]
    return node


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    """Read, override and validate a run config."""
    with open(path) as f:
        raw = json.load(f)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        dotted, _, text = item.partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value

    experiment = _get(raw, "experiment", required=True)
    if experiment not in ("robot", "demonstrations"):
        raise ConfigError("experiment must be 'robot' or 'demonstrations'")
    seed = int(_get(raw, "seed", required=True))
    output_dir = Path(_get(raw, "output_dir", required=True))
    dataset_path = Path(_get(raw, "dataset.path", required=True))

    equilibrium = np.asarray(_get(raw, "stability.equilibrium", required=True), dtype=float)
    n = equilibrium.size
    n_h = int(_get(raw, "model.n_h", required=True))
    dims = ElmDims(n=n, m=n, n_h=n_h)

    ell = _get(raw, "safety.ellipse", required=True)
    if n != 2:
        raise ConfigError("ellipse safety sets require a 2-dimensional state")
    safety = SafetySpec(
        A=ellipse_matrix(float(ell["iota1"]), float(ell["iota2"]), float(ell["alpha"])),
        center=np.asarray(ell["center"], dtype=float),
        gamma=float(_get(raw, "safety.gamma", required=True)),
        zeta=float(_get(raw, "safety.zeta", 0.0)),
    )
    stability = StabilitySpec(
        P=np.asarray(_get(raw, "stability.P", required=True), dtype=float),
        equilibrium=equilibrium,
        rho=float(_get(raw, "stability.rho", required=True)),
        delta=float(_get(raw, "stability.delta", 0.0)),
    )
    risk = RiskSpec(
        p_k=float(_get(raw, "risk.p_k", required=True)),
        xi=float(_get(raw, "risk.xi", 1.0)),
    )
    solver = SolverConfig(
        tol_feas=float(_get(raw, "solver.tol_feas", 1e-8)),
        tol_gap=float(_get(raw, "solver.tol_gap", 1e-8)),
        max_iters=int(_get(raw, "solver.max_iters", 200)),
        step_backtrack=float(_get(raw, "solver.step_backtrack", 0.5)),
    )
    roll = RolloutConfig(
        horizon=int(_get(raw, "rollout.horizon", 500)),
        noise=bool(_get(raw, "rollout.noise", False)),
        initial_perturbation_radius=float(
            _get(raw, "rollout.initial_perturbation_radius", 0.0)
        ),
        mc_runs=int(_get(raw, "rollout.mc_runs", 100)),
        convergence_radius=float(_get(raw, "rollout.convergence_radius", 0.05)),
        seed=seed,
    )
    margin_tau = _get(raw, "sampler.margin_tau", 0.0)
    return RunConfig(
        raw=raw,
        config_hash=hashlib.sha256(dumps_canonical(raw).encode()).hexdigest(),
        experiment=experiment,
        seed=seed,
        output_dir=output_dir,
        dataset_path=dataset_path,
        translate_to_origin=bool(_get(raw, "dataset.translate_to_origin", False)),
        dims=dims,
        weight_bound_out=float(_get(raw, "model.weight_bound_out", 10.0)),
        sigma=float(_get(raw, "noise.sigma", required=True)),
        safety=safety,
        stability=stability,
        risk=risk,
        tau=float(_get(raw, "sampler.tau", required=True)),
        inflation=float(_get(raw, "sampler.inflation", 0.2)),
        budget=int(_get(raw, "sampler.budget", required=True)),
        margin_tau=None if margin_tau is None else float(margin_tau),
        point_cap=int(_get(raw, "sampler.cap", 1_000_000)),
        solver=solver,
        rollout=roll,
    )


def _update_manifest(cfg: RunConfig, section: str, payload: dict) -> None:
    path = cfg.output_dir / "manifest.json"
    manifest = {}
    if path.exists():
        with open(path) as f:
            manifest = json.load(f)
    manifest["config_hash"] = cfg.config_hash
    manifest.setdefault("sections", {})[section] = dict(
        payload, timestamp=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
    )
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def _sample_initial_conditions(cfg: RunConfig, count: int, margin: float) -> list:
    """Seeded draws inside the safe ellipse with barrier value >= margin."""
    rng = np.random.default_rng([cfg.seed, 0])
    vals, vecs = np.linalg.eigh(cfg.safety.A)
    half = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
    scale = np.sqrt(max(0.0, 1.0 - margin))
    out = []
    for _ in range(count):
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        r = rng.uniform() ** 0.5
        out.append(cfg.safety.center + scale * r * (half @ u))
    return out


def cmd_generate(cfg: RunConfig) -> int:
    """Write the training dataset for the configured experiment."""
    if cfg.experiment == "robot":
        robot = cfg.raw.get("dataset", {}).get("robot", {})
        params = TwoLinkParams(
            L1=float(robot.get("L1", 1.0)),
            L2=float(robot.get("L2", 1.0)),
            m1=float(robot.get("m1", 1.0)),
            m2=float(robot.get("m2", 1.0)),
            gravity=float(robot.get("gravity", 9.81)),
            dt=float(robot.get("dt", 1e-3)),
        )
        gains_cfg = robot.get("gains")
        gains = (
            PidGains(
                kp=np.asarray(gains_cfg["kp"], dtype=float),
                ki=np.asarray(gains_cfg["ki"], dtype=float),
                kd=np.asarray(gains_cfg["kd"], dtype=float),
            )
            if gains_cfg
            else DEFAULT_GAINS
        )
        ics = _sample_initial_conditions(
            cfg,
            int(robot.get("n_trajectories", 5)),
            float(robot.get("ic_barrier_margin", 0.5)),
        )
        dataset = generate_robot_data(
            params,
            gains,
            ics,
            cfg.stability.equilibrium,
            steps=int(robot.get("steps", 800)),
            period=float(robot.get("period", 0.01)),
        )
    else:
        snake = cfg.raw.get("dataset", {}).get("synthetic_snake", {})
        dataset = make_synthetic_snake(
            n_demos=int(snake.get("n_demos", 7)),
            samples=int(snake.get("samples", 250)),
            seed=[cfg.seed, 4],
            endpoint=np.asarray(snake.get("endpoint", (-0.3, 0.25)), dtype=float),
            period=float(snake.get("period", 0.01)),
        )
    manifest_path = save_dataset(dataset, cfg.dataset_path)
    total = sum(len(d) for d in dataset.demonstrations)
    print(
        f"generate: wrote {len(dataset.demonstrations)} demonstrations "
        f"({total} samples) to {cfg.dataset_path}"
    )
    _update_manifest(
        cfg,
        "generate",
        {
            "dataset_manifest": str(manifest_path),
            "demonstrations": len(dataset.demonstrations),
            "samples": total,
        },
    )
    return EXIT_OK


def _load_dataset(cfg: RunConfig) -> TrajectoryDataset:
    return load_demonstrations(cfg.dataset_path, cfg.translate_to_origin)


def _build_samples(cfg: RunConfig, model, ridge_weights):
    box = domain_from_safety(cfg.safety, cfg.inflation)
    grid = grid_domain(box, cfg.tau, cfg.point_cap)
    if cfg.budget >= grid.count:
        return grid
    return select_active_points(
        grid,
        model.with_output_weights(ridge_weights),
        cfg.safety,
        cfg.stability,
        cfg.risk,
        cfg.sigma,
        cfg.budget,
        seed=[cfg.seed, 2],
    )


def cmd_train(cfg: RunConfig, skip_constraints: bool = False) -> int:
    """BIP init, sample selection, constraint assembly, solve, save model."""
    t_start = time.perf_counter()
    dataset = _load_dataset(cfg)
    inputs, targets = to_training_pairs(dataset)
    model = initialize_model(cfg.dims, inputs, [cfg.seed, 1], cfg.weight_bound_out)
    mu_w = float(_get(cfg.raw, "solver.mu_w", 0.01))
    feats = features_from_inputs(model, inputs)
    ridge = ridge_solution(feats, targets, cfg.sigma, mu_w)

    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    samples = _build_samples(cfg, model, ridge)
    save_points_csv(samples, cfg.output_dir / "sample_points.csv")
    margin_tau = cfg.tau if cfg.margin_tau is None else cfg.margin_tau

    log_lines: list[str] = []
    try:
        if skip_constraints:
            problem = QcqpProblem(
                features=feats,
                targets=targets,
                sigma=cfg.sigma,
                mu_w=mu_w,
                constraints=(),
            )
        else:
            problem = assemble(
                inputs,
                targets,
                model,
                cfg.safety,
                cfg.stability,
                cfg.risk,
                samples,
                cfg.sigma,
                mu_w,
                margin_tau=margin_tau,
            )
        solution = solve(problem, cfg.solver, log=log_lines.append)
    except StructuralInfeasibilityError as exc:
        print(f"train: structural infeasibility: {exc}")
        return EXIT_INFEASIBLE

    (cfg.output_dir / "solver.log").write_text("\n".join(log_lines) + "\n")
    trained = model.with_output_weights(solution.weights)
    model_path = cfg.output_dir / "model.json"
    save_model(model_path, trained, cfg.sigma)

    # realized constraint-variance diagnostic: the linear tail bound needs
    # scale^2 * variance >= 1 at the solution
    preds = features_from_inputs(model, inputs) @ solution.weights
    d_s = preds - cfg.safety.center[None, :]
    var_s = 4 * cfg.sigma**2 * np.sum((d_s @ cfg.safety.A) ** 2, axis=1) + 2 * cfg.sigma**4 * np.trace(
        cfg.safety.A @ cfg.safety.A
    )
    min_var = float(var_s.min()) if var_s.size else float("nan")
    if cfg.sigma > 0 and min_var < 1.0:
        logger.info(
            "constraint variance down to %.3g (< 1); variance-floor scale of "
            "%.3g would be needed for the nominal risk level",
            min_var,
            1.0 / np.sqrt(max(min_var, 1e-300)),
        )

    wall = time.perf_counter() - t_start
    print(
        f"train: status={solution.status} objective={solution.objective:.6g} "
        f"iterations={solution.iterations} max_violation={solution.max_constraint_violation:.3g} "
        f"wall={wall:.2f}s"
    )
    _update_manifest(
        cfg,
        "train",
        {
            "model": str(model_path),
            "solver_log": str(cfg.output_dir / "solver.log"),
            "sample_points": str(cfg.output_dir / "sample_points.csv"),
            "status": solution.status,
            "objective": solution.objective,
            "iterations": solution.iterations,
            "wall_time_s": wall,
        },
    )
    if solution.status == "infeasible":
        return EXIT_INFEASIBLE
    if solution.status == "max-iters":
        return EXIT_MAXITERS
    return EXIT_OK


def cmd_verify(cfg: RunConfig, model_path=None) -> int:
    """Monte Carlo rollouts plus the one-step audit; exit 0 iff no violations."""
    model_path = Path(model_path) if model_path else cfg.output_dir / "model.json"
    model, sigma = load_model(model_path)
    dataset = _load_dataset(cfg)
    nominal = _get(cfg.raw, "rollout.nominal_initial")
    x0 = (
        np.asarray(nominal, dtype=float)
        if nominal is not None
        else dataset.demonstrations[0][0]
    )
    report, trajectories = monte_carlo_verify(
        model,
        cfg.safety,
        cfg.stability,
        x0,
        cfg.rollout,
        sigma=sigma,
        keep_trajectories=True,
    )
    verify_dir = cfg.output_dir / "verify"
    runs_dir = verify_dir / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    for i, traj in enumerate(trajectories):
        np.savetxt(runs_dir / f"{i:03d}.csv", traj, delimiter=",", fmt="%.17g")

    # audit the same sample points that trained the model
    inputs, targets = to_training_pairs(dataset)
    audit_model = initialize_model(cfg.dims, inputs, [cfg.seed, 1], cfg.weight_bound_out)
    mu_w = float(_get(cfg.raw, "solver.mu_w", 0.01))
    feats = features_from_inputs(audit_model, inputs)
    ridge = ridge_solution(feats, targets, cfg.sigma, mu_w)
    samples = _build_samples(cfg, audit_model, ridge)
    audit = one_step_constraint_audit(
        model, cfg.safety, cfg.stability, samples.points, sigma=sigma, risk=cfg.risk
    )
    audit_flags = sum(r["barrier_flag"] or r["lyapunov_flag"] for r in audit)

    summary = dict(report.summary())
    summary["audit_points"] = len(audit)
    summary["audit_flags"] = int(audit_flags)
    with open(verify_dir / "summary.json", "w") as f:
        f.write(dumps_canonical(summary))
        f.write("\n")
    with open(verify_dir / "audit.json", "w") as f:
        f.write(dumps_canonical(audit))
        f.write("\n")

    print(
        f"verify: runs={report.runs} violations={report.violation_count} "
        f"max_final_distance={report.max_final_distance:.4g} audit_flags={audit_flags}"
    )
    _update_manifest(
        cfg,
        "verify",
        {
            "summary": str(verify_dir / "summary.json"),
            "audit": str(verify_dir / "audit.json"),
            "runs_dir": str(runs_dir),
            "violations": report.violation_count,
        },
    )
    return EXIT_OK if report.violation_count == 0 else EXIT_VIOLATIONS


def cmd_export(cfg: RunConfig, model_path=None) -> int:
    """Plot-ready CSVs: safe-set boundary, demos, reproduced trajectories."""
    model_path = Path(model_path) if model_path else cfg.output_dir / "model.json"
    model, _sigma = load_model(model_path)
    dataset = _load_dataset(cfg)
    export_dir = cfg.output_dir / "export"
    export_dir.mkdir(parents=True, exist_ok=True)

    vals, vecs = np.linalg.eigh(cfg.safety.A)
    half = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T
    angles = np.linspace(0.0, 2.0 * np.pi, 512, endpoint=False)
    boundary = cfg.safety.center[None, :] + (half @ np.stack(
        [np.cos(angles), np.sin(angles)]
    )).T
    np.savetxt(export_dir / "ellipse_boundary.csv", boundary, delimiter=",", fmt="%.17g")

    demo_rows = []
    for i, traj in enumerate(dataset.demonstrations):
        ids = np.full((len(traj), 1), float(i))
        demo_rows.append(np.hstack([ids, traj]))
    np.savetxt(
        export_dir / "demonstrations.csv", np.vstack(demo_rows), delimiter=",", fmt="%.17g"
    )

    from .rollout import rollout as _rollout

    repro_rows = []
    series_rows = []
    for i, traj in enumerate(dataset.demonstrations):
        repro, _ = _rollout(
            model, traj[0], cfg.stability.equilibrium, cfg.rollout.horizon
        )
        ids = np.full((len(repro), 1), float(i))
        repro_rows.append(np.hstack([ids, repro]))
        t = (np.arange(len(repro)) * dataset.period)[:, None]
        series_rows.append(np.hstack([ids, t, repro]))
    np.savetxt(
        export_dir / "reproduced_trajectories.csv",
        np.vstack(repro_rows),
        delimiter=",",
        fmt="%.17g",
    )
    np.savetxt(
        export_dir / "state_time_series.csv",
        np.vstack(series_rows),
        delimiter=",",
        fmt="%.17g",
    )
    print(f"export: wrote plot CSVs to {export_dir}")
    _update_manifest(
        cfg,
        "export",
        {
            "ellipse_boundary": str(export_dir / "ellipse_boundary.csv"),
            "demonstrations": str(export_dir / "demonstrations.csv"),
            "reproduced_trajectories": str(export_dir / "reproduced_trajectories.csv"),
            "state_time_series": str(export_dir / "state_time_series.csv"),
        },
    )
    return EXIT_OK


def cmd_all(cfg: RunConfig) -> int:
    code = cmd_generate(cfg)
    if code != EXIT_OK:
        return code
    code = cmd_train(cfg)
    if code != EXIT_OK:
        return code
    code = cmd_verify(cfg)
    export_code = cmd_export(cfg)
    return code if code != EXIT_OK else export_code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="safe-sysid",
        description="Learn provably safe discrete-time dynamics models from data.",
    )
    parser.add_argument("command", choices=["generate", "train", "verify", "export", "all"])
    parser.add_argument("--config", required=True, help="path to the run config JSON")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="KEY.PATH=VALUE",
        help="override one config field (JSON-parsed value)",
    )
    parser.add_argument("--model", default=None, help="model JSON (verify/export)")
    parser.add_argument(
        "--no-constraints",
        action="store_true",
        help="train without constraints (ridge debug mode)",
    )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config, args.set)
    except (OSError, json.JSONDecodeError, ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "generate":
            return cmd_generate(cfg)
        if args.command == "train":
            return cmd_train(cfg, skip_constraints=args.no_constraints)
        if args.command == "verify":
            return cmd_verify(cfg, args.model)
        if args.command == "export":
            return cmd_export(cfg, args.model)
        return cmd_all(cfg)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except GenerationError as exc:
        print(f"generation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
