"""Safe system identification for discrete-time nonlinear dynamics.

Learns a single-hidden-layer network model of unknown dynamics from
trajectory data by solving a convex quadratically constrained program.
The constraints keep model trajectories inside an ellipsoidal safe set
and force a quadratic Lyapunov function to decrease, each with a
user-chosen probability under Gaussian reconstruction noise.
"""

from .elm import (
    ElmDims,
    ElmModel,
    NoiseSpec,
    InitializationError,
    bip_initialize,
    build_input,
    build_inputs,
    feature_map,
    feature_matrix,
    features_from_inputs,
    initialize_model,
    lipschitz_feature_bound,
    load_model,
    predict_mean,
    predict_stochastic,
    save_model,
)
from .constraints import (
    MomentPair,
    QuadConstraint,
    RiskSpec,
    SafetySpec,
    StabilitySpec,
    UnsupportedRiskError,
    apply_variance_floor,
    barrier_value,
    build_safety_constraint,
    build_stability_constraint,
    coverage_margins,
    ellipse_matrix,
    lyapunov_value,
    risk_coefficient,
    safety_moments,
    stability_moments,
)
from .sampler import (
    DomainBox,
    SampleSet,
    TooManyPointsError,
    domain_from_safety,
    grid_domain,
    select_active_points,
)
from .qcqp import (
    QcqpProblem,
    Solution,
    SolverConfig,
    StructuralInfeasibilityError,
    assemble,
    check_feasibility,
    objective_value,
    ridge_solution,
    solve,
)
from .dynamics_data import (
    GenerationError,
    PidGains,
    TrajectoryDataset,
    TwoLinkParams,
    el_dynamics,
    generate_robot_data,
    load_demonstrations,
    make_synthetic_snake,
    save_dataset,
    to_training_pairs,
)
from .rollout import (
    RolloutConfig,
    RolloutReport,
    monte_carlo_verify,
    one_step_constraint_audit,
    rollout,
)

__version__ = "0.1.0"
