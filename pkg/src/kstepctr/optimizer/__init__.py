from .diagnostics import (
    AssumptionProfile,
    check_gradient,
    convergence_metric,
    estimate_assumptions,
    fit_a3_exponent,
    scaled_grad_norm,
)
from .kstep import (
    AdamHyper,
    NonFiniteError,
    Trajectory,
    WorkerState,
    accumulate_moments,
    adagrad_sparse_update,
    global_merge,
    kstep_step,
    local_adam_step,
    ordered_mean,
    read_trajectory_jsonl,
    run_kstep_adam,
)
from .oracles import FunctionOracle, GradientOracle, NonconvexOracle, QuadraticOracle

__all__ = [
    "AdamHyper", "AssumptionProfile", "FunctionOracle", "GradientOracle", "NonFiniteError",
    "NonconvexOracle", "QuadraticOracle", "Trajectory", "WorkerState", "accumulate_moments",
    "adagrad_sparse_update", "check_gradient", "convergence_metric", "estimate_assumptions",
    "fit_a3_exponent", "global_merge", "kstep_step", "local_adam_step", "ordered_mean",
    "read_trajectory_jsonl", "run_kstep_adam", "scaled_grad_norm",
]
