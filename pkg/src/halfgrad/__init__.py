"""Monte Carlo gradients of killed-diffusion semigroups on the half-space.

The package simulates diffusions killed at the hyperplane {x^1 = L},
estimates the spatial gradient of E[f(X_T) 1{alive}] by four routes (a
discrete push-forward weight, two reflected-path derivative flows and a
derivative-free stochastic-integral weight) and cross-validates them
against closed-form and brute-force oracles.
"""

from .errors import (
    ConfigError,
    ContractError,
    DataError,
    HalfgradError,
    ModelError,
    NumericError,
)
from .model import HypothesisReport, ModelSpec, covariance, hat_a, pi_matrix, validate_hypothesis1
from .mc_engine import GradEstimate, RunPlan, StatAccumulator, derive_substream, run_paths
from .killed_euler import (
    EulerPath,
    WeightLedger,
    bridge_survival,
    build_weight_ledger,
    euler_step,
    girsanov_log_increment,
    killed_value_mc,
    simulate_euler_path,
    step_weights,
)
from .reflected import (
    ReflectedPath,
    hit_times,
    local_time_increment,
    reflected_step,
    simulate_reflected_path,
    vector_local_time_increment,
)
from .pushforward_grad import (
    StepFlowInputs,
    ei_matrix,
    grad_killed_pushforward,
    rho_weight,
    step_flow_inputs,
)
from .derivative_flow import (
    FlowMatrix,
    flow_update,
    gamma_mean_diagnostic,
    grad_bel,
    grad_reflected_intermediate,
    grad_reflected_psi,
    identity_flow,
)
from .oracles import (
    QuadratureConfig,
    crossing_bias_bound,
    crossing_prob_bruteforce,
    finite_difference_gradient,
    images_gradient,
    images_value,
    linear_shear_weight_gradient,
    reflected_identity_check,
)
from .registry import MODEL_NAMES, make_model, make_payoff

__all__ = [
    "ConfigError", "ContractError", "DataError", "HalfgradError", "ModelError",
    "NumericError", "HypothesisReport", "ModelSpec", "covariance", "hat_a",
    "pi_matrix", "validate_hypothesis1", "GradEstimate", "RunPlan",
    "StatAccumulator", "derive_substream", "run_paths", "EulerPath",
    "WeightLedger", "bridge_survival", "build_weight_ledger", "euler_step",
    "girsanov_log_increment", "killed_value_mc", "simulate_euler_path",
    "step_weights", "ReflectedPath", "hit_times", "local_time_increment",
    "reflected_step", "simulate_reflected_path", "vector_local_time_increment",
    "StepFlowInputs", "ei_matrix", "grad_killed_pushforward", "rho_weight",
    "step_flow_inputs", "FlowMatrix", "flow_update", "gamma_mean_diagnostic",
    "grad_bel", "grad_reflected_intermediate", "grad_reflected_psi",
    "identity_flow", "QuadratureConfig", "crossing_bias_bound",
    "crossing_prob_bruteforce", "finite_difference_gradient", "images_gradient",
    "images_value", "linear_shear_weight_gradient", "reflected_identity_check",
    "MODEL_NAMES", "make_model", "make_payoff",
]
