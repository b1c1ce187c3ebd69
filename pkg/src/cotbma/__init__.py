"""Exact Bayesian analysis of chain-of-thought prompting on finite latent-task models."""

from .divergences import (
    Divergence, divergence, equivalence_classes, mode_gap, separation_lambda, separation_report,
)
from .estimators import BMAPredictor, RidgeBMARegressor, SoftmaxAttentionRegressor
from .exceptions import CapacityError, ImpossiblePromptError, ValidationError
from .inference import (
    answer_marginal, bma_predictive, posterior, prompting_error, sample_cot_path, step_predictive,
    truncated_predictive,
)
from .latent_model import (
    MarkovTask, Prompt, TabularTask, TaskFamily, sample_prompt, sample_trajectory, trajectory_log_prob,
    truncated_log_prob, validate_family,
)

__version__ = "0.1.0"

__all__ = [
    "BMAPredictor", "CapacityError", "Divergence", "ImpossiblePromptError", "MarkovTask", "Prompt",
    "RidgeBMARegressor", "SoftmaxAttentionRegressor", "TabularTask", "TaskFamily", "ValidationError",
    "answer_marginal", "bma_predictive", "divergence", "equivalence_classes", "mode_gap", "posterior",
    "prompting_error", "sample_cot_path", "sample_prompt", "sample_trajectory", "separation_lambda",
    "separation_report", "step_predictive", "trajectory_log_prob", "truncated_log_prob",
    "truncated_predictive", "validate_family",
]
