"""Transport of an observational surrogate regression into a phase 3 trial.

Estimates vaccine efficacy on a rare outcome from a surrogate measured in both
studies, with constant bias functions for sensitivity analysis.
"""

from .data import (
    HarmonizedDataset,
    ParticipantRecord,
    SamplingDesign,
    compute_design_weights,
    derive_outcome,
    read_csv,
    sampling_probabilities,
    validate_dataset,
    write_csv,
)
from .estimators import (
    BiasSpecification,
    EffectEstimate,
    NuisanceEstimates,
    fit_nuisances,
    one_step_estimate,
    plug_in_estimate,
)
from .exceptions import (
    DataValidationError,
    DomainError,
    EstimationError,
    PositivityError,
    SeparationError,
    SingularDesignError,
)
from .glm import WeightedLinearRegression, WeightedLogisticRegression
from .inference import sandwich_variance, stratified_bootstrap, wald_interval_ve
from .pipeline import AnalysisResult, TransportEffectEstimator, analyze
from .sensitivity import colonization_bound, evaluate_success, pte_to_bias, sweep_grid
from .simulation import PRESETS, ScenarioSpec, generate_trial, run_replicates, true_parameters

__version__ = "0.1.0"

__all__ = [
    "AnalysisResult",
    "BiasSpecification",
    "DataValidationError",
    "DomainError",
    "EffectEstimate",
    "EstimationError",
    "HarmonizedDataset",
    "NuisanceEstimates",
    "PRESETS",
    "ParticipantRecord",
    "PositivityError",
    "SamplingDesign",
    "ScenarioSpec",
    "SeparationError",
    "SingularDesignError",
    "TransportEffectEstimator",
    "WeightedLinearRegression",
    "WeightedLogisticRegression",
    "analyze",
    "colonization_bound",
    "compute_design_weights",
    "derive_outcome",
    "evaluate_success",
    "fit_nuisances",
    "generate_trial",
    "one_step_estimate",
    "plug_in_estimate",
    "pte_to_bias",
    "read_csv",
    "run_replicates",
    "sampling_probabilities",
    "sandwich_variance",
    "stratified_bootstrap",
    "sweep_grid",
    "true_parameters",
    "validate_dataset",
    "wald_interval_ve",
    "write_csv",
]
