"""Decentralized federated averaging (DeFed) and FedAvg simulation on linear models."""

from .analysis import (
    BoundEstimates,
    RateFit,
    bound_constants,
    check_bound,
    estimate_sigma_chi,
    evaluate,
    fit_rate,
    optimum_numeric,
    optimum_ridge,
)
from .data import generate_classification, generate_regression, load_csv_dataset, partition_uniform
from .engine import (
    Federation,
    RunConfig,
    RunTrace,
    Schedule,
    defed_round,
    eta_at,
    fedavg_round,
    run,
    run_seeds,
    theorem_schedule,
    validate_schedule,
)
from .objective import Dataset, ObjectiveSpec, constants, full_gradient, loss, stochastic_gradient
from .topology import MixingMatrix, build_complete_graph, build_regular_graph, load_matrix, spectral_norm, validate

__version__ = "0.1.0"
