"""Multilayer degree-corrected mixed-membership network estimation.

Pipeline: generate (or load) a multilayer network -> per-layer spectral
embedding with cross-layer aggregation -> per-vertex spectral-assisted
likelihood -> structured Gaussian variational posteriors -> membership point
estimates and credible regions, plus a Monte-Carlo coverage harness.
"""

from .config import RunConfig, load_config, parse_config_text
from .credible import (
    CredibleSummary,
    align_to_truth,
    alignment_error,
    credible_region,
    mixed_mask,
    point_estimates,
    truth_in_estimate_labels,
)
from .families import (
    BERNOULLI,
    NEGBINOMIAL,
    POISSON,
    DomainError,
    EdgeFamily,
    default_interval,
)
from .generate import (
    GenerationError,
    ModelParams,
    MultilayerNetwork,
    experiment_params,
    mean_matrix,
    sample_network,
)
from .likelihood import (
    FisherBlocks,
    VertexProblem,
    build_vertex_problem,
    empirical_fisher,
    nb_profile_dispersion,
    spectral_loglik,
    structured_factor,
    transformed_loglik_and_grad,
)
from .simulate import CoverageReport, ReplicateResult, coverage_experiment, run_replicate
from .spectral import (
    AlignmentError,
    DegenerateHullError,
    LayerSpectral,
    SpectralConfig,
    SpectralError,
    SpectralEstimate,
    assist_vectors,
    estimate,
    label_align,
    layer_mixed_score,
    preliminary_means,
)
from .vi import (
    FitDivergenceError,
    FitResults,
    VariationalPosterior,
    VIConfig,
    fit_all,
    fit_vertex,
    initial_posterior,
    noisy_objective_and_grads,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "BERNOULLI",
    "CoverageReport",
    "CredibleSummary",
    "DegenerateHullError",
    "DomainError",
    "EdgeFamily",
    "FisherBlocks",
    "FitDivergenceError",
    "FitResults",
    "GenerationError",
    "LayerSpectral",
    "ModelParams",
    "MultilayerNetwork",
    "NEGBINOMIAL",
    "POISSON",
    "ReplicateResult",
    "RunConfig",
    "SpectralConfig",
    "SpectralError",
    "SpectralEstimate",
    "VIConfig",
    "VariationalPosterior",
    "VertexProblem",
    "align_to_truth",
    "alignment_error",
    "assist_vectors",
    "build_vertex_problem",
    "coverage_experiment",
    "credible_region",
    "default_interval",
    "empirical_fisher",
    "estimate",
    "experiment_params",
    "fit_all",
    "fit_vertex",
    "initial_posterior",
    "label_align",
    "layer_mixed_score",
    "load_config",
    "mean_matrix",
    "mixed_mask",
    "nb_profile_dispersion",
    "noisy_objective_and_grads",
    "parse_config_text",
    "point_estimates",
    "preliminary_means",
    "run_replicate",
    "sample_network",
    "spectral_loglik",
    "structured_factor",
    "transformed_loglik_and_grad",
    "truth_in_estimate_labels",
]
