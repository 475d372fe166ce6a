"""Two-regime Markov-switching VAR with covariate-driven transition probabilities.

The switching probabilities p01(x) and p11(x) are smooth functions of
exogenous covariates, estimated semi-parametrically (penalized splines,
additive splines, or a kernel expansion) or parametrically (logit/probit)
inside a generalized EM loop with GCV-tuned smoothing.
"""

from .basis import (
    GRAM_JITTER,
    KernelSpec,
    SplineBasis,
    TensorSplineBasis,
    bspline_design,
    kernel_gram,
    make_spline_basis,
    median_pairwise_bandwidth,
    nystrom_factor,
    second_diff_penalty,
)
from .benchmark import ExperimentReport, ReplicationResult, RunConfig, run_benchmark
from .em import EMConfig, FitResult, VARIANTS, align_labels, initialize, run_em
from .emission import update_emissions, update_initial
from .estimator import MarkovSwitchingVAR
from .exceptions import (
    ConfigurationError,
    DataValidationError,
    DegenerateRegimeError,
    InitializationError,
    NumericalError,
    SpmarkovError,
)
from .inference import PosteriorSummary, forward_backward, observed_loglik
from .model import (
    EPS_PROB,
    AdditiveSplineTransition,
    FunctionTransition,
    KernelTransition,
    LinearTransition,
    ModelParameters,
    RegimeEmission,
    SplineTransition,
    TimeSeriesDataset,
    TransitionFunction,
    emission_logdensity,
    link,
    transition_probs,
)
from .simulate import (
    GroundTruth,
    classification_accuracy,
    heldout_loglik,
    linear_truth,
    mean_abs_timing_error,
    nonlinear_truth,
    simulate_dataset,
)
from .transition import (
    GCVResult,
    PseudoData,
    backfit_additive,
    build_pseudo_data,
    fit_parametric,
    irls_rkhs,
    irls_spline,
    kernel_hat_trace,
    penalized_gradient,
    penalized_objective,
    select_lambda_gcv,
    spline_hat_trace,
)

__version__ = "0.1.0"

__all__ = [
    "AdditiveSplineTransition",
    "ConfigurationError",
    "DataValidationError",
    "DegenerateRegimeError",
    "EMConfig",
    "EPS_PROB",
    "ExperimentReport",
    "FitResult",
    "FunctionTransition",
    "GCVResult",
    "GRAM_JITTER",
    "GroundTruth",
    "InitializationError",
    "KernelSpec",
    "KernelTransition",
    "LinearTransition",
    "MarkovSwitchingVAR",
    "ModelParameters",
    "NumericalError",
    "PosteriorSummary",
    "PseudoData",
    "RegimeEmission",
    "ReplicationResult",
    "RunConfig",
    "SplineBasis",
    "SplineTransition",
    "SpmarkovError",
    "TensorSplineBasis",
    "TimeSeriesDataset",
    "TransitionFunction",
    "VARIANTS",
    "align_labels",
    "backfit_additive",
    "bspline_design",
    "build_pseudo_data",
    "classification_accuracy",
    "emission_logdensity",
    "fit_parametric",
    "forward_backward",
    "heldout_loglik",
    "initialize",
    "irls_rkhs",
    "irls_spline",
    "kernel_gram",
    "kernel_hat_trace",
    "linear_truth",
    "link",
    "make_spline_basis",
    "mean_abs_timing_error",
    "median_pairwise_bandwidth",
    "nonlinear_truth",
    "nystrom_factor",
    "observed_loglik",
    "penalized_gradient",
    "penalized_objective",
    "run_benchmark",
    "run_em",
    "second_diff_penalty",
    "select_lambda_gcv",
    "simulate_dataset",
    "spline_hat_trace",
    "transition_probs",
    "update_emissions",
    "update_initial",
]
