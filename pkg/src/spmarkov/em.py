"""Generalized EM driver: initialization, monotone iteration, label alignment.

The M-step is split into an exact emission update and a penalized transition
update. Because smoothing levels are re-selected each iteration the ascent
property can occasionally break; the driver then rolls back the transition
update, then the emission update, and finally the whole step, so the reported
likelihood trace stays non-decreasing up to a small slack.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.cluster import KMeans

from .basis import (
    KernelSpec,
    SplineBasis,
    TensorSplineBasis,
    bspline_design,
    kernel_gram,
    make_spline_basis,
    median_pairwise_bandwidth,
    nystrom_factor,
)
from .emission import update_emissions, update_initial
from .exceptions import (
    ConfigurationError,
    DegenerateRegimeError,
    InitializationError,
)
from .inference import PosteriorSummary, forward_backward
from .model import (
    EPS_PROB,
    AdditiveSplineTransition,
    KernelTransition,
    LinearTransition,
    ModelParameters,
    SplineTransition,
    TimeSeriesDataset,
    TransitionFunction,
)
from .transition import (
    backfit_additive,
    build_pseudo_data,
    fit_parametric,
    irls_rkhs,
    irls_spline,
    select_lambda_gcv,
)

VARIANTS = ("linear-logit", "linear-probit", "spline", "additive-spline", "rkhs")

_VARIANT_ALIASES = {
    "logit": "linear-logit",
    "probit": "linear-probit",
    "additive": "additive-spline",
    "kernel": "rkhs",
}

#: EM accepts a candidate as long as the log-likelihood drops by less than this.
ASCENT_SLACK = 1e-8


def canonical_variant(name: str) -> str:
    resolved = _VARIANT_ALIASES.get(name, name)
    if resolved not in VARIANTS:
        raise ConfigurationError(
            f"unknown variant {name!r}; choose from {VARIANTS} "
            f"(aliases: {sorted(_VARIANT_ALIASES)})"
        )
    return resolved


@dataclass(frozen=True)
class EMConfig:
    """Settings for one EM run.

    tol is a relative stopping rule: |delta loglik| / (|loglik| + 1) < tol.
    n_basis counts spline functions per covariate dimension; bandwidth of
    None means the median pairwise distance heuristic; bandwidth_grid holds
    multipliers of that bandwidth to try, keeping the fit with the best final
    log-likelihood; nystrom_landmarks of None means the exact Gram matrix.
    """

    variant: str = "spline"
    max_iter: int = 500
    tol: float = 1e-6
    seed: int = 0
    n_basis: int = 8
    degree: int = 3
    kernel_family: str = "squared-exponential"
    bandwidth: float | None = None
    bandwidth_grid: tuple[float, ...] | None = None
    nystrom_landmarks: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if self.max_iter < 1:
            raise ConfigurationError(f"max_iter must be >= 1, got {self.max_iter}")
        if not (0.0 < self.tol < 1.0):
            raise ConfigurationError(f"tol must be in (0, 1), got {self.tol}")
        if self.degree < 1:
            raise ConfigurationError(f"spline degree must be >= 1, got {self.degree}")
        if self.n_basis < self.degree + 1:
            raise ConfigurationError(
                f"n_basis={self.n_basis} too small for degree {self.degree}"
            )
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigurationError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.bandwidth_grid is not None:
            if self.variant != "rkhs":
                raise ConfigurationError("bandwidth_grid applies to the rkhs variant only")
            grid = tuple(float(v) for v in self.bandwidth_grid)
            if not grid or any(v <= 0 for v in grid):
                raise ConfigurationError("bandwidth_grid must hold positive multipliers")
            object.__setattr__(self, "bandwidth_grid", grid)
        if self.nystrom_landmarks is not None:
            if self.variant != "rkhs":
                raise ConfigurationError(
                    "nystrom_landmarks applies to the rkhs variant only"
                )
            if self.nystrom_landmarks < 1:
                raise ConfigurationError("nystrom_landmarks must be >= 1")

    @property
    def link_kind(self) -> str:
        return "probit" if self.variant == "linear-probit" else "logistic"


@dataclass(frozen=True)
class FitResult:
    """Outcome of run_em: final parameters, posteriors, and the ascent trace."""

    params: ModelParameters
    posterior: PosteriorSummary
    loglik_trace: np.ndarray
    converged: bool
    n_rollbacks: int
    config: EMConfig
    lambdas: tuple[float, float] | tuple[tuple[float, ...], tuple[float, ...]] | None = None

    @property
    def loglik(self) -> float:
        return float(self.loglik_trace[-1])

    @property
    def n_iter(self) -> int:
        return self.loglik_trace.size - 1


def _hard_posterior(labels: np.ndarray) -> PosteriorSummary:
    """One-hot posterior from a hard state path (used only at initialization)."""
    t_len = labels.size
    z = np.zeros((t_len, 2))
    z[np.arange(t_len), labels] = 1.0
    xi = np.zeros((t_len - 1, 2, 2))
    xi[np.arange(t_len - 1), labels[:-1], labels[1:]] = 1.0
    return PosteriorSummary(z=z, xi=xi, loglik=0.0)


def initialize(data: TimeSeriesDataset, config: EMConfig) -> ModelParameters:
    """Starting point from a k-means split of the observations.

    Emissions come from per-cluster weighted VAR fits, the transition
    functions from linear-logit fits to the hard cluster indicators (for
    every variant; the first M-step replaces them with the configured form),
    and pi from the one-hot label at t=1, clamped away from 0 and 1.
    """
    km = KMeans(n_clusters=2, n_init=10, random_state=config.seed)
    labels = km.fit_predict(data.y)
    counts = np.bincount(labels, minlength=2)
    if np.any(counts == 0):
        raise InitializationError("k-means returned an empty cluster")
    hard = _hard_posterior(labels)
    try:
        emissions = update_emissions(data, hard)
    except DegenerateRegimeError as exc:
        raise InitializationError(
            f"k-means cluster too small to fit a regime: {exc}"
        ) from exc
    transitions = []
    for j in range(2):
        pseudo = build_pseudo_data(data, hard, j)
        fitted, _ = fit_parametric(pseudo, "logistic")
        transitions.append(fitted)
    pi = np.clip(hard.z[0], EPS_PROB, 1.0 - EPS_PROB)
    pi = pi / pi.sum()
    return ModelParameters(
        emissions=emissions, pi=pi, f0=transitions[0], f1=transitions[1]
    )


class _TransitionFitter:
    """Per-run cache of designs/Gram matrices plus warm-started M-step fits."""

    def __init__(self, data: TimeSeriesDataset, config: EMConfig, bandwidth_multiplier=1.0):
        self.config = config
        self.variant = config.variant
        x_rows = data.x[:-1]
        self.warm: list = [None, None]
        self.last_lambdas: list = [None, None]
        if self.variant == "spline":
            if data.n_covariates == 1:
                self.basis: SplineBasis | TensorSplineBasis = make_spline_basis(
                    x_rows[:, 0], config.n_basis, config.degree
                )
            else:
                parts = tuple(
                    make_spline_basis(x_rows[:, i], config.n_basis, config.degree)
                    for i in range(data.n_covariates)
                )
                self.basis = TensorSplineBasis(parts)
            self.design = bspline_design(self.basis, x_rows)
            self.penalty = self.basis.penalty_matrix
        elif self.variant == "additive-spline":
            self.bases = tuple(
                make_spline_basis(x_rows[:, i], config.n_basis, config.degree)
                for i in range(data.n_covariates)
            )
            self.designs = tuple(
                b.design_matrix(x_rows[:, i]) for i, b in enumerate(self.bases)
            )
        elif self.variant == "rkhs":
            base_bw = (
                config.bandwidth
                if config.bandwidth is not None
                else median_pairwise_bandwidth(x_rows)
            )
            self.spec = KernelSpec(
                family=config.kernel_family,
                bandwidth=base_bw * bandwidth_multiplier,
                anchors=x_rows,
            )
            m = config.nystrom_landmarks
            if m is not None and m < x_rows.shape[0]:
                z = nystrom_factor(self.spec, x_rows, m, config.seed)
                self.gram = z @ z.T
            else:
                self.gram = kernel_gram(self.spec, x_rows)

    def warm_from(self, f0: TransitionFunction, f1: TransitionFunction) -> None:
        """Re-seed warm starts from already-fitted transition functions.

        After a rollback keeps the previous iterate, restarting IRLS from the
        retained coefficients is faster and closer to the accepted model than
        a cold start. Functions of a different form (e.g. the linear
        initializer under a spline variant) reset the warm start instead.
        """
        for j, f in enumerate((f0, f1)):
            if self.variant in ("linear-logit", "linear-probit") and isinstance(
                f, LinearTransition
            ):
                self.warm[j] = f.coef.copy()
            elif self.variant == "spline" and isinstance(f, SplineTransition):
                self.warm[j] = f.coef.copy()
            elif self.variant == "rkhs" and isinstance(f, KernelTransition):
                self.warm[j] = f.coef.copy()
            elif self.variant == "additive-spline" and isinstance(
                f, AdditiveSplineTransition
            ):
                self.warm[j] = (f.intercept, tuple(c.copy() for c in f.coefs))
            else:
                self.warm[j] = None

    def fit(self, data: TimeSeriesDataset, post: PosteriorSummary) -> tuple[
        TransitionFunction, TransitionFunction
    ]:
        out = []
        for j in range(2):
            pseudo = build_pseudo_data(data, post, j)
            if self.variant in ("linear-logit", "linear-probit"):
                fitted, _ = fit_parametric(
                    pseudo, self.config.link_kind, coef0=self.warm[j]
                )
                self.warm[j] = fitted.coef
            elif self.variant == "spline":
                sel = select_lambda_gcv(
                    pseudo, self.warm[j], design=self.design, penalty=self.penalty
                )
                fitted, _ = irls_spline(
                    self.basis, pseudo, sel.lam, coef0=self.warm[j], design=self.design
                )
                self.warm[j] = fitted.coef
                self.last_lambdas[j] = sel.lam
            elif self.variant == "rkhs":
                sel = select_lambda_gcv(pseudo, self.warm[j], gram=self.gram)
                fitted, _ = irls_rkhs(
                    self.spec, pseudo, sel.lam, coef0=self.warm[j], gram=self.gram
                )
                self.warm[j] = fitted.coef
                self.last_lambdas[j] = sel.lam
            else:  # additive-spline
                lams = []
                warm = self.warm[j]
                intercept = 0.0 if warm is None else warm[0]
                coefs = (
                    [np.zeros(b.n_basis) for b in self.bases]
                    if warm is None
                    else [c.copy() for c in warm[1]]
                )
                parts = [self.designs[i] @ coefs[i] for i in range(len(self.bases))]
                for i, b in enumerate(self.bases):
                    offset = intercept + np.sum(parts, axis=0) - parts[i]
                    block_pen = np.zeros((1 + b.n_basis, 1 + b.n_basis))
                    block_pen[1:, 1:] = b.penalty_matrix
                    block_design = np.hstack(
                        [np.ones((pseudo.n_rows, 1)), self.designs[i]]
                    )
                    sel = select_lambda_gcv(
                        pseudo,
                        np.concatenate([[0.0], coefs[i]]),
                        design=block_design,
                        penalty=block_pen,
                        offset=offset,
                    )
                    lams.append(sel.lam)
                fitted, _ = backfit_additive(
                    self.bases,
                    pseudo,
                    tuple(lams),
                    init=(intercept, tuple(coefs)),
                    designs=self.designs,
                )
                self.warm[j] = (fitted.intercept, fitted.coefs)
                self.last_lambdas[j] = tuple(lams)
            out.append(fitted)
        return out[0], out[1]


def _run_em_single(data: TimeSeriesDataset, config: EMConfig, bandwidth_multiplier=1.0) -> FitResult:
    params = initialize(data, config)
    post = forward_backward(data, params)
    trace = [post.loglik]
    fitter = _TransitionFitter(data, config, bandwidth_multiplier)
    n_rollbacks = 0
    converged = False
    for _ in range(config.max_iter):
        loglik = trace[-1]
        new_emissions = update_emissions(data, post, previous=params.emissions)
        new_pi = update_initial(post)
        new_f0, new_f1 = fitter.fit(data, post)
        cand = ModelParameters(emissions=new_emissions, pi=new_pi, f0=new_f0, f1=new_f1)
        cand_post = forward_backward(data, cand)
        if cand_post.loglik < loglik - ASCENT_SLACK:
            n_rollbacks += 1
            # Keep whichever half-update still ascends: first try dropping the
            # transition update, then the emission update, else the full step.
            alt = replace(cand, f0=params.f0, f1=params.f1)
            alt_post = forward_backward(data, alt)
            if alt_post.loglik >= loglik - ASCENT_SLACK:
                cand, cand_post = alt, alt_post
                fitter.warm_from(params.f0, params.f1)
            else:
                alt = replace(params, f0=new_f0, f1=new_f1)
                alt_post = forward_backward(data, alt)
                if alt_post.loglik >= loglik - ASCENT_SLACK:
                    cand, cand_post = alt, alt_post
                else:
                    cand, cand_post = params, post
                    fitter.warm_from(params.f0, params.f1)
        params, post = cand, cand_post
        trace.append(post.loglik)
        if abs(trace[-1] - loglik) / (abs(loglik) + 1.0) < config.tol:
            converged = True
            break
    lambdas = None
    if fitter.last_lambdas[0] is not None and fitter.last_lambdas[1] is not None:
        lambdas = (fitter.last_lambdas[0], fitter.last_lambdas[1])
    return FitResult(
        params=params,
        posterior=post,
        loglik_trace=np.asarray(trace),
        converged=converged,
        n_rollbacks=n_rollbacks,
        config=config,
        lambdas=lambdas,
    )


def run_em(data: TimeSeriesDataset, config: EMConfig) -> FitResult:
    """Fit the switching model by generalized EM.

    With a bandwidth_grid configured (kernel variant only), one full EM run
    per multiplier is performed and the fit with the best final
    log-likelihood wins.
    """
    if config.bandwidth_grid is not None and config.variant == "rkhs":
        best: FitResult | None = None
        for mult in config.bandwidth_grid:
            result = _run_em_single(data, config, bandwidth_multiplier=mult)
            if best is None or result.loglik > best.loglik:
                best = result
        return best
    return _run_em_single(data, config)


def align_labels(
    params: ModelParameters, post: PosteriorSummary, reference_states: np.ndarray
) -> tuple[ModelParameters, PosteriorSummary, tuple[int, int]]:
    """Resolve the label-swap ambiguity against a reference state path.

    Returns the permutation (identity or swap) of the fitted regimes that
    maximizes hard-assignment agreement with reference_states, applied to
    every labeled quantity. Swapping negates and exchanges the transition
    functions: p'_01 = 1 - p_11 means f'_0 = -f_1, and likewise f'_1 = -f_0.
    Ties keep the identity permutation. The log-likelihood is unchanged.
    """
    reference_states = np.asarray(reference_states)
    if reference_states.size != post.n_obs:
        raise ConfigurationError(
            f"reference path has {reference_states.size} states for "
            f"{post.n_obs} time points"
        )
    hard = np.argmax(post.z, axis=1)
    agree_id = float(np.mean(hard == reference_states))
    agree_sw = float(np.mean((1 - hard) == reference_states))
    if agree_sw <= agree_id:
        return params, post, (0, 1)
    swapped = ModelParameters(
        emissions=(params.emissions[1], params.emissions[0]),
        pi=params.pi[::-1].copy(),
        f0=params.f1.negated(),
        f1=params.f0.negated(),
    )
    swapped_post = PosteriorSummary(
        z=post.z[:, ::-1].copy(),
        xi=post.xi[:, ::-1, ::-1].copy(),
        loglik=post.loglik,
    )
    return swapped, swapped_post, (1, 0)
