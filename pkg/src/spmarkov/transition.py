"""M-step estimation of the covariate-driven transition functions.

Each regime row of the transition matrix contributes a weighted binomial
pseudo-dataset built from the pairwise posteriors. The log-odds function is
then estimated by penalized IRLS: a linear predictor (optionally probit) for
the parametric variants, a penalized B-spline or tensor-product spline, an
additive spline model fitted by backfitting, or a kernel expansion whose
update is solved directly in the anchor coefficients. Smoothing levels are
chosen by generalized cross-validation on the working weighted-least-squares
problem.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, solve
from scipy.special import expit, log_ndtr

from ._validation import as_float_matrix, as_float_vector
from .basis import (
    GRAM_JITTER,
    KernelSpec,
    SplineBasis,
    TensorSplineBasis,
    bspline_design,
    kernel_gram,
)
from .exceptions import ConfigurationError, DataValidationError, NumericalError
from .inference import PosteriorSummary
from .model import (
    EPS_PROB,
    AdditiveSplineTransition,
    KernelTransition,
    LinearTransition,
    SplineTransition,
    TimeSeriesDataset,
)

#: IRLS stopping rule: max absolute coefficient change below this.
IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
IRLS_MAX_HALVINGS = 20

#: Backfitting stopping rule on the fitted log-odds values.
BACKFIT_TOL = 1e-6
BACKFIT_MAX_SWEEPS = 50

#: Coefficient norm beyond which a parametric fit is treated as separated.
SEPARATION_NORM = 1e4

#: GCV grid: 25 log-spaced multipliers of a design-dependent scale.
GCV_GRID = np.geomspace(1e-4, 1e4, 25)


@dataclass(frozen=True)
class PseudoData:
    """Weighted binomial regression rows for one regime.

    n[t] is the posterior mass of occupying the regime at time t, ytil[t] the
    conditional probability of moving to regime 1, and X[t] the covariate row
    driving that transition (times t = 1..T-1).
    """

    n: np.ndarray
    ytil: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        n = as_float_vector(self.n, "n")
        ytil = as_float_vector(self.ytil, "ytil", length=n.size)
        X = as_float_matrix(self.X, "X", allow_1d=True)
        if X.shape[0] != n.size:
            raise DataValidationError(
                f"X has {X.shape[0]} rows but n has {n.size} entries"
            )
        if np.any(n < 0):
            raise DataValidationError("pseudo-counts n must be non-negative")
        if np.any((ytil < 0) | (ytil > 1)):
            raise DataValidationError("pseudo-responses ytil must lie in [0, 1]")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "ytil", ytil)
        object.__setattr__(self, "X", X)

    @property
    def n_rows(self) -> int:
        return self.n.size


def build_pseudo_data(
    data: TimeSeriesDataset, post: PosteriorSummary, regime: int
) -> PseudoData:
    """Pseudo-data for one transition row from the pairwise posteriors.

    n_t = xi[t, j, 0] + xi[t, j, 1] and ytil_t = xi[t, j, 1] / n_t; rows whose
    mass falls below 1e-12 get the uninformative response 0.5.
    """
    if regime not in (0, 1):
        raise ConfigurationError(f"regime must be 0 or 1, got {regime}")
    if post.n_obs != data.n_obs:
        raise DataValidationError(
            f"posterior covers {post.n_obs} points but data has {data.n_obs}"
        )
    counts = post.xi[:, regime, :].sum(axis=1)
    stay1 = post.xi[:, regime, 1]
    safe = np.where(counts < 1e-12, 1.0, counts)
    ytil = np.where(counts < 1e-12, 0.5, stay1 / safe)
    return PseudoData(n=counts, ytil=np.clip(ytil, 0.0, 1.0), X=data.x[:-1])


# ---------------------------------------------------------------------------
# Weighted binomial likelihood pieces (shared by every variant)
# ---------------------------------------------------------------------------


def _loglik_score_weight(
    eta: np.ndarray, pseudo: PseudoData, link_kind: str
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted log-likelihood, its derivative in eta, and Fisher weights.

    Stable in the tails: the logistic branch goes through logaddexp and the
    probit branch through log_ndtr, so no probability is formed before its
    logarithm.
    """
    n, ytil = pseudo.n, pseudo.ytil
    if link_kind == "logistic":
        ll = float(np.sum(n * (ytil * eta - np.logaddexp(0.0, eta))))
        p = expit(eta)
        score = n * (ytil - p)
        weight = n * np.clip(p * (1.0 - p), EPS_PROB, None)
        return ll, score, weight
    if link_kind == "probit":
        lpos = log_ndtr(eta)
        lneg = log_ndtr(-eta)
        ll = float(np.sum(n * (ytil * lpos + (1.0 - ytil) * lneg)))
        logphi = -0.5 * eta**2 - 0.5 * np.log(2.0 * np.pi)
        score = n * (
            ytil * np.exp(logphi - lpos) - (1.0 - ytil) * np.exp(logphi - lneg)
        )
        weight = n * np.exp(2.0 * logphi - lpos - lneg)
        return ll, score, weight
    raise ConfigurationError(f"unknown link {link_kind!r}")


def penalized_objective(
    design: np.ndarray,
    penalty_qform: np.ndarray | None,
    coef: np.ndarray,
    pseudo: PseudoData,
    link_kind: str = "logistic",
    offset: np.ndarray | float = 0.0,
) -> float:
    """Weighted binomial log-likelihood minus half the penalty quadratic form."""
    coef = np.asarray(coef, dtype=np.float64)
    eta = offset + design @ coef
    ll, _, _ = _loglik_score_weight(eta, pseudo, link_kind)
    if penalty_qform is not None:
        ll -= 0.5 * float(coef @ penalty_qform @ coef)
    return ll


def penalized_gradient(
    design: np.ndarray,
    penalty_qform: np.ndarray | None,
    coef: np.ndarray,
    pseudo: PseudoData,
    link_kind: str = "logistic",
    offset: np.ndarray | float = 0.0,
) -> np.ndarray:
    """Exact gradient of penalized_objective in the coefficients."""
    coef = np.asarray(coef, dtype=np.float64)
    eta = offset + design @ coef
    _, score, _ = _loglik_score_weight(eta, pseudo, link_kind)
    grad = design.T @ score
    if penalty_qform is not None:
        grad = grad - penalty_qform @ coef
    return grad


@dataclass(frozen=True)
class IRLSInfo:
    """Diagnostics for one penalized IRLS solve."""

    n_iter: int
    converged: bool
    objective: float


def _solve_sym(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve a symmetric working system, tolerating (near-)singularity.

    Rank deficiency is expected here: penalty null spaces overlap the design
    (an intercept column against a partition-of-unity spline block, basis
    functions with no pseudo-count mass). Any particular solution yields the
    same fitted values along exact null directions and the step-halving
    objective safeguard rejects bad steps, so the minimum-norm solution is
    the right fallback.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("error", LinAlgWarning)
        try:
            return solve(lhs, rhs, assume_a="sym")
        except (LinAlgWarning, np.linalg.LinAlgError):
            solution, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
            return solution


def _irls_loop(pseudo, link_kind, coef0, predict, solve_step, qform):
    """Penalized IRLS with step halving; returns (coef, IRLSInfo).

    predict(coef) gives the linear predictor; solve_step(eta, score, weight)
    proposes the next coefficient vector from the working WLS system. When a
    proposal lowers the penalized objective the step is halved toward the
    previous iterate (at most 20 times) and the best candidate kept; the
    iterate with the best objective over the whole run is returned.
    """

    def objective(c):
        eta = predict(c)
        ll, _, _ = _loglik_score_weight(eta, pseudo, link_kind)
        if qform is not None:
            ll -= 0.5 * float(c @ qform @ c)
        return ll

    coef = np.array(coef0, dtype=np.float64)
    obj = objective(coef)
    if not np.isfinite(obj):
        raise NumericalError("penalized objective non-finite at the starting point")
    best_coef, best_obj = coef.copy(), obj
    converged = False
    n_iter = 0
    for n_iter in range(1, IRLS_MAX_ITER + 1):
        eta = predict(coef)
        _, score, weight = _loglik_score_weight(eta, pseudo, link_kind)
        proposal = solve_step(eta, score, weight)
        if not np.all(np.isfinite(proposal)):
            break
        step = proposal - coef
        cand = coef + step
        cand_obj = objective(cand)
        pick, pick_obj = cand, cand_obj
        halves = 0
        while (not np.isfinite(cand_obj) or cand_obj < obj) and halves < IRLS_MAX_HALVINGS:
            step = 0.5 * step
            cand = coef + step
            cand_obj = objective(cand)
            if np.isfinite(cand_obj) and (not np.isfinite(pick_obj) or cand_obj > pick_obj):
                pick, pick_obj = cand, cand_obj
            halves += 1
        delta = float(np.max(np.abs(pick - coef)))
        coef, obj = pick, pick_obj
        if np.isfinite(obj) and obj > best_obj:
            best_coef, best_obj = coef.copy(), obj
        if delta < IRLS_TOL:
            converged = True
            break
    return best_coef, IRLSInfo(n_iter=n_iter, converged=converged, objective=best_obj)


def _design_irls(design, qform, pseudo, link_kind, coef0, offset=0.0):
    """IRLS in an explicit design: solves (X'WX + Q) c = X'(W (eta-offset) + score)."""

    def predict(c):
        return offset + design @ c

    def solve_step(eta, score, weight):
        rhs = design.T @ (weight * (eta - offset) + score)
        lhs = design.T @ (design * weight[:, None])
        if qform is not None:
            lhs = lhs + qform
        return _solve_sym(lhs, rhs)

    return _irls_loop(pseudo, link_kind, coef0, predict, solve_step, qform)


# ---------------------------------------------------------------------------
# Variant front ends
# ---------------------------------------------------------------------------


def fit_parametric(
    pseudo: PseudoData,
    link_kind: str = "logistic",
    coef0: np.ndarray | None = None,
    ridge: float = 0.0,
) -> tuple[LinearTransition, IRLSInfo]:
    """Weighted GLM fit of a linear log-odds (or probit index) function.

    Complete-separation symptoms (coefficient norm above 1e4) trigger a
    warning and a ridge-stabilized refit with lambda = 1e-6 on the slopes.
    """
    design = np.hstack([np.ones((pseudo.n_rows, 1)), pseudo.X])
    k = design.shape[1]
    qform = None
    if ridge > 0.0:
        qform = ridge * np.eye(k)
        qform[0, 0] = 0.0
    if coef0 is None:
        coef0 = np.zeros(k)
    coef, info = _design_irls(design, qform, pseudo, link_kind, coef0)
    if ridge == 0.0 and float(np.linalg.norm(coef)) > SEPARATION_NORM:
        warnings.warn(
            "parametric transition fit appears separated; refitting with a "
            "small ridge penalty",
            RuntimeWarning,
            stacklevel=2,
        )
        return fit_parametric(pseudo, link_kind, coef0=np.zeros(k), ridge=1e-6)
    return LinearTransition(coef=coef, link_kind=link_kind), info


def irls_spline(
    basis: SplineBasis | TensorSplineBasis,
    pseudo: PseudoData,
    lam: float,
    coef0: np.ndarray | None = None,
    design: np.ndarray | None = None,
) -> tuple[SplineTransition, IRLSInfo]:
    """Penalized spline fit of the log-odds at a fixed smoothing level lam."""
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    if design is None:
        design = bspline_design(basis, pseudo.X)
    qform = lam * basis.penalty_matrix
    if coef0 is None:
        coef0 = np.zeros(basis.n_basis)
    coef, info = _design_irls(design, qform, pseudo, "logistic", coef0)
    return SplineTransition(basis=basis, coef=coef, penalty=float(lam)), info


def irls_rkhs(
    spec: KernelSpec,
    pseudo: PseudoData,
    lam: float,
    coef0: np.ndarray | None = None,
    gram: np.ndarray | None = None,
) -> tuple[KernelTransition, IRLSInfo]:
    """Kernel-expansion fit anchored at the pseudo-data covariate rows.

    The update solves (W K + lam I) a = W z* directly in the anchor
    coefficients. A small diagonal jitter enters the factorized system only;
    the objective, the fitted values, and the returned function all use the
    raw Gram matrix, so the optimized function is exactly the one the model
    evaluates later.
    """
    if lam <= 0:
        raise ConfigurationError(f"kernel fits need lambda > 0, got {lam}")
    anchored = spec if spec.anchors is not None else spec.with_anchors(pseudo.X)
    if anchored.anchors.shape[0] != pseudo.n_rows:
        raise ConfigurationError("kernel anchors must be the pseudo-data covariate rows")
    if gram is None:
        gram = kernel_gram(anchored, anchored.anchors)
    qform = lam * gram

    def predict(c):
        return gram @ c

    def solve_step(eta, score, weight):
        lhs = gram * weight[:, None]
        lhs[np.diag_indices_from(lhs)] += lam + GRAM_JITTER * weight
        rhs = weight * eta + score
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                return solve(lhs, rhs)
            except (LinAlgWarning, np.linalg.LinAlgError):
                solution, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
                return solution

    if coef0 is None:
        coef0 = np.zeros(pseudo.n_rows)
    coef, info = _irls_loop(pseudo, "logistic", coef0, predict, solve_step, qform)
    return KernelTransition(spec=anchored, coef=coef, penalty=float(lam)), info


def _additive_qform(bases, lams) -> np.ndarray:
    """Block-diagonal penalty for the stacked vector [intercept, coefs_1, ...]."""
    total = 1 + sum(b.n_basis for b in bases)
    qform = np.zeros((total, total))
    pos = 1
    for b, lam in zip(bases, lams):
        m = b.n_basis
        qform[pos : pos + m, pos : pos + m] = lam * b.penalty_matrix
        pos += m
    return qform


def backfit_additive(
    bases: tuple[SplineBasis, ...],
    pseudo: PseudoData,
    lams: tuple[float, ...],
    init: tuple[float, tuple[np.ndarray, ...]] | None = None,
    designs: tuple[np.ndarray, ...] | None = None,
) -> tuple[AdditiveSplineTransition, IRLSInfo]:
    """Additive spline fit by cyclic backfitting.

    Each sweep refits one component (jointly with the global intercept) by
    penalized IRLS holding the others fixed as an offset, then recenters the
    component to pseudo-count-weighted mean zero, moving the shift into the
    intercept. Sweeps stop once the fitted log-odds change by less than 1e-6.
    """
    p = len(bases)
    if pseudo.X.shape[1] != p:
        raise ConfigurationError(f"{p} bases supplied for {pseudo.X.shape[1]} covariates")
    if len(lams) != p:
        raise ConfigurationError("one smoothing level per component required")
    if designs is None:
        designs = tuple(b.design_matrix(pseudo.X[:, i]) for i, b in enumerate(bases))
    if init is None:
        intercept = 0.0
        coefs = [np.zeros(b.n_basis) for b in bases]
    else:
        intercept = float(init[0])
        coefs = [np.array(c, dtype=np.float64) for c in init[1]]
    weights = pseudo.n
    wsum = float(weights.sum())
    if wsum <= 0:
        raise NumericalError("additive fit has zero total pseudo-count mass")

    parts = [designs[i] @ coefs[i] for i in range(p)]
    inner_ok = True
    converged = False
    sweeps = 0
    prev_eta = intercept + np.sum(parts, axis=0)
    for sweeps in range(1, BACKFIT_MAX_SWEEPS + 1):
        for i in range(p):
            offset = np.sum(parts, axis=0) - parts[i]
            block = np.hstack([np.ones((pseudo.n_rows, 1)), designs[i]])
            qform = np.zeros((block.shape[1], block.shape[1]))
            qform[1:, 1:] = lams[i] * bases[i].penalty_matrix
            start = np.concatenate([[intercept], coefs[i]])
            sol, info = _design_irls(block, qform, pseudo, "logistic", start, offset=offset)
            inner_ok = inner_ok and info.converged
            new_part = designs[i] @ sol[1:]
            shift = float(weights @ new_part / wsum)
            coefs[i] = sol[1:] - shift
            intercept = float(sol[0]) + shift
            parts[i] = new_part - shift
        eta = intercept + np.sum(parts, axis=0)
        if float(np.max(np.abs(eta - prev_eta))) < BACKFIT_TOL:
            converged = True
            break
        prev_eta = eta
    obj = penalized_objective(
        np.hstack([np.ones((pseudo.n_rows, 1))] + list(designs)),
        _additive_qform(bases, lams),
        np.concatenate([[intercept]] + coefs),
        pseudo,
    )
    fitted = AdditiveSplineTransition(
        bases=tuple(bases),
        intercept=intercept,
        coefs=tuple(coefs),
        penalties=tuple(float(v) for v in lams),
    )
    return fitted, IRLSInfo(n_iter=sweeps, converged=converged and inner_ok, objective=obj)


# ---------------------------------------------------------------------------
# GCV smoothing selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GCVResult:
    """Grid-search outcome: chosen lambda plus the full score/trace profiles."""

    lam: float
    grid: np.ndarray
    scores: np.ndarray
    traces: np.ndarray


def _working_quantities(eta: np.ndarray, pseudo: PseudoData) -> tuple[np.ndarray, np.ndarray]:
    """Working response and weights of the local WLS problem at eta.

    Weights are w = n v with v = p(1-p); the working response is
    z* = eta + (ytil - p)/v, whose zero-weight rows never enter the weighted
    residual or the right-hand sides, so the clamp on v is harmless.
    """
    p = np.clip(expit(eta), EPS_PROB, 1.0 - EPS_PROB)
    v = p * (1.0 - p)
    w = pseudo.n * v
    zstar = eta + (pseudo.ytil - p) / v
    return zstar, w


def spline_hat_trace(
    design: np.ndarray, penalty: np.ndarray, weights: np.ndarray, lam: float
) -> float:
    """trace of H(lam) = X (X'WX + lam P)^{-1} X'W."""
    xtwx = design.T @ (design * weights[:, None])
    return float(np.trace(_solve_sym(xtwx + lam * penalty, xtwx)))


class _KernelHatPath:
    """Spectral evaluation of the kernel smoother H(lam) = K (WK + lam I)^{-1} W.

    This is exactly the map z* -> K a(lam) performed by the ridge update
    (WK + lam I) a = W z*, so selection scores the same fits the M-step
    produces. With B = W^{1/2} K W^{1/2} = U diag(d) U' (PSD), the effective
    degrees of freedom are trace H(lam) = sum_i d_i / (d_i + lam), which
    decreases in lam, and H z = (K W^{1/2} U) diag(1/(d + lam)) U' W^{1/2} z;
    one eigendecomposition gives every grid point in O(n^2).
    """

    def __init__(self, gram: np.ndarray, weights: np.ndarray):
        w = np.asarray(weights, dtype=np.float64)
        if not np.any(w > 0.0):
            raise NumericalError("kernel GCV weights are identically zero")
        sqrt_w = np.sqrt(w)
        b = gram * sqrt_w[:, None] * sqrt_w[None, :]
        d, u = np.linalg.eigh(b)
        self.d = np.maximum(d, 0.0)
        self.u = u
        self.sqrt_w = sqrt_w
        self.left = (gram * sqrt_w[None, :]) @ u

    def trace(self, lam: float) -> float:
        return float(np.sum(self.d / (self.d + lam)))

    def fitted(self, lam: float, zstar: np.ndarray) -> np.ndarray:
        v = self.u.T @ (self.sqrt_w * zstar)
        return self.left @ (v / (self.d + lam))


def kernel_hat_trace(gram: np.ndarray, weights: np.ndarray, lam: float) -> float:
    """trace of H(lam) = K (WK + lam I)^{-1} W, the kernel ridge smoother."""
    return _KernelHatPath(gram, weights).trace(lam)


def select_lambda_gcv(
    pseudo: PseudoData,
    coef: np.ndarray | None = None,
    *,
    design: np.ndarray | None = None,
    penalty: np.ndarray | None = None,
    gram: np.ndarray | None = None,
    offset: np.ndarray | float = 0.0,
) -> GCVResult:
    """Choose the smoothing level minimizing GCV on the working WLS problem.

    Exactly one representation must be given: (design, penalty) for spline
    fits or gram for kernel fits. The working response and weights are formed
    at the warm-start coefficients, so selection tracks the current EM state.
    Grid points whose hat-matrix trace reaches the number of rows score +inf.
    """
    spline_mode = design is not None
    if spline_mode == (gram is not None):
        raise ConfigurationError("pass either (design, penalty) or gram, not both")
    if spline_mode and penalty is None:
        raise ConfigurationError("spline GCV needs the penalty matrix")
    t_rows = pseudo.n_rows
    if spline_mode:
        if coef is None:
            coef = np.zeros(design.shape[1])
        eta = offset + design @ coef
        scale = float(np.einsum("ij,ij->", design, design)) / t_rows
    else:
        if coef is None:
            coef = np.zeros(t_rows)
        eta = offset + gram @ coef
        scale = float(np.trace(gram)) / t_rows
    if scale <= 0.0:
        raise NumericalError("GCV scale collapsed to zero")
    zstar, w = _working_quantities(eta, pseudo)
    grid = GCV_GRID * scale
    scores = np.full(grid.size, np.inf)
    traces = np.empty(grid.size)

    if spline_mode:
        xtw = design.T * w[None, :]
        xtwx = xtw @ design
        rhs = xtw @ zstar
        for i, lam in enumerate(grid):
            lhs = xtwx + lam * penalty
            traces[i] = float(np.trace(_solve_sym(lhs, xtwx)))
            if traces[i] >= t_rows:
                continue
            resid = zstar - design @ _solve_sym(lhs, rhs)
            scores[i] = float(w @ resid**2) / (1.0 - traces[i] / t_rows) ** 2
    else:
        path = _KernelHatPath(gram, w)
        for i, lam in enumerate(grid):
            traces[i] = path.trace(lam)
            if traces[i] >= t_rows:
                continue
            resid = zstar - path.fitted(lam, zstar)
            scores[i] = float(w @ resid**2) / (1.0 - traces[i] / t_rows) ** 2

    if not np.any(np.isfinite(scores)):
        raise NumericalError("GCV failed at every grid point")
    best = int(np.argmin(scores))
    return GCVResult(lam=float(grid[best]), grid=grid, scores=scores, traces=traces)
