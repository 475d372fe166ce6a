"""Core model types: datasets, regime emissions, transition functions, parameters.

The model is a two-regime Markov-switching Gaussian VAR(1) whose transition
probabilities depend on exogenous covariates through regime-specific log-odds
functions: p01(x) = link(f0(x)) and p11(x) = link(f1(x)).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.special import expit, ndtr

from ._validation import as_float_matrix, as_float_vector
from .basis import KernelSpec, SplineBasis, TensorSplineBasis, bspline_design, kernel_gram
from .exceptions import ConfigurationError, DataValidationError, NumericalError

#: Probabilities are clamped to [EPS_PROB, 1 - EPS_PROB] throughout.
EPS_PROB = 1e-12

LINKS = ("logistic", "probit")


def link(kind: str, u):
    """Map log-odds (or probit index) to a probability in [eps, 1-eps].

    Accepts scalars or arrays; returns the same shape. The clamp keeps
    downstream log-probabilities finite even for extreme inputs.
    """
    if kind not in LINKS:
        raise ConfigurationError(f"unknown link {kind!r}; choose from {LINKS}")
    arr = np.asarray(u, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataValidationError("link input contains non-finite values")
    p = expit(arr) if kind == "logistic" else ndtr(arr)
    p = np.clip(p, EPS_PROB, 1.0 - EPS_PROB)
    return float(p) if np.isscalar(u) or arr.ndim == 0 else p


@dataclass(frozen=True)
class TimeSeriesDataset:
    """Observed series y (T×d) with exogenous covariates x (T×p), time-aligned."""

    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = as_float_matrix(self.y, "y", allow_1d=True)
        x = as_float_matrix(self.x, "x", allow_1d=True)
        if y.shape[0] != x.shape[0]:
            raise DataValidationError(
                f"y has {y.shape[0]} rows but x has {x.shape[0]}; lengths must match"
            )
        if y.shape[0] < 2:
            raise DataValidationError(f"need at least 2 time points, got {y.shape[0]}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_series(self) -> int:
        return self.y.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[1]

    def window(self, start: int, stop: int) -> "TimeSeriesDataset":
        """Contiguous sub-series on [start, stop)."""
        if not (0 <= start < stop <= self.n_obs):
            raise DataValidationError(
                f"window [{start}, {stop}) out of range for T={self.n_obs}"
            )
        return TimeSeriesDataset(self.y[start:stop], self.x[start:stop])


@dataclass(frozen=True)
class RegimeEmission:
    """Gaussian VAR(1) emission for one regime: y_t ~ N(mu + A y_{t-1}, Sigma)."""

    mu: np.ndarray
    A: np.ndarray
    Sigma: np.ndarray

    def __post_init__(self):
        mu = as_float_vector(self.mu, "mu")
        d = mu.size
        A = as_float_matrix(self.A, "A")
        Sigma = as_float_matrix(self.Sigma, "Sigma")
        if A.shape != (d, d):
            raise DataValidationError(f"A must be {d}x{d}, got {A.shape}")
        if Sigma.shape != (d, d):
            raise DataValidationError(f"Sigma must be {d}x{d}, got {Sigma.shape}")
        if np.max(np.abs(Sigma - Sigma.T)) > 1e-10:
            raise DataValidationError("Sigma must be symmetric (tolerance 1e-10)")
        Sigma = (Sigma + Sigma.T) / 2
        Sigma.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "Sigma", Sigma)
        self._chol  # validate positive definiteness eagerly

    @property
    def n_series(self) -> int:
        return self.mu.size

    @cached_property
    def _chol(self) -> tuple[np.ndarray, float]:
        """Lower Cholesky factor of Sigma and log det Sigma."""
        c, info = dpotrf(self.Sigma, lower=1)
        if info > 0:
            raise NumericalError(
                f"Sigma is not positive definite (Cholesky failed at pivot {info})"
            )
        if info < 0:
            raise NumericalError(f"invalid argument {-info} to Cholesky factorization")
        L = np.tril(c)
        return L, 2.0 * float(np.sum(np.log(np.diag(L))))


def emission_logdensity(emission: RegimeEmission, y_t, y_prev) -> float:
    """Log N(y_t; mu + A y_prev, Sigma)."""
    y_t = as_float_vector(y_t, "y_t", length=emission.n_series)
    y_prev = as_float_vector(y_prev, "y_prev", length=emission.n_series)
    L, logdet = emission._chol
    resid = y_t - emission.mu - emission.A @ y_prev
    z = solve_triangular(L, resid, lower=True)
    d = emission.n_series
    return float(-0.5 * (d * np.log(2.0 * np.pi) + logdet + z @ z))


def emission_logdensities(emission: RegimeEmission, Y: np.ndarray, Ylag: np.ndarray) -> np.ndarray:
    """Row-wise log densities for stacked observations Y given lags Ylag."""
    L, logdet = emission._chol
    resid = Y - emission.mu - Ylag @ emission.A.T
    z = solve_triangular(L, resid.T, lower=True)
    d = emission.n_series
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + np.einsum("ij,ij->j", z, z))


class TransitionFunction:
    """Covariate-to-log-odds function; link(evaluate(x)) is a transition probability."""

    variant: str = "abstract"
    link_kind: str = "logistic"
    n_features: int = 0

    def evaluate(self, X) -> np.ndarray:
        """Log-odds values at covariate rows X (n×p) -> shape (n,)."""
        raise NotImplementedError

    def negated(self) -> "TransitionFunction":
        """Function g with link(g(x)) = 1 - link(f(x)) for symmetric links."""
        raise NotImplementedError

    def _check_features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataValidationError(f"covariates must be 2-d, got ndim={X.ndim}")
        if self.n_features and X.shape[1] != self.n_features:
            raise DataValidationError(
                f"{self.variant} transition expects {self.n_features} covariates, "
                f"got {X.shape[1]}"
            )
        return X


@dataclass(frozen=True)
class LinearTransition(TransitionFunction):
    """f(x) = coef[0] + x @ coef[1:], with a logistic or probit link."""

    coef: np.ndarray
    link_kind: str = "logistic"

    def __post_init__(self):
        object.__setattr__(self, "coef", as_float_vector(self.coef, "coef"))
        if self.link_kind not in LINKS:
            raise ConfigurationError(f"unknown link {self.link_kind!r}")

    @property
    def variant(self) -> str:
        return "linear-logit" if self.link_kind == "logistic" else "linear-probit"

    @property
    def n_features(self) -> int:
        return self.coef.size - 1

    def evaluate(self, X) -> np.ndarray:
        X = self._check_features(X)
        return self.coef[0] + X @ self.coef[1:]

    def negated(self) -> "LinearTransition":
        return LinearTransition(-self.coef, self.link_kind)


@dataclass(frozen=True)
class SplineTransition(TransitionFunction):
    """f(x) = design(basis, x) @ coef with a smoothing penalty on coef."""

    basis: SplineBasis | TensorSplineBasis
    coef: np.ndarray
    penalty: float = 0.0
    link_kind: str = "logistic"
    variant = "spline"

    def __post_init__(self):
        coef = as_float_vector(self.coef, "coef", length=self.basis.n_basis)
        object.__setattr__(self, "coef", coef)

    @property
    def n_features(self) -> int:
        return self.basis.n_features

    def evaluate(self, X) -> np.ndarray:
        X = self._check_features(X)
        return bspline_design(self.basis, X) @ self.coef

    def negated(self) -> "SplineTransition":
        return SplineTransition(self.basis, -self.coef, self.penalty, self.link_kind)


@dataclass(frozen=True)
class AdditiveSplineTransition(TransitionFunction):
    """f(x) = intercept + sum_l design(basis_l, x_l) @ coef_l, one basis per covariate."""

    bases: tuple[SplineBasis, ...]
    intercept: float
    coefs: tuple[np.ndarray, ...]
    penalties: tuple[float, ...]
    link_kind: str = "logistic"
    variant = "additive-spline"

    def __post_init__(self):
        bases = tuple(self.bases)
        coefs = tuple(
            as_float_vector(c, f"coefs[{i}]", length=b.n_basis)
            for i, (b, c) in enumerate(zip(bases, self.coefs, strict=True))
        )
        penalties = tuple(float(p) for p in self.penalties)
        if len(penalties) != len(bases):
            raise ConfigurationError("one penalty per additive component required")
        object.__setattr__(self, "bases", bases)
        object.__setattr__(self, "coefs", coefs)
        object.__setattr__(self, "penalties", penalties)
        object.__setattr__(self, "intercept", float(self.intercept))

    @property
    def n_features(self) -> int:
        return len(self.bases)

    def evaluate(self, X) -> np.ndarray:
        X = self._check_features(X)
        out = np.full(X.shape[0], self.intercept)
        for i, (b, c) in enumerate(zip(self.bases, self.coefs)):
            out += b.design_matrix(X[:, i]) @ c
        return out

    def negated(self) -> "AdditiveSplineTransition":
        return AdditiveSplineTransition(
            self.bases,
            -self.intercept,
            tuple(-c for c in self.coefs),
            self.penalties,
            self.link_kind,
        )


@dataclass(frozen=True)
class KernelTransition(TransitionFunction):
    """f(x) = sum_i coef_i k(x, anchor_i), an RKHS expansion over anchor points."""

    spec: KernelSpec
    coef: np.ndarray
    penalty: float = 0.0
    link_kind: str = "logistic"
    variant = "rkhs"

    def __post_init__(self):
        if self.spec.anchors is None:
            raise ConfigurationError("kernel transition requires anchors on its KernelSpec")
        coef = as_float_vector(self.coef, "coef", length=self.spec.anchors.shape[0])
        object.__setattr__(self, "coef", coef)

    @property
    def n_features(self) -> int:
        return self.spec.anchors.shape[1]

    def evaluate(self, X) -> np.ndarray:
        X = self._check_features(X)
        return kernel_gram(self.spec, X, self.spec.anchors) @ self.coef

    def negated(self) -> "KernelTransition":
        return KernelTransition(self.spec, -self.coef, self.penalty, self.link_kind)


@dataclass(frozen=True)
class FunctionTransition(TransitionFunction):
    """Wraps an arbitrary callable; used for simulation ground truths."""

    func: Callable[[np.ndarray], np.ndarray]
    n_features: int = 2
    link_kind: str = "logistic"
    variant: str = field(default="custom")

    def evaluate(self, X) -> np.ndarray:
        X = self._check_features(X)
        out = np.asarray(self.func(X), dtype=np.float64).reshape(-1)
        if out.size != X.shape[0]:
            raise DataValidationError(
                f"custom transition returned {out.size} values for {X.shape[0]} rows"
            )
        return out

    def negated(self) -> "FunctionTransition":
        inner = self.func
        return FunctionTransition(
            lambda X: -np.asarray(inner(X), dtype=np.float64).reshape(-1),
            self.n_features,
            self.link_kind,
            self.variant,
        )


@dataclass(frozen=True)
class ModelParameters:
    """Full parameter set: per-regime emissions, initial distribution, transitions.

    f0 drives p01(x) = P(S_t=1 | S_{t-1}=0, x); f1 drives p11(x).
    """

    emissions: tuple[RegimeEmission, RegimeEmission]
    pi: np.ndarray
    f0: TransitionFunction
    f1: TransitionFunction

    def __post_init__(self):
        emissions = tuple(self.emissions)
        if len(emissions) != 2:
            raise ConfigurationError(f"exactly 2 regimes supported, got {len(emissions)}")
        if emissions[0].n_series != emissions[1].n_series:
            raise DataValidationError("regime emissions disagree on series dimension")
        pi = as_float_vector(self.pi, "pi", length=2)
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-12:
            raise DataValidationError(f"pi must be a probability vector, got {pi}")
        object.__setattr__(self, "emissions", emissions)
        object.__setattr__(self, "pi", pi)

    @property
    def n_series(self) -> int:
        return self.emissions[0].n_series


def transition_matrices(f0: TransitionFunction, f1: TransitionFunction, X) -> np.ndarray:
    """Row-stochastic 2×2 matrices P[i] for each covariate row, P[i][j, 1] = p_{j1}(x_i)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    p01 = link(f0.link_kind, f0.evaluate(X))
    p11 = link(f1.link_kind, f1.evaluate(X))
    out = np.empty((X.shape[0], 2, 2))
    out[:, 0, 0] = 1.0 - p01
    out[:, 0, 1] = p01
    out[:, 1, 0] = 1.0 - p11
    out[:, 1, 1] = p11
    return out


def transition_probs(f0: TransitionFunction, f1: TransitionFunction, x_prev) -> np.ndarray:
    """Single-step transition matrix at one covariate vector."""
    x_prev = as_float_vector(x_prev, "x_prev")
    return transition_matrices(f0, f1, x_prev[None, :])[0]
