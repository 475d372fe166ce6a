"""Estimator wrapper with the usual fit / predict / score surface."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .em import EMConfig, run_em
from .inference import forward_backward, observed_loglik
from .model import TimeSeriesDataset, transition_matrices


class MarkovSwitchingVAR(BaseEstimator):
    """Two-regime Markov-switching VAR(1) with covariate-driven transitions.

    Parameters mirror EMConfig; see its docstring for semantics. After
    fitting, ``params_`` holds the model, ``posterior_`` the smoothed training
    posteriors, and ``loglik_trace_`` the per-iteration log-likelihoods.
    """

    def __init__(
        self,
        variant: str = "spline",
        max_iter: int = 500,
        tol: float = 1e-6,
        seed: int = 0,
        n_basis: int = 8,
        degree: int = 3,
        kernel_family: str = "squared-exponential",
        bandwidth: float | None = None,
        bandwidth_grid: tuple[float, ...] | None = None,
        nystrom_landmarks: int | None = None,
    ):
        self.variant = variant
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed
        self.n_basis = n_basis
        self.degree = degree
        self.kernel_family = kernel_family
        self.bandwidth = bandwidth
        self.bandwidth_grid = bandwidth_grid
        self.nystrom_landmarks = nystrom_landmarks

    def _config(self) -> EMConfig:
        return EMConfig(
            variant=self.variant,
            max_iter=self.max_iter,
            tol=self.tol,
            seed=self.seed,
            n_basis=self.n_basis,
            degree=self.degree,
            kernel_family=self.kernel_family,
            bandwidth=self.bandwidth,
            bandwidth_grid=self.bandwidth_grid,
            nystrom_landmarks=self.nystrom_landmarks,
        )

    def fit(self, y, x) -> "MarkovSwitchingVAR":
        """Fit by generalized EM on the series y (T×d) with covariates x (T×p)."""
        data = TimeSeriesDataset(y=y, x=x)
        result = run_em(data, self._config())
        self.result_ = result
        self.params_ = result.params
        self.posterior_ = result.posterior
        self.loglik_trace_ = result.loglik_trace
        self.loglik_ = result.loglik
        self.converged_ = result.converged
        self.n_iter_ = result.n_iter
        return self

    def predict_proba(self, y=None, x=None) -> np.ndarray:
        """Smoothed regime probabilities (T×2); training ones when y, x omitted."""
        check_is_fitted(self, "params_")
        if y is None and x is None:
            return self.posterior_.z
        post = forward_backward(TimeSeriesDataset(y=y, x=x), self.params_)
        return post.z

    def predict(self, y=None, x=None) -> np.ndarray:
        """Most probable regime per time point under the smoothed posterior."""
        return np.argmax(self.predict_proba(y, x), axis=1)

    def score(self, y, x) -> float:
        """Observed-data log-likelihood of a new series under the fitted model."""
        check_is_fitted(self, "params_")
        return observed_loglik(TimeSeriesDataset(y=y, x=x), self.params_)

    def predict_transition(self, x) -> np.ndarray:
        """Transition probabilities to regime 1 at covariate rows x: columns (p01, p11)."""
        check_is_fitted(self, "params_")
        mats = transition_matrices(self.params_.f0, self.params_.f1, np.asarray(x))
        return mats[:, :, 1]

    def transition_logodds(self, x) -> np.ndarray:
        """Fitted log-odds surfaces at covariate rows x: columns (f0, f1)."""
        check_is_fitted(self, "params_")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        return np.column_stack(
            [self.params_.f0.evaluate(x), self.params_.f1.evaluate(x)]
        )
