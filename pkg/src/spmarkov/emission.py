"""Closed-form M-step updates for the Gaussian VAR(1) emission parameters.

Each regime solves a weighted least-squares regression of y_t on [1, y_{t-1}]
with the smoothed posterior probabilities as weights, then estimates the
innovation covariance from the weighted residuals.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg.lapack import dpotrf

from .exceptions import DegenerateRegimeError, NumericalError
from .inference import PosteriorSummary
from .model import EPS_PROB, RegimeEmission, TimeSeriesDataset


def _weighted_var_fit(
    Y: np.ndarray, Ylag: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Weighted LS of Y on [1, Ylag]: returns (mu, A, Sigma)."""
    d = Y.shape[1]
    design = np.hstack([np.ones((Y.shape[0], 1)), Ylag])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], Y * sw[:, None], rcond=None)
    mu = coef[0]
    A = coef[1:].T
    resid = Y - design @ coef
    total = w.sum()
    Sigma = (resid * w[:, None]).T @ resid / total
    Sigma = (Sigma + Sigma.T) / 2
    _, info = dpotrf(Sigma, lower=1)
    if info > 0:
        ridge = max(1e-8 * np.trace(Sigma) / d, 1e-12)
        Sigma = Sigma + ridge * np.eye(d)
        _, info = dpotrf(Sigma, lower=1)
        if info > 0:
            raise NumericalError(
                f"residual covariance not repairable (Cholesky pivot {info})"
            )
    return mu, A, Sigma


def update_emissions(
    data: TimeSeriesDataset,
    post: PosteriorSummary,
    previous: tuple[RegimeEmission, RegimeEmission] | None = None,
) -> tuple[RegimeEmission, RegimeEmission]:
    """Per-regime weighted VAR(1) fits using smoothed probabilities as weights.

    A regime whose effective sample sum(z[:, j]) falls below d + 2 cannot
    support the regression: with no fallback this raises DegenerateRegimeError,
    otherwise the previous emission is kept (frozen) for that regime.
    """
    Y = data.y
    Ylag = np.vstack([Y[:1], Y[:-1]])
    d = data.n_series
    threshold = float(d + 2)
    out = []
    for j in range(2):
        w = post.z[:, j]
        effective = float(w.sum())
        if effective < threshold:
            if previous is None:
                raise DegenerateRegimeError(j, effective, threshold)
            out.append(previous[j])
            continue
        mu, A, Sigma = _weighted_var_fit(Y, Ylag, w)
        out.append(RegimeEmission(mu=mu, A=A, Sigma=Sigma))
    return out[0], out[1]


def update_initial(post: PosteriorSummary) -> np.ndarray:
    """Initial distribution update: the smoothed posterior at t=1, clamped."""
    pi = np.clip(post.z[0], EPS_PROB, 1.0 - EPS_PROB)
    return pi / pi.sum()
