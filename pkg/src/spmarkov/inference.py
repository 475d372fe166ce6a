"""Exact posterior inference for the switching model via scaled forward-backward.

Scaling uses per-step normalization constants c_t together with a per-step
max-shift of the log emission densities, so the log-likelihood is recovered
as sum(log c_t) + sum(m_t) without underflow for long series.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_float_matrix
from .exceptions import DataValidationError, NumericalError
from .model import (
    ModelParameters,
    TimeSeriesDataset,
    emission_logdensities,
    transition_matrices,
)


@dataclass(frozen=True)
class PosteriorSummary:
    """Smoothed state posteriors.

    z[t, j] = P(S_t = j | data); xi[t, j, k] = P(S_t = j, S_{t+1} = k | data)
    for t = 0..T-2; loglik is the observed-data log-likelihood.
    """

    z: np.ndarray
    xi: np.ndarray
    loglik: float

    def __post_init__(self):
        z = as_float_matrix(self.z, "z")
        xi = np.asarray(self.xi, dtype=np.float64)
        if z.shape[1] != 2:
            raise DataValidationError(f"z must have 2 columns, got {z.shape[1]}")
        if xi.shape != (z.shape[0] - 1, 2, 2):
            raise DataValidationError(
                f"xi must have shape ({z.shape[0] - 1}, 2, 2), got {xi.shape}"
            )
        if not np.all(np.isfinite(xi)):
            raise DataValidationError("xi contains non-finite entries")
        if np.any(z < -1e-12) or np.max(np.abs(z.sum(axis=1) - 1.0)) > 1e-8:
            raise DataValidationError("z rows must sum to 1")
        if np.any(xi < -1e-12) or np.max(np.abs(xi.sum(axis=(1, 2)) - 1.0)) > 1e-8:
            raise DataValidationError("xi slices must sum to 1")
        xi = xi.copy()
        xi.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "loglik", float(self.loglik))

    @property
    def n_obs(self) -> int:
        return self.z.shape[0]


def _log_emissions(data: TimeSeriesDataset, params: ModelParameters) -> np.ndarray:
    """(T, 2) log emission densities; the first row conditions on y_0 := y_1."""
    if data.n_series != params.n_series:
        raise DataValidationError(
            f"data has {data.n_series} series but parameters expect {params.n_series}"
        )
    ylag = np.vstack([data.y[:1], data.y[:-1]])
    return np.stack(
        [emission_logdensities(e, data.y, ylag) for e in params.emissions], axis=1
    )


def _scaled_emissions(logb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-step max-shift: returns (exp(logb - m[:, None]), m)."""
    m = logb.max(axis=1)
    return np.exp(logb - m[:, None]), m


def _forward(
    btil: np.ndarray, shifts: np.ndarray, trans: np.ndarray, pi: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Scaled forward pass shared by smoothing and likelihood evaluation.

    Returns normalized forward variables alpha (T×2), scale factors c (T,),
    and the log-likelihood sum(log c) + sum(shifts).
    """
    t_len = btil.shape[0]
    alpha = np.empty((t_len, 2))
    c = np.empty(t_len)
    a = pi * btil[0]
    c[0] = a.sum()
    if not np.isfinite(c[0]) or c[0] <= 0.0:
        raise NumericalError("forward recursion degenerate at t=1 (zero scale)")
    alpha[0] = a / c[0]
    for t in range(1, t_len):
        a = (alpha[t - 1] @ trans[t - 1]) * btil[t]
        c[t] = a.sum()
        if not np.isfinite(c[t]) or c[t] <= 0.0:
            raise NumericalError(f"forward recursion degenerate at t={t + 1} (zero scale)")
        alpha[t] = a / c[t]
    return alpha, c, float(np.log(c).sum() + shifts.sum())


def forward_backward(data: TimeSeriesDataset, params: ModelParameters) -> PosteriorSummary:
    """Exact smoothed posteriors z, xi and the observed-data log-likelihood."""
    logb = _log_emissions(data, params)
    btil, shifts = _scaled_emissions(logb)
    trans = transition_matrices(params.f0, params.f1, data.x[:-1])
    alpha, c, loglik = _forward(btil, shifts, trans, params.pi)

    t_len = data.n_obs
    beta = np.empty((t_len, 2))
    beta[-1] = 1.0
    for t in range(t_len - 2, -1, -1):
        beta[t] = trans[t] @ (btil[t + 1] * beta[t + 1]) / c[t + 1]

    z = alpha * beta
    z /= z.sum(axis=1, keepdims=True)

    num = alpha[:-1, :, None] * trans * (btil[1:] * beta[1:])[:, None, :]
    den = num.sum(axis=(1, 2))
    tiny = den < 1e-300
    if np.any(tiny):
        peak = num[tiny].max(axis=(1, 2))
        if np.any(peak <= 0.0):
            raise NumericalError("pairwise posterior numerator vanished entirely")
        num[tiny] /= peak[:, None, None]
        den = num.sum(axis=(1, 2))
    xi = num / den[:, None, None]
    return PosteriorSummary(z=z, xi=xi, loglik=loglik)


def observed_loglik(data: TimeSeriesDataset, params: ModelParameters) -> float:
    """Observed-data log-likelihood via the same forward pass as forward_backward."""
    logb = _log_emissions(data, params)
    btil, shifts = _scaled_emissions(logb)
    trans = transition_matrices(params.f0, params.f1, data.x[:-1])
    return _forward(btil, shifts, trans, params.pi)[2]
