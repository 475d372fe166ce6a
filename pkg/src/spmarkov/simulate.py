"""Synthetic data generation and evaluation metrics.

Two built-in ground truths share the same pair of Gaussian VAR(1) regimes but
differ in how covariates drive the switching: a nonlinear pair of log-odds
surfaces (sinusoids, curvature, an interaction) and a linear pair that any
parametric fit can represent exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_state_vector
from .exceptions import ConfigurationError, DataValidationError
from .inference import PosteriorSummary, observed_loglik
from .model import (
    FunctionTransition,
    LinearTransition,
    ModelParameters,
    RegimeEmission,
    TimeSeriesDataset,
    link,
)

#: Onset timing errors: matching window and per-miss cost, in time steps.
TIMING_WINDOW = 12


def _regime_emissions() -> tuple[RegimeEmission, RegimeEmission]:
    e0 = RegimeEmission(
        mu=np.array([-1.0, 0.0, 0.5]),
        A=0.3 * np.eye(3),
        Sigma=np.eye(3),
    )
    e1 = RegimeEmission(
        mu=np.array([1.0, -0.5, 0.0]),
        A=0.2 * np.eye(3),
        Sigma=np.diag([1.2, 0.8, 1.0]),
    )
    return e0, e1


def nonlinear_truth() -> ModelParameters:
    """Smooth nonlinear switching surfaces over two covariates."""

    def f0(X):
        return 2.0 * np.sin(np.pi * X[:, 0]) - 1.5 * X[:, 1] ** 2 + 0.5

    def f1(X):
        return -2.0 * np.cos(np.pi * X[:, 0]) + X[:, 0] * X[:, 1]

    return ModelParameters(
        emissions=_regime_emissions(),
        pi=np.array([0.5, 0.5]),
        f0=FunctionTransition(f0, n_features=2, variant="nonlinear-truth"),
        f1=FunctionTransition(f1, n_features=2, variant="nonlinear-truth"),
    )


def linear_truth() -> ModelParameters:
    """Linear switching surfaces; the parametric logit variant is well specified."""
    return ModelParameters(
        emissions=_regime_emissions(),
        pi=np.array([0.5, 0.5]),
        f0=LinearTransition(np.array([-1.0, 1.5, -1.0])),
        f1=LinearTransition(np.array([0.0, 1.0, 1.0])),
    )


TRUTHS = {"nonlinear": nonlinear_truth, "linear": linear_truth}


@dataclass(frozen=True)
class GroundTruth:
    """True generating parameters and the realized state path."""

    params: ModelParameters
    states: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "states", as_state_vector(self.states, "states"))


def simulate_dataset(
    n_obs: int,
    seed: int | np.random.SeedSequence,
    truth: str | ModelParameters = "nonlinear",
) -> tuple[TimeSeriesDataset, GroundTruth]:
    """Draw one realization of the switching model.

    Covariates are iid standard normal; the pre-sample observation is zero.
    The generator is counter-based (Philox), so a SeedSequence spawned per
    replication yields independent streams regardless of execution order.
    """
    if n_obs < 2:
        raise ConfigurationError(f"n_obs must be >= 2, got {n_obs}")
    if isinstance(truth, str):
        if truth not in TRUTHS:
            raise ConfigurationError(
                f"unknown truth {truth!r}; choose from {sorted(TRUTHS)}"
            )
        params = TRUTHS[truth]()
    else:
        params = truth
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(ss))

    d = params.n_series
    n_cov = max(params.f0.n_features, 1)
    x = rng.standard_normal((n_obs, n_cov))
    states = np.empty(n_obs, dtype=np.int64)
    y = np.empty((n_obs, d))

    chols = [np.linalg.cholesky(e.Sigma) for e in params.emissions]
    states[0] = rng.choice(2, p=params.pi)
    y_prev = np.zeros(d)
    for t in range(n_obs):
        if t > 0:
            f = params.f1 if states[t - 1] == 1 else params.f0
            p_to_1 = link(f.link_kind, float(f.evaluate(x[t - 1 : t])[0]))
            states[t] = 1 if rng.random() < p_to_1 else 0
        e = params.emissions[states[t]]
        y[t] = e.mu + e.A @ y_prev + chols[states[t]] @ rng.standard_normal(d)
        y_prev = y[t]
    return TimeSeriesDataset(y=y, x=x), GroundTruth(params=params, states=states)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def classification_accuracy(post: PosteriorSummary | np.ndarray, true_states) -> float:
    """Hard-assignment accuracy, maximized over the two label permutations."""
    true_states = as_state_vector(true_states, "true_states")
    if isinstance(post, PosteriorSummary):
        hard = np.argmax(post.z, axis=1)
    else:
        hard = as_state_vector(post, "states")
    if hard.size != true_states.size:
        raise DataValidationError(
            f"state paths differ in length: {hard.size} vs {true_states.size}"
        )
    direct = float(np.mean(hard == true_states))
    return max(direct, 1.0 - direct)


def regime_onsets(states) -> np.ndarray:
    """Times t with states[t] = 1 and states[t-1] = 0 (entries into regime 1)."""
    states = as_state_vector(states, "states")
    return np.where((states[1:] == 1) & (states[:-1] == 0))[0] + 1


def mean_abs_timing_error(
    pred_states, true_states, window: int = TIMING_WINDOW
) -> float:
    """Mean absolute onset timing error with greedy one-to-one matching.

    Candidate pairs within the window are matched globally nearest-first;
    every unmatched onset (either side) costs the window itself, and the
    total is divided by the number of true onsets. With no true onsets the
    error is 0 when nothing was predicted and the window otherwise.
    """
    true_on = regime_onsets(true_states)
    pred_on = regime_onsets(pred_states)
    if true_on.size == 0:
        return 0.0 if pred_on.size == 0 else float(window)
    pairs = sorted(
        (abs(int(p) - int(t)), ti, pi)
        for ti, t in enumerate(true_on)
        for pi, p in enumerate(pred_on)
        if abs(int(p) - int(t)) <= window
    )
    used_true: set[int] = set()
    used_pred: set[int] = set()
    total = 0.0
    for dist, ti, pi in pairs:
        if ti in used_true or pi in used_pred:
            continue
        used_true.add(ti)
        used_pred.add(pi)
        total += dist
    unmatched = (true_on.size - len(used_true)) + (pred_on.size - len(used_pred))
    return float((total + window * unmatched) / true_on.size)


def heldout_loglik(params: ModelParameters, holdout: TimeSeriesDataset) -> float:
    """Log-likelihood of a held-out window under fitted parameters.

    The window is scored as a fresh series: filtering restarts from pi and
    the first observation conditions on itself as its own lag.
    """
    return observed_loglik(holdout, params)
