"""Monte Carlo comparison of transition-function variants on simulated data.

Replications are independent Philox streams spawned from one base seed, so
results are identical whatever the worker count; each worker also pins its
BLAS thread pool to one thread because reduction order inside multi-threaded
BLAS kernels would otherwise perturb low-order bits across machines.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from statistics import median

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .em import EMConfig, FitResult, align_labels, canonical_variant, run_em
from .exceptions import ConfigurationError
from .io import fmt_float
from .simulate import (
    classification_accuracy,
    heldout_loglik,
    mean_abs_timing_error,
    simulate_dataset,
)

#: Columns of the per-replication CSV; wall-clock time is deliberately kept
#: out of the files so reruns are byte-identical.
REPORT_COLUMNS = (
    "rep",
    "variant",
    "loglik",
    "n_iter",
    "converged",
    "n_rollbacks",
    "accuracy",
    "timing_error",
    "heldout_loglik",
)

SUMMARY_COLUMNS = (
    "variant",
    "median_accuracy",
    "median_timing_error",
    "median_heldout_loglik",
    "median_loglik",
)


def default_workers() -> int:
    """Worker count from SPMARKOV_WORKERS, defaulting to 1."""
    raw = os.environ.get("SPMARKOV_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"SPMARKOV_WORKERS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigurationError(f"worker count must be >= 1, got {n}")
    return n


@dataclass(frozen=True)
class RunConfig:
    """Benchmark layout: replication count, series length, split, variants."""

    n_reps: int = 20
    n_obs: int = 1000
    holdout: int = 200
    seed: int = 0
    truth: str = "nonlinear"
    variants: tuple[str, ...] = ("linear-logit", "linear-probit", "spline", "rkhs")
    workers: int | None = None
    max_iter: int = 500
    tol: float = 1e-6
    n_basis: int = 8
    degree: int = 3
    kernel_family: str = "squared-exponential"
    bandwidth: float | None = None
    nystrom_landmarks: int | None = None

    def __post_init__(self):
        if self.n_reps < 1:
            raise ConfigurationError(f"n_reps must be >= 1, got {self.n_reps}")
        if self.holdout < 2:
            raise ConfigurationError(f"holdout must be >= 2, got {self.holdout}")
        if self.n_obs - self.holdout < 10:
            raise ConfigurationError(
                f"training window too short: n_obs={self.n_obs}, holdout={self.holdout}"
            )
        variants = tuple(canonical_variant(v) for v in self.variants)
        if not variants:
            raise ConfigurationError("at least one variant required")
        if len(set(variants)) != len(variants):
            raise ConfigurationError(f"duplicate variants in {variants}")
        object.__setattr__(self, "variants", variants)
        if self.workers is not None and self.workers < 1:
            raise ConfigurationError(f"workers must be >= 1, got {self.workers}")

    def em_config(self, variant: str) -> EMConfig:
        settings = dict(
            variant=variant,
            max_iter=self.max_iter,
            tol=self.tol,
            seed=self.seed,
            n_basis=self.n_basis,
            degree=self.degree,
        )
        if canonical_variant(variant) == "rkhs":
            settings.update(
                kernel_family=self.kernel_family,
                bandwidth=self.bandwidth,
                nystrom_landmarks=self.nystrom_landmarks,
            )
        return EMConfig(**settings)


@dataclass(frozen=True)
class ReplicationResult:
    """Metrics for one (replication, variant) cell."""

    rep: int
    variant: str
    loglik: float
    n_iter: int
    converged: bool
    n_rollbacks: int
    accuracy: float
    timing_error: float
    heldout_loglik: float
    seconds: float

    def csv_row(self) -> list[str]:
        return [
            str(self.rep),
            self.variant,
            fmt_float(self.loglik),
            str(self.n_iter),
            str(int(self.converged)),
            str(self.n_rollbacks),
            fmt_float(self.accuracy),
            fmt_float(self.timing_error),
            fmt_float(self.heldout_loglik),
        ]


@dataclass(frozen=True)
class ExperimentReport:
    """All replication rows plus the configuration that produced them."""

    config: RunConfig
    rows: tuple[ReplicationResult, ...] = field(default_factory=tuple)

    def for_variant(self, variant: str) -> list[ReplicationResult]:
        variant = canonical_variant(variant)
        return [r for r in self.rows if r.variant == variant]

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for variant in self.config.variants:
            rows = self.for_variant(variant)
            out[variant] = {
                "median_accuracy": median(r.accuracy for r in rows),
                "median_timing_error": median(r.timing_error for r in rows),
                "median_heldout_loglik": median(r.heldout_loglik for r in rows),
                "median_loglik": median(r.loglik for r in rows),
                "median_seconds": median(r.seconds for r in rows),
            }
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            for row in self.rows:
                writer.writerow(row.csv_row())

    def write_summary_csv(self, path) -> None:
        stats = self.summary()
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(SUMMARY_COLUMNS)
            for variant in self.config.variants:
                s = stats[variant]
                writer.writerow(
                    [variant]
                    + [fmt_float(s[c]) for c in SUMMARY_COLUMNS[1:]]
                )


def _fit_one(
    config: RunConfig, rep: int, variant: str, train, hold, true_train_states
) -> ReplicationResult:
    started = time.perf_counter()
    fit: FitResult = run_em(train, config.em_config(variant))
    seconds = time.perf_counter() - started
    params, post, _ = align_labels(fit.params, fit.posterior, true_train_states)
    hard = np.argmax(post.z, axis=1)
    return ReplicationResult(
        rep=rep,
        variant=variant,
        loglik=fit.loglik,
        n_iter=fit.n_iter,
        converged=fit.converged,
        n_rollbacks=fit.n_rollbacks,
        accuracy=classification_accuracy(post, true_train_states),
        timing_error=mean_abs_timing_error(hard, true_train_states),
        heldout_loglik=heldout_loglik(params, hold),
        seconds=seconds,
    )


def run_replication(config: RunConfig, rep: int) -> list[ReplicationResult]:
    """Simulate replication `rep` and fit every configured variant on it."""
    with threadpool_limits(limits=1):
        ss = np.random.SeedSequence(config.seed, spawn_key=(rep,))
        data, truth = simulate_dataset(config.n_obs, ss, config.truth)
        split = config.n_obs - config.holdout
        train = data.window(0, split)
        hold = data.window(split, config.n_obs)
        true_train_states = truth.states[:split]
        return [
            _fit_one(config, rep, variant, train, hold, true_train_states)
            for variant in config.variants
        ]


def run_benchmark(config: RunConfig, progress=None) -> ExperimentReport:
    """Run all replications, in parallel when configured, in replication order.

    The optional progress callback receives (rep, results) as replications
    complete; with multiple workers it fires after collection, in order.
    """
    workers = config.workers if config.workers is not None else default_workers()
    if workers == 1:
        per_rep = []
        for rep in range(config.n_reps):
            results = run_replication(config, rep)
            per_rep.append(results)
            if progress is not None:
                progress(rep, results)
    else:
        per_rep = Parallel(n_jobs=workers)(
            delayed(run_replication)(config, rep) for rep in range(config.n_reps)
        )
        if progress is not None:
            for rep, results in enumerate(per_rep):
                progress(rep, results)
    rows = tuple(result for results in per_rep for result in results)
    return ExperimentReport(config=config, rows=rows)
