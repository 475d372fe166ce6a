"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: validation and configuration problems
exit with 1, I/O problems with 2, and numerical failures with 3.
"""

from __future__ import annotations


class SpmarkovError(Exception):
    """Base class for all errors raised by this package."""


class DataValidationError(SpmarkovError, ValueError):
    """Input data violates a documented precondition (shape, finiteness, schema)."""


class ConfigurationError(SpmarkovError, ValueError):
    """A configuration value is outside its legal range or inconsistent."""


class NumericalError(SpmarkovError, ArithmeticError):
    """A numerical computation failed (singular system, underflow, non-PD matrix)."""


class DegenerateRegimeError(NumericalError):
    """A regime has too little effective posterior mass to be re-estimated."""

    def __init__(self, regime: int, effective_samples: float, threshold: float):
        self.regime = regime
        self.effective_samples = effective_samples
        self.threshold = threshold
        super().__init__(
            f"regime {regime} has effective sample size "
            f"{effective_samples:.6g} below threshold {threshold:.6g}"
        )


class InitializationError(SpmarkovError, RuntimeError):
    """Model initialization could not produce two usable clusters."""
