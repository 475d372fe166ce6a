"""Design matrices, penalty matrices, and kernel Gram machinery.

Three function representations are supported for the transition log-odds:
univariate/tensor-product B-spline bases with a second-difference coefficient
penalty, additive per-covariate spline bases, and kernel (RKHS) expansions
anchored at training covariates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property, reduce

import numpy as np
from scipy.interpolate import BSpline
from scipy.spatial.distance import cdist, pdist

from .exceptions import ConfigurationError
from ._validation import as_float_matrix

#: Diagonal jitter added to kernel Gram matrices before factorization.
GRAM_JITTER = 1e-8

KERNEL_FAMILIES = ("squared-exponential", "matern-3/2", "matern-5/2")


def second_diff_penalty(m: int) -> np.ndarray:
    """Return the M×M penalty P = D2' D2 built from second differences.

    P annihilates constant and linear coefficient vectors, leaving curvature
    penalized. Requires at least 3 coefficients.
    """
    if m < 3:
        raise ConfigurationError(f"second-difference penalty needs M >= 3, got {m}")
    d2 = np.zeros((m - 2, m))
    for i in range(m - 2):
        d2[i, i : i + 3] = (1.0, -2.0, 1.0)
    return d2.T @ d2


@dataclass(frozen=True)
class SplineBasis:
    """Univariate B-spline basis on strictly increasing breakpoints.

    Parameters
    ----------
    knots : array
        Strictly increasing breakpoints including both boundaries. The
        clamped knot vector repeats each boundary ``degree`` extra times.
    degree : int
        Polynomial degree (3 = cubic).
    penalty_matrix : array, optional
        M×M symmetric PSD penalty. Defaults to the second-difference
        penalty when M >= 3, otherwise zeros.
    """

    knots: np.ndarray
    degree: int = 3
    penalty_matrix: np.ndarray | None = None

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=np.float64)
        if knots.ndim != 1 or knots.size < 2:
            raise ConfigurationError("need at least 2 knots (both boundaries)")
        if self.degree < 0:
            raise ConfigurationError(f"degree must be >= 0, got {self.degree}")
        if np.any(np.diff(knots) <= 0):
            raise ConfigurationError("knots must be strictly increasing")
        if knots.size + 2 * self.degree < self.degree + 2:
            raise ConfigurationError(
                f"fewer than degree+2 knots: got {knots.size} for degree {self.degree}"
            )
        knots = knots.copy()
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        if self.penalty_matrix is None:
            m = self.n_basis
            pen = second_diff_penalty(m) if m >= 3 else np.zeros((m, m))
        else:
            pen = np.asarray(self.penalty_matrix, dtype=np.float64)
        if pen.shape != (self.n_basis, self.n_basis):
            raise ConfigurationError(
                f"penalty must be {self.n_basis}x{self.n_basis}, got {pen.shape}"
            )
        if np.max(np.abs(pen - pen.T)) > 1e-10:
            raise ConfigurationError("penalty matrix must be symmetric")
        if np.linalg.eigvalsh((pen + pen.T) / 2).min() < -1e-10:
            raise ConfigurationError("penalty matrix must be positive semi-definite")
        pen = (pen + pen.T) / 2
        pen.setflags(write=False)
        object.__setattr__(self, "penalty_matrix", pen)

    @property
    def n_basis(self) -> int:
        """Number of basis functions: interior knots + degree + 1."""
        return (self.knots.size - 2) + self.degree + 1

    @property
    def n_features(self) -> int:
        return 1

    @cached_property
    def _full_knots(self) -> np.ndarray:
        k = self.degree
        return np.concatenate(
            [np.repeat(self.knots[0], k), self.knots, np.repeat(self.knots[-1], k)]
        )

    @cached_property
    def _spline(self) -> BSpline:
        return BSpline(self._full_knots, np.eye(self.n_basis), self.degree)

    @cached_property
    def _boundary_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        lo = np.array([self.knots[0]])
        hi = np.array([self.knots[-1]])
        val_lo = self._spline(lo)[0]
        val_hi = self._spline(hi)[0]
        if self.degree >= 1:
            deriv = self._spline.derivative()
            d_lo = deriv(lo)[0]
            d_hi = deriv(hi)[0]
        else:
            d_lo = np.zeros(self.n_basis)
            d_hi = np.zeros(self.n_basis)
        return val_lo, d_lo, val_hi, d_hi

    def design_matrix(self, x) -> np.ndarray:
        """Evaluate all basis functions at ``x``; linear extrapolation outside the knots."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        lo, hi = self.knots[0], self.knots[-1]
        clipped = np.clip(x, lo, hi)
        out = self._spline(clipped)
        left = x < lo
        right = x > hi
        if np.any(left) or np.any(right):
            val_lo, d_lo, val_hi, d_hi = self._boundary_rows
            if np.any(left):
                out[left] = val_lo + (x[left] - lo)[:, None] * d_lo
            if np.any(right):
                out[right] = val_hi + (x[right] - hi)[:, None] * d_hi
        return out


@dataclass(frozen=True)
class TensorSplineBasis:
    """Tensor product of univariate spline bases for multivariate covariates.

    The combined penalty is the Kronecker sum of the per-dimension penalties,
    so curvature is penalized along each covariate axis separately.
    """

    parts: tuple[SplineBasis, ...]

    def __post_init__(self):
        if not self.parts:
            raise ConfigurationError("tensor basis needs at least one part")
        object.__setattr__(self, "parts", tuple(self.parts))

    @property
    def n_basis(self) -> int:
        return int(np.prod([b.n_basis for b in self.parts]))

    @property
    def n_features(self) -> int:
        return len(self.parts)

    @cached_property
    def penalty_matrix(self) -> np.ndarray:
        sizes = [b.n_basis for b in self.parts]
        total = int(np.prod(sizes))
        pen = np.zeros((total, total))
        for i, b in enumerate(self.parts):
            mats = [np.eye(m) for m in sizes]
            mats[i] = b.penalty_matrix
            pen += reduce(np.kron, mats)
        pen.setflags(write=False)
        return pen

    def design_matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[1] != len(self.parts):
            raise ConfigurationError(
                f"tensor basis expects {len(self.parts)} covariates, got {X.shape[1]}"
            )
        out = self.parts[0].design_matrix(X[:, 0])
        for i, b in enumerate(self.parts[1:], start=1):
            block = b.design_matrix(X[:, i])
            out = (out[:, :, None] * block[:, None, :]).reshape(X.shape[0], -1)
        return out


def bspline_design(basis: SplineBasis | TensorSplineBasis, X) -> np.ndarray:
    """Design matrix of ``basis`` evaluated at covariate rows ``X``."""
    X = np.asarray(X, dtype=np.float64)
    if isinstance(basis, TensorSplineBasis):
        return basis.design_matrix(X)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ConfigurationError(
                f"univariate basis expects a single covariate column, got {X.shape[1]}"
            )
        X = X[:, 0]
    return basis.design_matrix(X)


def make_spline_basis(values, n_basis: int, degree: int = 3) -> SplineBasis:
    """Quantile-knot basis for observed values: equally spaced quantile interior knots."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size < 2:
        raise ConfigurationError("need at least 2 observations to place knots")
    n_interior = n_basis - degree - 1
    if n_interior < 0:
        raise ConfigurationError(
            f"n_basis={n_basis} too small for degree {degree} (needs >= {degree + 1})"
        )
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        raise ConfigurationError("cannot place knots on a constant covariate")
    if n_interior:
        probs = np.arange(1, n_interior + 1) / (n_interior + 1)
        interior = np.quantile(values, probs)
    else:
        interior = np.empty(0)
    knots = np.unique(np.concatenate([[lo], interior, [hi]]))
    if knots.size != n_interior + 2:
        raise ConfigurationError(
            "duplicate quantile knots; reduce n_basis or jitter the covariate"
        )
    return SplineBasis(knots=knots, degree=degree)


@dataclass(frozen=True)
class KernelSpec:
    """Stationary kernel family with bandwidth and optional anchor points."""

    family: str = "squared-exponential"
    bandwidth: float = 1.0
    anchors: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ConfigurationError(
                f"unknown kernel family {self.family!r}; choose from {KERNEL_FAMILIES}"
            )
        if not np.isfinite(self.bandwidth) or self.bandwidth <= 0:
            raise ConfigurationError(f"bandwidth must be > 0, got {self.bandwidth}")
        if self.anchors is not None:
            object.__setattr__(
                self, "anchors", as_float_matrix(self.anchors, "anchors")
            )

    def with_anchors(self, anchors) -> "KernelSpec":
        return KernelSpec(self.family, self.bandwidth, anchors)


def kernel_gram(spec: KernelSpec, X1, X2=None) -> np.ndarray:
    """Gram matrix K[i, j] = kernel(X1_i, X2_j); symmetric with unit diagonal for X2=None."""
    X1 = np.asarray(X1, dtype=np.float64)
    if X1.ndim == 1:
        X1 = X1[:, None]
    symmetric = X2 is None
    X2 = X1 if symmetric else np.asarray(X2, dtype=np.float64)
    if X2.ndim == 1:
        X2 = X2[:, None]
    if X1.shape[1] != X2.shape[1]:
        raise ConfigurationError(
            f"covariate dimension mismatch: {X1.shape[1]} vs {X2.shape[1]}"
        )
    r = cdist(X1, X2) / spec.bandwidth
    if spec.family == "squared-exponential":
        K = np.exp(-0.5 * r**2)
    elif spec.family == "matern-3/2":
        sr = np.sqrt(3.0) * r
        K = (1.0 + sr) * np.exp(-sr)
    else:  # matern-5/2
        sr = np.sqrt(5.0) * r
        K = (1.0 + sr + sr**2 / 3.0) * np.exp(-sr)
    if symmetric:
        K = (K + K.T) / 2
        np.fill_diagonal(K, 1.0)
    return K


def median_pairwise_bandwidth(X) -> float:
    """Median nonzero pairwise Euclidean distance (default kernel length-scale)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    d = pdist(X)
    d = d[d > 0]
    if d.size == 0:
        raise ConfigurationError("all covariate rows identical; no usable bandwidth")
    return float(np.median(d))


def nystrom_factor(spec: KernelSpec, X, m: int, seed: int) -> np.ndarray:
    """Low-rank factor Z (T×r) with ZZ' approximating the full Gram matrix.

    Landmarks are a seeded uniform sample without replacement (the prefix of a
    random permutation, so landmark sets are nested across increasing m).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    t = X.shape[0]
    if m < 1 or m > t:
        raise ConfigurationError(f"m must be in [1, {t}], got {m}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    landmarks = rng.permutation(t)[:m]
    c = kernel_gram(spec, X, X[landmarks])
    w = kernel_gram(spec, X[landmarks])
    eigval, eigvec = np.linalg.eigh(w)
    keep = eigval > eigval[-1] * 1e-12
    if not np.any(keep):
        raise ConfigurationError("landmark Gram block is numerically zero")
    return c @ (eigvec[:, keep] / np.sqrt(eigval[keep]))
