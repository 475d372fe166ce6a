"""Spline bases, penalties, kernel Gram matrices, and the Nystrom factor."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.spatial.distance import cdist

from oracles import cox_de_boor_design
from spmarkov.basis import (
    KernelSpec,
    SplineBasis,
    TensorSplineBasis,
    bspline_design,
    kernel_gram,
    make_spline_basis,
    median_pairwise_bandwidth,
    nystrom_factor,
    second_diff_penalty,
)
from spmarkov.exceptions import ConfigurationError

KNOTS = np.array([0.0, 0.3, 1.1, 2.0, 3.5])


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_design_matches_cox_de_boor(degree):
    basis = SplineBasis(knots=KNOTS, degree=degree)
    rng = np.random.default_rng(0)
    x = rng.uniform(KNOTS[0] + 1e-9, KNOTS[-1] - 1e-9, size=40)
    assert_allclose(
        basis.design_matrix(x), cox_de_boor_design(KNOTS, degree, x), atol=1e-12
    )


def test_n_basis_counts_interior_plus_degree_plus_one():
    assert SplineBasis(knots=KNOTS, degree=3).n_basis == 3 + 3 + 1
    assert SplineBasis(knots=KNOTS[:2], degree=1).n_basis == 2
    assert SplineBasis(knots=KNOTS, degree=3).design_matrix(np.zeros(5)).shape == (5, 7)


def test_partition_of_unity_holds_everywhere():
    """Basis rows sum to one inside the knots and on the extrapolated tails."""
    basis = SplineBasis(knots=KNOTS, degree=3)
    x = np.concatenate([np.linspace(-2.0, 5.5, 61), KNOTS])
    assert_allclose(basis.design_matrix(x).sum(axis=1), 1.0, atol=1e-12)


def test_extrapolation_is_linear_and_continuous():
    basis = SplineBasis(knots=KNOTS, degree=3)
    hi = KNOTS[-1]
    rows = basis.design_matrix([hi, hi + 0.5, hi + 1.0, hi + 1.5])
    # equal spacing outside the boundary: second differences vanish exactly
    assert_allclose(rows[2] - rows[1], rows[1] - rows[0], atol=1e-12)
    assert_allclose(rows[3] - rows[2], rows[2] - rows[1], atol=1e-12)
    # slope continuity at the boundary against an interior finite difference
    eps = 1e-7
    inner_slope = (basis.design_matrix([hi])[0] - basis.design_matrix([hi - eps])[0]) / eps
    outer_slope = (rows[1] - rows[0]) / 0.5
    assert_allclose(outer_slope, inner_slope, atol=1e-4)

    lo = KNOTS[0]
    rows = basis.design_matrix([lo - 2.0, lo - 1.0, lo])
    assert_allclose(rows[2] - rows[1], rows[1] - rows[0], atol=1e-12)


def test_second_diff_penalty_quadratic_form():
    """v' P v equals the sum of squared second differences of v."""
    rng = np.random.default_rng(1)
    pen = second_diff_penalty(9)
    for _ in range(5):
        v = rng.standard_normal(9)
        direct = float(np.sum((v[2:] - 2.0 * v[1:-1] + v[:-2]) ** 2))
        assert_allclose(v @ pen @ v, direct, rtol=1e-12)
    assert_allclose(pen @ np.ones(9), 0.0, atol=1e-12)
    assert_allclose(pen @ np.arange(9.0), 0.0, atol=1e-12)
    assert np.linalg.eigvalsh(pen).min() > -1e-12
    with pytest.raises(ConfigurationError, match="M >= 3"):
        second_diff_penalty(2)


def test_spline_basis_default_penalty_and_validation():
    basis = SplineBasis(knots=KNOTS, degree=3)
    assert_allclose(basis.penalty_matrix, second_diff_penalty(basis.n_basis))
    assert_allclose(SplineBasis(knots=KNOTS[:2], degree=1).penalty_matrix, 0.0)
    with pytest.raises(ConfigurationError, match="strictly increasing"):
        SplineBasis(knots=np.array([0.0, 1.0, 1.0, 2.0]))
    with pytest.raises(ConfigurationError, match="at least 2 knots"):
        SplineBasis(knots=np.array([0.0]))
    with pytest.raises(ConfigurationError, match="symmetric"):
        SplineBasis(knots=KNOTS, degree=3, penalty_matrix=np.triu(np.ones((7, 7))))
    with pytest.raises(ConfigurationError, match="penalty must be"):
        SplineBasis(knots=KNOTS, degree=3, penalty_matrix=np.eye(4))
    with pytest.raises(ConfigurationError, match="positive semi-definite"):
        SplineBasis(knots=KNOTS, degree=3, penalty_matrix=-np.eye(7))


def test_tensor_design_rows_are_kronecker_products():
    b1 = SplineBasis(knots=np.array([-1.0, 0.0, 1.0]), degree=2)
    b2 = SplineBasis(knots=np.array([0.0, 2.0]), degree=3)
    tensor = TensorSplineBasis(parts=(b1, b2))
    assert tensor.n_basis == b1.n_basis * b2.n_basis
    rng = np.random.default_rng(2)
    X = rng.uniform(-1.0, 1.5, size=(10, 2))
    rows = tensor.design_matrix(X)
    r1 = b1.design_matrix(X[:, 0])
    r2 = b2.design_matrix(X[:, 1])
    for i in range(X.shape[0]):
        assert_allclose(rows[i], np.kron(r1[i], r2[i]), atol=1e-12)


def test_tensor_penalty_is_kronecker_sum():
    b1 = SplineBasis(knots=np.array([-1.0, 0.0, 1.0]), degree=2)
    b2 = SplineBasis(knots=np.array([0.0, 1.0, 2.0, 3.0]), degree=2)
    tensor = TensorSplineBasis(parts=(b1, b2))
    expected = np.kron(b1.penalty_matrix, np.eye(b2.n_basis)) + np.kron(
        np.eye(b1.n_basis), b2.penalty_matrix
    )
    assert_allclose(tensor.penalty_matrix, expected, atol=1e-12)


def test_bspline_design_accepts_column_matrix():
    basis = SplineBasis(knots=KNOTS, degree=3)
    x = np.linspace(0.1, 3.0, 8)
    assert_allclose(bspline_design(basis, x[:, None]), basis.design_matrix(x))
    with pytest.raises(ConfigurationError, match="single covariate"):
        bspline_design(basis, np.zeros((4, 2)))
    tensor = TensorSplineBasis(parts=(basis, basis))
    with pytest.raises(ConfigurationError, match="expects 2 covariates"):
        tensor.design_matrix(np.zeros((4, 3)))


def test_make_spline_basis_places_quantile_knots():
    rng = np.random.default_rng(3)
    values = rng.standard_normal(500)
    basis = make_spline_basis(values, n_basis=8, degree=3)
    assert basis.n_basis == 8
    interior = np.quantile(values, np.arange(1, 5) / 5.0)
    expected = np.concatenate([[values.min()], interior, [values.max()]])
    assert_allclose(basis.knots, expected)

    no_interior = make_spline_basis(values, n_basis=4, degree=3)
    assert no_interior.knots.size == 2


def test_make_spline_basis_rejects_degenerate_covariates():
    with pytest.raises(ConfigurationError, match="constant covariate"):
        make_spline_basis(np.ones(50), n_basis=6)
    lumpy = np.array([0.0] * 50 + [1.0] * 50)
    with pytest.raises(ConfigurationError, match="duplicate quantile"):
        make_spline_basis(lumpy, n_basis=8)
    with pytest.raises(ConfigurationError, match="too small"):
        make_spline_basis(np.linspace(0, 1, 20), n_basis=3, degree=3)


def _direct_kernel(family, X1, X2, bandwidth):
    r = cdist(X1, X2) / bandwidth
    if family == "squared-exponential":
        return np.exp(-0.5 * r**2)
    if family == "matern-3/2":
        return (1.0 + np.sqrt(3.0) * r) * np.exp(-np.sqrt(3.0) * r)
    return (1.0 + np.sqrt(5.0) * r + 5.0 * r**2 / 3.0) * np.exp(-np.sqrt(5.0) * r)


@pytest.mark.parametrize("family", ["squared-exponential", "matern-3/2", "matern-5/2"])
def test_kernel_gram_matches_direct_formula(family):
    rng = np.random.default_rng(4)
    X1 = rng.standard_normal((12, 2))
    X2 = rng.standard_normal((7, 2))
    spec = KernelSpec(family=family, bandwidth=0.8)
    assert_allclose(kernel_gram(spec, X1, X2), _direct_kernel(family, X1, X2, 0.8), atol=1e-12)
    gram = kernel_gram(spec, X1)
    assert_allclose(gram, gram.T, atol=0)
    assert_allclose(np.diag(gram), 1.0, atol=0)
    assert np.linalg.eigvalsh(gram).min() > -1e-10


def test_kernel_spec_validation():
    with pytest.raises(ConfigurationError, match="unknown kernel family"):
        KernelSpec(family="cauchy", bandwidth=1.0)
    with pytest.raises(ConfigurationError, match="bandwidth"):
        KernelSpec(bandwidth=0.0)
    spec = KernelSpec(bandwidth=2.0)
    anchored = spec.with_anchors(np.zeros((3, 2)))
    assert anchored.anchors.shape == (3, 2)
    assert spec.anchors is None
    with pytest.raises(ConfigurationError, match="dimension mismatch"):
        kernel_gram(spec, np.zeros((3, 2)), np.zeros((3, 1)))


def test_median_pairwise_bandwidth():
    assert median_pairwise_bandwidth(np.array([[0.0], [1.0], [3.0]])) == 2.0
    # zero distances from duplicated rows are ignored
    assert median_pairwise_bandwidth(np.array([[0.0], [0.0], [1.0]])) == 1.0
    with pytest.raises(ConfigurationError, match="identical"):
        median_pairwise_bandwidth(np.ones((5, 2)))


def test_nystrom_factor_exact_at_full_rank():
    rng = np.random.default_rng(5)
    X = rng.standard_normal((40, 2))
    spec = KernelSpec(bandwidth=1.2)
    gram = kernel_gram(spec, X)
    z = nystrom_factor(spec, X, m=40, seed=0)
    rel = np.linalg.norm(z @ z.T - gram) / np.linalg.norm(gram)
    assert rel <= 1e-6


def test_nystrom_error_non_increasing_in_landmarks():
    """Nested landmark prefixes make the approximation error monotone."""
    rng = np.random.default_rng(6)
    X = rng.standard_normal((60, 2))
    spec = KernelSpec(bandwidth=0.9)
    gram = kernel_gram(spec, X)
    errors = []
    for m in (6, 30, 60):
        z = nystrom_factor(spec, X, m=m, seed=3)
        errors.append(np.linalg.norm(z @ z.T - gram) / np.linalg.norm(gram))
    assert errors[0] >= errors[1] - 1e-12
    assert errors[1] >= errors[2] - 1e-12
    assert errors[2] <= 1e-6


def test_nystrom_rejects_bad_landmark_counts():
    spec = KernelSpec(bandwidth=1.0)
    X = np.zeros((5, 1)) + np.arange(5)[:, None]
    with pytest.raises(ConfigurationError, match="m must be in"):
        nystrom_factor(spec, X, m=0, seed=0)
    with pytest.raises(ConfigurationError, match="m must be in"):
        nystrom_factor(spec, X, m=6, seed=0)
