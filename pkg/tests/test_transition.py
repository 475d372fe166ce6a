"""Penalized IRLS transition fits: parametric, spline, additive, kernel, GCV."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import minimize
from scipy.special import expit, ndtr

from oracles import newton_weighted_logistic
from spmarkov.basis import (
    KernelSpec,
    SplineBasis,
    kernel_gram,
    make_spline_basis,
    median_pairwise_bandwidth,
)
from spmarkov.exceptions import (
    ConfigurationError,
    DataValidationError,
    NumericalError,
)
from spmarkov.inference import PosteriorSummary
from spmarkov.model import TimeSeriesDataset
from spmarkov.transition import (
    GCV_GRID,
    PseudoData,
    backfit_additive,
    build_pseudo_data,
    fit_parametric,
    irls_rkhs,
    irls_spline,
    kernel_hat_trace,
    penalized_gradient,
    penalized_objective,
    select_lambda_gcv,
    spline_hat_trace,
)


def make_pseudo(rng, t_len=60, p=2, beta=None):
    """Separation-free weighted binomial data with a linear signal."""
    X = rng.standard_normal((t_len, p))
    if beta is None:
        beta = rng.normal(0.0, 0.8, size=p + 1)
    eta = beta[0] + X @ beta[1:]
    ytil = np.clip(expit(eta) + rng.normal(0.0, 0.08, size=t_len), 0.02, 0.98)
    counts = rng.uniform(0.4, 1.6, size=t_len)
    return PseudoData(n=counts, ytil=ytil, X=X), np.asarray(beta)


def fd_gradient(design, qform, coef, pseudo, link_kind="logistic", offset=0.0):
    h = 1e-6
    out = np.empty(coef.size)
    for i in range(coef.size):
        bump = np.zeros(coef.size)
        bump[i] = h
        hi = penalized_objective(design, qform, coef + bump, pseudo, link_kind, offset)
        lo = penalized_objective(design, qform, coef - bump, pseudo, link_kind, offset)
        out[i] = (hi - lo) / (2.0 * h)
    return out


def relative_gradient_error(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)) / max(1.0, np.max(np.abs(analytic))))


# ---------------------------------------------------------------------------
# Pseudo-data construction
# ---------------------------------------------------------------------------


def test_build_pseudo_data_hand_case():
    z = np.array([[0.3, 0.7], [0.5, 0.5], [0.9, 0.1]])
    xi = z[:-1, :, None] * z[1:, None, :]
    post = PosteriorSummary(z=z, xi=xi, loglik=0.0)
    data = TimeSeriesDataset(y=np.zeros((3, 1)), x=np.arange(6.0).reshape(3, 2))
    p0 = build_pseudo_data(data, post, 0)
    # with outer-product pairings n_t = z[t, j] and ytil_t = z[t+1, 1]
    assert_allclose(p0.n, [0.3, 0.5], atol=1e-15)
    assert_allclose(p0.ytil, [0.5, 0.1], atol=1e-15)
    assert_allclose(p0.X, data.x[:2])
    p1 = build_pseudo_data(data, post, 1)
    assert_allclose(p1.n, [0.7, 0.5], atol=1e-15)
    assert_allclose(p1.ytil, [0.5, 0.1], atol=1e-15)


def test_build_pseudo_data_zero_mass_rows_get_half():
    z = np.array([[1.0, 0.0], [0.5, 0.5], [0.5, 0.5]])
    xi = z[:-1, :, None] * z[1:, None, :]
    post = PosteriorSummary(z=z, xi=xi, loglik=0.0)
    data = TimeSeriesDataset(y=np.zeros((3, 1)), x=np.zeros((3, 1)))
    p1 = build_pseudo_data(data, post, 1)
    assert p1.n[0] == 0.0
    assert p1.ytil[0] == 0.5
    with pytest.raises(ConfigurationError, match="regime must be 0 or 1"):
        build_pseudo_data(data, post, 2)


def test_pseudo_data_validation():
    with pytest.raises(DataValidationError, match="non-negative"):
        PseudoData(n=np.array([-0.1, 1.0]), ytil=np.zeros(2), X=np.zeros((2, 1)))
    with pytest.raises(DataValidationError, match="lie in"):
        PseudoData(n=np.ones(2), ytil=np.array([0.5, 1.3]), X=np.zeros((2, 1)))
    with pytest.raises(DataValidationError, match="rows"):
        PseudoData(n=np.ones(3), ytil=np.full(3, 0.5), X=np.zeros((2, 1)))


# ---------------------------------------------------------------------------
# Objective and gradient
# ---------------------------------------------------------------------------


def test_penalized_objective_matches_direct_binomial_formula():
    rng = np.random.default_rng(60)
    pseudo, _ = make_pseudo(rng, t_len=30)
    design = np.hstack([np.ones((30, 1)), pseudo.X])
    coef = rng.standard_normal(3)
    qform = 0.7 * np.eye(3)
    eta = design @ coef
    p = expit(eta)
    direct = float(
        np.sum(pseudo.n * (pseudo.ytil * np.log(p) + (1.0 - pseudo.ytil) * np.log1p(-p)))
    ) - 0.5 * 0.7 * float(coef @ coef)
    assert_allclose(
        penalized_objective(design, qform, coef, pseudo, "logistic"), direct, rtol=1e-10
    )
    pr = ndtr(eta)
    direct_probit = float(
        np.sum(pseudo.n * (pseudo.ytil * np.log(pr) + (1.0 - pseudo.ytil) * np.log1p(-pr)))
    )
    assert_allclose(
        penalized_objective(design, None, coef, pseudo, "probit"), direct_probit, rtol=1e-10
    )


def test_gradient_matches_finite_differences_linear_links():
    rng = np.random.default_rng(61)
    pseudo, _ = make_pseudo(rng, t_len=40)
    design = np.hstack([np.ones((40, 1)), pseudo.X])
    for link_kind in ("logistic", "probit"):
        for _ in range(3):
            coef = rng.normal(0.0, 0.7, size=3)
            grad = penalized_gradient(design, None, coef, pseudo, link_kind)
            assert relative_gradient_error(grad, fd_gradient(design, None, coef, pseudo, link_kind)) < 1e-5


def test_gradient_matches_finite_differences_spline_and_kernel():
    rng = np.random.default_rng(62)
    pseudo, _ = make_pseudo(rng, t_len=40, p=1)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=7)
    design = basis.design_matrix(pseudo.X[:, 0])
    qform = 0.5 * basis.penalty_matrix
    for _ in range(3):
        coef = rng.normal(0.0, 0.5, size=basis.n_basis)
        grad = penalized_gradient(design, qform, coef, pseudo, "logistic")
        assert relative_gradient_error(grad, fd_gradient(design, qform, coef, pseudo)) < 1e-5

    spec = KernelSpec(bandwidth=median_pairwise_bandwidth(pseudo.X))
    gram = kernel_gram(spec, pseudo.X)
    for _ in range(3):
        alpha = rng.normal(0.0, 0.3, size=40)
        grad = penalized_gradient(gram, 0.4 * gram, alpha, pseudo, "logistic")
        assert relative_gradient_error(grad, fd_gradient(gram, 0.4 * gram, alpha, pseudo)) < 1e-5


def test_gradient_matches_finite_differences_with_offset():
    """The additive backfit differentiates one block against a fixed offset."""
    rng = np.random.default_rng(63)
    pseudo, _ = make_pseudo(rng, t_len=35, p=2)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=6)
    block = np.hstack([np.ones((35, 1)), basis.design_matrix(pseudo.X[:, 0])])
    qform = np.zeros((block.shape[1], block.shape[1]))
    qform[1:, 1:] = 0.8 * basis.penalty_matrix
    offset = 0.3 * pseudo.X[:, 1]
    coef = rng.normal(0.0, 0.5, size=block.shape[1])
    grad = penalized_gradient(block, qform, coef, pseudo, "logistic", offset)
    numeric = fd_gradient(block, qform, coef, pseudo, offset=offset)
    assert relative_gradient_error(grad, numeric) < 1e-5


# ---------------------------------------------------------------------------
# Parametric fits
# ---------------------------------------------------------------------------


def test_fit_parametric_matches_independent_newton():
    rng = np.random.default_rng(64)
    for _ in range(5):
        pseudo, _ = make_pseudo(rng, t_len=80)
        design = np.hstack([np.ones((80, 1)), pseudo.X])
        ref = newton_weighted_logistic(design, pseudo.n, pseudo.ytil)
        fitted, info = fit_parametric(pseudo)
        assert info.converged
        assert np.max(np.abs(fitted.coef - ref)) < 1e-6


def test_fit_parametric_warm_start_reaches_same_optimum():
    rng = np.random.default_rng(65)
    pseudo, _ = make_pseudo(rng, t_len=70)
    cold, _ = fit_parametric(pseudo)
    warm, _ = fit_parametric(pseudo, coef0=np.array([2.0, -3.0, 1.0]))
    assert_allclose(warm.coef, cold.coef, atol=1e-7)


def test_fit_parametric_probit_stationarity_and_recovery():
    rng = np.random.default_rng(66)
    t_len = 2500
    X = rng.standard_normal((t_len, 1))
    beta = np.array([0.3, -0.8])
    ytil = (rng.uniform(size=t_len) < ndtr(beta[0] + X[:, 0] * beta[1])).astype(float)
    pseudo = PseudoData(n=np.ones(t_len), ytil=ytil, X=X)
    fitted, info = fit_parametric(pseudo, link_kind="probit")
    assert info.converged
    design = np.hstack([np.ones((t_len, 1)), X])
    grad = penalized_gradient(design, None, fitted.coef, pseudo, "probit")
    assert np.max(np.abs(grad)) < 1e-6
    assert_allclose(fitted.coef, beta, atol=0.15)


def test_fit_parametric_warns_and_stabilizes_on_separation():
    """Perfectly separated responses on a hair-thin margin drive the
    unpenalized optimum to infinity; the fit must warn and ridge-stabilize."""
    x = np.concatenate([np.linspace(-0.002, -0.001, 15), np.linspace(0.001, 0.002, 15)])
    ytil = (x > 0).astype(float)
    pseudo = PseudoData(n=np.ones(30), ytil=ytil, X=x[:, None])
    with pytest.warns(RuntimeWarning, match="separated"):
        fitted, _ = fit_parametric(pseudo)
    assert np.all(np.isfinite(fitted.coef))


# ---------------------------------------------------------------------------
# Spline, kernel, and additive fits
# ---------------------------------------------------------------------------


def test_irls_spline_linear_basis_specializes_to_newton():
    """A two-knot degree-1 basis spans affine functions, so an unpenalized
    spline fit must reproduce the parametric logistic solution exactly."""
    rng = np.random.default_rng(67)
    for _ in range(5):
        pseudo, _ = make_pseudo(rng, t_len=60, p=1)
        x = pseudo.X[:, 0]
        basis = SplineBasis(
            knots=np.array([x.min() - 0.05, x.max() + 0.05]), degree=1
        )
        fitted, info = irls_spline(basis, pseudo, lam=0.0)
        assert info.converged
        design = np.hstack([np.ones((60, 1)), pseudo.X])
        ref = newton_weighted_logistic(design, pseudo.n, pseudo.ytil)
        eta_spline = fitted.evaluate(pseudo.X)
        eta_ref = design @ ref
        assert np.max(np.abs(eta_spline - eta_ref)) < 1e-6


def test_irls_spline_penalty_shrinks_toward_smoothness():
    rng = np.random.default_rng(68)
    pseudo, _ = make_pseudo(rng, t_len=80, p=1)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=9)
    rough, _ = irls_spline(basis, pseudo, lam=1e-8)
    smooth, _ = irls_spline(basis, pseudo, lam=1e6)
    pen = basis.penalty_matrix
    assert smooth.coef @ pen @ smooth.coef < rough.coef @ pen @ rough.coef
    with pytest.raises(ConfigurationError, match="lambda"):
        irls_spline(basis, pseudo, lam=-1.0)


def test_irls_rkhs_solution_is_the_penalized_optimum():
    """The IRLS fixed point must be a stationary point of the concave
    penalized objective, and a general-purpose optimizer started elsewhere
    must not find a better value."""
    rng = np.random.default_rng(69)
    pseudo, _ = make_pseudo(rng, t_len=40)
    spec = KernelSpec(bandwidth=median_pairwise_bandwidth(pseudo.X))
    gram = kernel_gram(spec, pseudo.X)
    lam = 0.5
    fitted, info = irls_rkhs(spec, pseudo, lam)

    grad = penalized_gradient(gram, lam * gram, fitted.coef, pseudo, "logistic")
    assert np.max(np.abs(grad)) < 1e-5

    def neg_obj(alpha):
        return -penalized_objective(gram, lam * gram, alpha, pseudo, "logistic")

    def neg_grad(alpha):
        return -penalized_gradient(gram, lam * gram, alpha, pseudo, "logistic")

    ref = minimize(
        neg_obj,
        np.zeros(40),
        jac=neg_grad,
        method="L-BFGS-B",
        options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-9},
    )
    assert info.objective >= -ref.fun - 1e-7
    if ref.success:
        assert_allclose(gram @ fitted.coef, gram @ ref.x, atol=1e-4)
    with pytest.raises(ConfigurationError, match="lambda > 0"):
        irls_rkhs(spec, pseudo, 0.0)


def test_irls_rkhs_objective_uses_raw_gram():
    """The reported objective must be exactly the one induced by the fitted
    function the model later evaluates (no jitter leaking into it)."""
    rng = np.random.default_rng(70)
    pseudo, _ = make_pseudo(rng, t_len=30)
    spec = KernelSpec(bandwidth=1.0)
    fitted, info = irls_rkhs(spec, pseudo, lam=0.2)
    gram = kernel_gram(spec, pseudo.X)
    direct = penalized_objective(gram, 0.2 * gram, fitted.coef, pseudo, "logistic")
    assert_allclose(info.objective, direct, rtol=1e-12)
    zero = penalized_objective(gram, 0.2 * gram, np.zeros(30), pseudo, "logistic")
    assert info.objective >= zero


def test_backfit_single_component_matches_joint_spline_fit():
    """With one covariate, backfitting and the joint penalized fit optimize
    the same objective over the same function space."""
    rng = np.random.default_rng(71)
    pseudo, _ = make_pseudo(rng, t_len=70, p=1)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=8)
    lam = 2.0
    joint, _ = irls_spline(basis, pseudo, lam)
    additive, info = backfit_additive((basis,), pseudo, (lam,))
    assert info.converged
    eta_joint = joint.evaluate(pseudo.X)
    eta_add = additive.evaluate(pseudo.X)
    assert np.max(np.abs(eta_joint - eta_add)) < 1e-5


def test_backfit_two_components_centered_and_improving():
    rng = np.random.default_rng(72)
    pseudo, _ = make_pseudo(rng, t_len=90, p=2)
    bases = tuple(make_spline_basis(pseudo.X[:, i], n_basis=7) for i in range(2))
    lams = (0.5, 1.5)
    fitted, info = backfit_additive(bases, pseudo, lams)
    # each component is pseudo-count-weighted centered
    for i, b in enumerate(bases):
        part = b.design_matrix(pseudo.X[:, i]) @ fitted.coefs[i]
        assert abs(float(pseudo.n @ part)) < 1e-8
    # the joint penalized objective did not fall below the zero start
    designs = [b.design_matrix(pseudo.X[:, i]) for i, b in enumerate(bases)]
    full_design = np.hstack([np.ones((90, 1))] + designs)
    qform = np.zeros((full_design.shape[1], full_design.shape[1]))
    pos = 1
    for b, lam in zip(bases, lams):
        qform[pos : pos + b.n_basis, pos : pos + b.n_basis] = lam * b.penalty_matrix
        pos += b.n_basis
    at_zero = penalized_objective(
        full_design, qform, np.zeros(full_design.shape[1]), pseudo, "logistic"
    )
    assert info.objective >= at_zero
    stacked = np.concatenate([[fitted.intercept]] + list(fitted.coefs))
    direct = penalized_objective(full_design, qform, stacked, pseudo, "logistic")
    assert_allclose(info.objective, direct, rtol=1e-12)


def test_backfit_validates_component_counts():
    rng = np.random.default_rng(73)
    pseudo, _ = make_pseudo(rng, t_len=30, p=2)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=6)
    with pytest.raises(ConfigurationError, match="bases supplied"):
        backfit_additive((basis,), pseudo, (1.0,))
    with pytest.raises(ConfigurationError, match="one smoothing level"):
        backfit_additive((basis, basis), pseudo, (1.0,))


# ---------------------------------------------------------------------------
# GCV selection
# ---------------------------------------------------------------------------


def test_spline_hat_trace_at_zero_is_basis_dimension():
    rng = np.random.default_rng(74)
    pseudo, _ = make_pseudo(rng, t_len=60, p=1)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=8)
    design = basis.design_matrix(pseudo.X[:, 0])
    weights = pseudo.n * 0.25
    assert abs(spline_hat_trace(design, basis.penalty_matrix, weights, 0.0) - 8.0) < 1e-6


def test_hat_traces_non_increasing_in_lambda():
    rng = np.random.default_rng(75)
    pseudo, _ = make_pseudo(rng, t_len=50, p=1)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=8)
    design = basis.design_matrix(pseudo.X[:, 0])
    weights = np.clip(pseudo.n, 0.05, None)
    lambdas = np.geomspace(1e-6, 1e6, 30)
    spline_traces = [
        spline_hat_trace(design, basis.penalty_matrix, weights, lam) for lam in lambdas
    ]
    assert np.all(np.diff(spline_traces) <= 1e-8)

    gram = kernel_gram(KernelSpec(bandwidth=0.8), pseudo.X)
    kernel_traces = [kernel_hat_trace(gram, weights, lam) for lam in lambdas]
    assert np.all(np.diff(kernel_traces) <= 1e-10)
    assert all(0.0 <= tr < 50.0 for tr in kernel_traces)


def test_kernel_hat_trace_matches_dense_formula():
    """tr of the update-equation smoother K (WK + lam I)^{-1} W."""
    rng = np.random.default_rng(76)
    X = rng.standard_normal((25, 2))
    gram = kernel_gram(KernelSpec(bandwidth=1.5), X)
    weights = rng.uniform(0.2, 1.0, size=25)
    for lam in (1e-2, 0.3, 5.0):
        dense = gram @ np.linalg.solve(
            weights[:, None] * gram + lam * np.eye(25), np.diag(weights)
        )
        assert_allclose(kernel_hat_trace(gram, weights, lam), np.trace(dense), rtol=1e-8)


def test_kernel_hat_trace_stays_sane_on_near_singular_gram():
    """Duplicated covariate rows make the Gram matrix numerically singular;
    the trace must remain inside [0, n) across the whole grid."""
    rng = np.random.default_rng(77)
    half = rng.standard_normal((20, 2))
    X = np.vstack([half, half])
    gram = kernel_gram(KernelSpec(bandwidth=0.5), X)
    weights = rng.uniform(0.1, 1.0, size=40)
    traces = [kernel_hat_trace(gram, weights, lam) for lam in np.geomspace(1e-8, 1e4, 25)]
    assert np.all(np.diff(traces) <= 1e-10)
    assert all(0.0 <= tr < 40.0 for tr in traces)


def test_select_lambda_gcv_spline_returns_grid_member():
    rng = np.random.default_rng(78)
    pseudo, _ = make_pseudo(rng, t_len=80, p=1)
    basis = make_spline_basis(pseudo.X[:, 0], n_basis=8)
    design = basis.design_matrix(pseudo.X[:, 0])
    sel = select_lambda_gcv(pseudo, design=design, penalty=basis.penalty_matrix)
    assert sel.grid.shape == GCV_GRID.shape
    assert sel.lam in sel.grid
    best = int(np.argmin(sel.scores))
    assert sel.lam == sel.grid[best]
    assert np.isfinite(sel.scores[best])
    assert np.all(np.diff(sel.traces) <= 1e-8)


def test_select_lambda_gcv_kernel_mode():
    rng = np.random.default_rng(79)
    pseudo, _ = make_pseudo(rng, t_len=50)
    gram = kernel_gram(KernelSpec(bandwidth=1.0), pseudo.X)
    sel = select_lambda_gcv(pseudo, gram=gram)
    assert sel.lam in sel.grid
    assert np.isfinite(sel.scores).any()
    # the grid is centered on tr(K)/n, here exactly 1
    assert_allclose(sel.grid, GCV_GRID * np.trace(gram) / 50.0)


def test_select_lambda_gcv_requires_exactly_one_mode():
    rng = np.random.default_rng(80)
    pseudo, _ = make_pseudo(rng, t_len=20)
    gram = kernel_gram(KernelSpec(bandwidth=1.0), pseudo.X)
    design = np.hstack([np.ones((20, 1)), pseudo.X])
    with pytest.raises(ConfigurationError, match="not both"):
        select_lambda_gcv(pseudo, design=design, penalty=np.eye(3), gram=gram)
    with pytest.raises(ConfigurationError, match="not both"):
        select_lambda_gcv(pseudo)
    with pytest.raises(ConfigurationError, match="needs the penalty"):
        select_lambda_gcv(pseudo, design=design)


def test_kernel_gcv_raises_on_zero_posterior_mass():
    """If every pseudo-observation carries zero count the working weights
    vanish identically and no smoothing level can be scored."""
    rng = np.random.default_rng(7)
    x = rng.normal(size=(6, 1))
    pseudo = PseudoData(n=np.zeros(6), ytil=np.full(6, 0.5), X=x)
    spec = KernelSpec(bandwidth=1.0)
    gram = kernel_gram(spec, x)
    with pytest.raises(NumericalError, match="identically zero"):
        select_lambda_gcv(pseudo, gram=gram)


def test_spline_gcv_single_row_keeps_finite_score_or_raises():
    """One observation row is a degenerate smoothing problem; the selector
    must either return a grid member or refuse loudly, never crash."""
    pseudo = PseudoData(n=np.array([1.0]), ytil=np.array([0.6]), X=np.array([[0.3]]))
    basis = SplineBasis(knots=np.array([0.0, 0.5, 1.0]), degree=3)
    design = basis.design_matrix(pseudo.X[:, 0])
    try:
        result = select_lambda_gcv(pseudo, design=design, penalty=basis.penalty_matrix)
    except NumericalError as err:
        assert "every grid point" in str(err)
    else:
        assert result.lam in result.grid
        assert np.isfinite(result.scores).any()
