import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, linalg

from branching_clt import (
    FunctionExpansion,
    OUParams,
    SpectralError,
    classify,
    closed_form_spectrum,
    expand,
    galerkin_spectrum,
    split,
)
from branching_clt.spectral import (
    TruncationWarning,
    inner_product,
    is_critical_pair,
    multi_indices,
    quadrature_grid,
)


def _weighted(basis, k, order=128):
    g = quadrature_grid(basis.params, order)
    return np.sqrt(g.weights)[:, None] * basis.grid_values(order)[:, basis.level_rows(k)]


def _fd_top_eigenvalue(alpha, b=1.0, sigma2=1.0, L=9.0, n=2400):
    """Largest eigenvalue of 0.5 s2 u'' - b x u' + alpha u on [-L, L] by central differences."""
    x = np.linspace(-L, L, n)
    h = x[1] - x[0]
    main = -sigma2 / h**2 + alpha(x[:, None])
    up = 0.5 * sigma2 / h**2 - b * x[:-1] / (2 * h)
    lo = 0.5 * sigma2 / h**2 + b * x[1:] / (2 * h)
    # symmetrize the tridiagonal matrix with a diagonal similarity
    off = np.sqrt(up * lo)
    w = linalg.eigh_tridiagonal(main, off, eigvals_only=True, select="i",
                                select_range=(n - 3, n - 1))
    return w[::-1]


def test_grid_weights_and_second_moment():
    p = OUParams(2.0, 3.0, 1)
    g = quadrature_grid(p, 64)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-14)
    assert g.weights @ g.nodes[:, 0] ** 2 == pytest.approx(3.0 / 4.0, rel=1e-13)


def test_stationary_density_normalized():
    p = OUParams(1.5, 0.7, 1)
    val, _ = integrate.quad(lambda x: p.density(np.array([[x]]))[0], -np.inf, np.inf)
    assert val == pytest.approx(1.0, rel=1e-10)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_closed_form_multiplicities_and_eigenvalues(d):
    basis = closed_form_spectrum(OUParams(1.3, 1.0, d), 0.5, 5)
    assert basis.multiplicities == tuple(math.comb(k + d - 1, d - 1) for k in range(5))
    np.testing.assert_allclose(basis.eigenvalues, 1.3 * np.arange(5) - 0.5)


@pytest.mark.parametrize("d", [1, 2])
def test_closed_form_orthonormal(d):
    basis = closed_form_spectrum(OUParams(1.0, 2.0, d), 1.0, 6)
    np.testing.assert_allclose(basis.gram(64), np.eye(basis.vectors.shape[0]), atol=1e-12)


def test_multi_indices_degree_major():
    idx = multi_indices(2, 4)
    deg = idx.sum(axis=1)
    assert np.all(np.diff(deg) >= 0)
    assert len(idx) == 10


@pytest.mark.parametrize("d,N", [(1, 40), (2, 12)])
def test_galerkin_matches_closed_form_constant_alpha(d, N):
    p = OUParams(1.0, 1.0, d)
    ref = closed_form_spectrum(p, 2.0, 5)
    gal = galerkin_spectrum(p, lambda x: np.full(x.shape[0], 2.0), N, 5)
    np.testing.assert_allclose(gal.eigenvalues, ref.eigenvalues, atol=1e-8)
    assert gal.multiplicities == ref.multiplicities
    for k in range(1, 6):
        ang = linalg.subspace_angles(_weighted(gal, k), _weighted(ref, k))
        assert np.max(ang) < 1e-6


def test_galerkin_gaussian_potential_against_finite_differences(ou):
    alpha = lambda x: np.exp(-x[:, 0] ** 2)
    gal = galerkin_spectrum(ou, alpha, 40, 3)
    fd = _fd_top_eigenvalue(lambda x: np.exp(-x[:, 0] ** 2))
    np.testing.assert_allclose(-gal.eigenvalues, fd, atol=2e-4)
    np.testing.assert_allclose(gal.gram(), np.eye(3), atol=1e-10)
    assert np.all(gal.residuals < 1e-8)


def test_galerkin_ground_state_positive(ou):
    gal = galerkin_spectrum(ou, lambda x: 1.0 + np.exp(-(x[:, 0] - 0.5) ** 2), 40, 4)
    x = np.linspace(-3, 3, 61)
    assert np.all(gal.evaluate(x, [0])[:, 0] > 0)


def test_galerkin_too_small_truncation(ou):
    with pytest.raises(ValueError):
        galerkin_spectrum(ou, lambda x: np.zeros(x.shape[0]), 5, 5)


def test_degenerate_span_is_basis_independent():
    # a rotated 2-d problem has the same level spans, whatever basis eigh picks
    p = OUParams(1.0, 1.0, 2)
    alpha = lambda x: 0.3 * np.exp(-(x**2).sum(axis=1))
    g = galerkin_spectrum(p, alpha, 14, 3)
    assert g.multiplicities == (1, 2, 1)
    rot = np.array([[np.cos(0.7), -np.sin(0.7)], [np.sin(0.7), np.cos(0.7)]])
    grid = quadrature_grid(p, 40)
    a = g.evaluate(grid.nodes, [1, 2])
    b = g.evaluate(grid.nodes @ rot.T, [1, 2])
    sw = np.sqrt(grid.weights)[:, None]
    assert np.max(linalg.subspace_angles(sw * a, sw * b)) < 1e-8


def test_expand_x4(ou):
    basis = closed_form_spectrum(ou, 1.0, 8)
    f = expand(lambda x: x[:, 0] ** 4, basis)
    assert f.gamma == 1
    # E x^4 under N(0, 1/2)
    assert f.coeffs[(1, 1)] == pytest.approx(0.75, rel=1e-13)
    assert f.residual < 1e-12
    x = np.linspace(-2, 2, 9)
    np.testing.assert_allclose(f.reconstruct(x), x**4, atol=1e-11)


def test_expand_odd_function_starts_at_level_two(ou):
    basis = closed_form_spectrum(ou, 1.0, 6)
    f = expand(lambda x: x[:, 0] ** 3, basis)
    assert f.gamma == 2


def test_truncation_warning(ou):
    basis = closed_form_spectrum(ou, 1.0, 4)
    with pytest.warns(TruncationWarning):
        f = expand(lambda x: np.abs(x[:, 0]), basis)
    assert f.warning is not None and f.residual > 1e-3


def test_nonfinite_sample_named(ou):
    with pytest.raises(ValueError, match="node"):
        inner_product(lambda x: np.where(x[:, 0] > 3, np.inf, 1.0),
                      lambda x: np.ones(x.shape[0]), ou)


def test_row_outside_basis(ou):
    basis = closed_form_spectrum(ou, 1.0, 3)
    with pytest.raises(KeyError):
        basis.row(4, 1)
    with pytest.raises(KeyError):
        basis.row(2, 2)


def test_classify_trichotomy():
    assert classify(-1.0, -2.0) == "critical"
    assert classify(-3.0, -2.0) == "large"
    assert classify(0.5, -2.0) == "small"
    assert is_critical_pair(-1.0 + 1e-12, -2.0)
    assert not is_critical_pair(-1.0 + 1e-6, -2.0)


def test_split_partitions_coefficients(binary4):
    f = FunctionExpansion.from_coeffs(binary4.basis, {(1, 1): 0.5, (2, 1): 1.0, (3, 1): 2.0, (5, 1): -1.0})
    s = split(f).split
    total = s.small.vector + s.critical.vector + s.large.vector
    np.testing.assert_array_equal(total, f.vector)
    # 2 lam_k < lam_1 is the "small" level set (levels 1, 2 here)
    assert s.small.levels == [1, 2]
    assert s.critical.levels == [3]
    assert s.large.levels == [5]
    assert s.leading.levels == [1]


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.lists(st.floats(-2, 2), min_size=1, max_size=5))
def test_expansion_linear(c, shift, poly):
    basis = closed_form_spectrum(OUParams(1.0, 1.0, 1), 1.0, 8)
    f = lambda x: np.polynomial.polynomial.polyval(x[:, 0], poly)
    g = lambda x: np.cos(x[:, 0]) + shift
    ef, eg = expand(f, basis), expand(g, basis, residual_rtol=np.inf)
    eh = expand(lambda x: c * f(x) + g(x), basis, residual_rtol=np.inf)
    np.testing.assert_allclose(eh.vector, c * ef.vector + eg.vector, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_classification_exactly_one(lam_g, lam_1):
    r = classify(lam_g, lam_1)
    checks = [is_critical_pair(lam_g, lam_1), lam_1 > 2 * lam_g and not is_critical_pair(lam_g, lam_1),
              lam_1 < 2 * lam_g and not is_critical_pair(lam_g, lam_1)]
    assert sum(checks) == 1
    assert r == ["critical", "large", "small"][checks.index(True)]


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(0.2, 3.0), st.integers(0, 10))
def test_quadrature_exact_for_even_moments(b, s2, m):
    p = OUParams(b, s2, 1)
    g = quadrature_grid(p, 64)
    v = s2 / (2 * b)
    exact = v**m * math.prod(range(1, 2 * m, 2))
    assert g.weights @ g.nodes[:, 0] ** (2 * m) == pytest.approx(exact, rel=1e-11)
