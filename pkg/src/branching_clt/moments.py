"""Mean semigroup, second moments and the limiting-variance functionals.

All time integrals over ``[0, inf)`` are evaluated by expanding the squared
semigroup image bilinearly over eigen-levels, so that each pair of levels
integrates in closed form. ``method="quadrature"`` runs the same integral
through adaptive Gauss-Kronrod on nodewise squares instead, which is how the
closed forms are cross-checked.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt
from typing import Callable, Sequence

import numpy as np

from ._quad import gauss_kronrod, integrate_to_infinity
from .spectral import (
    DEFAULT_QUAD_ORDER,
    FunctionExpansion,
    OUParams,
    SpectralBasis,
    as_points,
    classify,
    closed_form_spectrum,
    galerkin_spectrum,
    quadrature_grid,
    split,
)

__all__ = [
    "ModelSpec",
    "MomentReport",
    "RegimeError",
    "regime",
    "mean_Tt",
    "second_moment",
    "sigma2_small",
    "rho2_critical",
    "beta2_large",
    "beta2_proxy",
    "eta2_large",
    "remark_phi1_variance",
    "predicted_variance",
]

MAX_OFFSPRING = 10
_PMF_ATOL = 1e-12


class RegimeError(ValueError):
    """A variance functional was requested outside its theorem's hypothesis."""


def _constant(value: float):
    def fn(x):
        return np.full(np.shape(x)[0], value, dtype=float)
    return fn


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Branching OU model: motion, branching rate and offspring law.

    ``beta`` is a non-negative constant or a function of position.
    ``offspring`` is a pmf over ``{0, ..., n_max}`` or a function returning one
    pmf per position (shape ``(n, n_max + 1)``). When both are constant the
    spectrum is the closed-form shifted OU spectrum; otherwise it is computed
    by Hermite-Galerkin with ``basis_size`` degrees. Construction fails unless
    ``lambda_1 < 0``; ``require_supercritical=False`` lifts that for
    simulation-only uses such as pure death or pure motion.
    """

    ou: OUParams
    beta: float | Callable
    offspring: Sequence[float] | Callable
    k_max: int = 8
    basis_size: int = 40
    quad_order: int = DEFAULT_QUAD_ORDER
    max_offspring: int = MAX_OFFSPRING
    require_supercritical: bool = True
    basis: SpectralBasis = field(init=False, repr=False)

    def __post_init__(self):
        if callable(self.offspring):
            probe = self.probe_points()
            pm = self.pmf(probe)
            if pm.ndim != 2 or pm.shape[0] != probe.shape[0]:
                raise ValueError("offspring function must return an (n, n_max + 1) array")
        else:
            pm = np.asarray(self.offspring, dtype=float)
            if pm.ndim != 1:
                raise ValueError("constant offspring law must be a 1-d pmf")
            pm = pm[None, :]
        if pm.shape[1] - 1 > self.max_offspring:
            raise ValueError(f"offspring support {pm.shape[1] - 1} exceeds n_max={self.max_offspring}")
        if np.any(pm < 0) or np.any(np.abs(pm.sum(axis=1) - 1.0) > _PMF_ATOL):
            raise ValueError("offspring pmf must be non-negative and sum to 1 within 1e-12")
        if not callable(self.beta) and not (self.beta >= 0 and np.isfinite(self.beta)):
            raise ValueError(f"branching rate must be finite and >= 0, got {self.beta}")
        if callable(self.beta) and np.any(self.beta_fn(self.probe_points()) < 0):
            raise ValueError("branching rate must be non-negative")

        if self.homogeneous:
            basis = closed_form_spectrum(self.ou, float(self.alpha(np.zeros((1, self.ou.d)))[0]), self.k_max)
        else:
            basis = galerkin_spectrum(self.ou, self.alpha, self.basis_size, self.k_max, self.quad_order)
        object.__setattr__(self, "basis", basis)
        if self.require_supercritical and not basis.lam(1) < 0:
            raise ValueError(
                f"model is not supercritical: lambda_1 = {basis.lam(1):.6g} >= 0")

    @property
    def homogeneous(self) -> bool:
        return not callable(self.beta) and not callable(self.offspring)

    @property
    def lambda1(self) -> float:
        return self.basis.lam(1)

    def probe_points(self) -> np.ndarray:
        """Quadrature nodes plus a wide box, used to validate position-dependent inputs."""
        nodes = quadrature_grid(self.ou, min(self.quad_order, 64)).nodes
        r = 8.0 * sqrt(self.ou.stationary_variance)
        line = np.linspace(-r, r, 81)
        box = np.zeros((len(line), self.ou.d))
        box[:, 0] = line
        return np.vstack([nodes, box])

    def beta_fn(self, x) -> np.ndarray:
        x = as_points(x, self.ou.d)
        if callable(self.beta):
            return np.asarray(self.beta(x), dtype=float).reshape(x.shape[0])
        return _constant(float(self.beta))(x)

    def pmf(self, x) -> np.ndarray:
        x = as_points(x, self.ou.d)
        if callable(self.offspring):
            return np.atleast_2d(np.asarray(self.offspring(x), dtype=float))
        return np.broadcast_to(np.asarray(self.offspring, dtype=float), (x.shape[0], len(self.offspring)))

    def alpha(self, x) -> np.ndarray:
        """``beta(x) * (mean offspring - 1)``."""
        pm = self.pmf(x)
        n = np.arange(pm.shape[1])
        return self.beta_fn(x) * (pm @ n - 1.0)

    def A(self, x) -> np.ndarray:
        """``beta(x) * sum_n n (n - 1) p_n(x)``."""
        pm = self.pmf(x)
        n = np.arange(pm.shape[1])
        return self.beta_fn(x) * (pm @ (n * (n - 1.0)))

    def beta_sup(self) -> float:
        """Supremum of beta over the probe set; exact for constant rates."""
        if not callable(self.beta):
            return float(self.beta)
        return float(np.max(self.beta_fn(self.probe_points())))

    def phi1(self, x) -> np.ndarray:
        return self.basis.evaluate(x, [0])[:, 0]


@dataclass(frozen=True)
class MomentReport:
    mean: float
    second_moment: float
    variance: float
    quadrature_error_estimate: float
    truncation_level: int


# ---------------------------------------------------------------------------
# helpers


class _Grid:
    """Model quantities sampled on the Gauss-Hermite nodes."""

    def __init__(self, model: ModelSpec):
        g = quadrature_grid(model.ou, model.quad_order)
        self.w = g.weights
        self.nodes = g.nodes
        self.phi = model.basis.grid_values(model.quad_order)
        self.A = model.A(g.nodes)
        self.phi1 = self.phi[:, 0]
        self.lam = model.basis.row_eigenvalues

    def project(self, values: np.ndarray):
        """Eigen-coefficients of nodal values (last axis = nodes) and L2 residuals."""
        c = (values * self.w) @ self.phi
        rest = values - c @ self.phi.T
        resid = np.sqrt((rest * rest) @ self.w)
        return c, resid

    def pair_matrix(self, weight: np.ndarray) -> np.ndarray:
        """``<weight phi_r phi_s>`` over basis rows."""
        return self.phi.T @ ((self.w * weight)[:, None] * self.phi)


def _grid(model: ModelSpec) -> _Grid:
    cache = model.__dict__.setdefault("_grid_cache", None)
    if cache is None:
        cache = _Grid(model)
        object.__setattr__(model, "_grid_cache", cache)
    return cache


def _check_basis(model: ModelSpec, f: FunctionExpansion):
    if f.basis is not model.basis:
        raise ValueError("function was expanded against a different basis than the model's")


def _active(f: FunctionExpansion) -> np.ndarray:
    """Coefficient vector with levels below gamma(f) zeroed."""
    a = f.vector.copy()
    if f.gamma is None:
        return np.zeros_like(a)
    a[f.basis.level_of_row < f.gamma] = 0.0
    return a


def _values_on_grid(f: FunctionExpansion, g: _Grid) -> np.ndarray:
    return np.asarray(f(g.nodes), dtype=float)


def _scalar_or_array(x, d, values):
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 0 or (x_arr.ndim == 1 and (d > 1 or x_arr.size == 1))
    return float(values[0]) if single else values


def regime(model: ModelSpec, f: FunctionExpansion) -> str:
    """``large``, ``critical`` or ``small`` from ``lam_1`` versus ``2 lam_gamma(f)``."""
    _check_basis(model, f)
    if f.gamma is None:
        raise RegimeError("f has no component above the zero threshold; gamma(f) is infinite")
    return classify(model.basis.lam(f.gamma), model.lambda1)


def _require(model, f, wanted, what):
    got = regime(model, f)
    if got != wanted:
        theorem = {"small": "sigma2_small", "critical": "rho2_critical", "large": "beta2_large/eta2_large"}
        raise RegimeError(
            f"{what} needs the {wanted} regime but f is in the {got} regime "
            f"(lambda_1={model.lambda1:.6g}, lambda_gamma={model.basis.lam(f.gamma):.6g}); "
            f"use {theorem[got]}")


# ---------------------------------------------------------------------------
# semigroup and second moment


def mean_Tt(model: ModelSpec, f: FunctionExpansion, t: float, x):
    """``T_t f(x) = sum_k exp(-lam_k t) sum_j a_j^k phi_j^k(x)``."""
    _check_basis(model, f)
    if t < 0:
        raise ValueError("t must be >= 0")
    pts = as_points(x, model.ou.d)
    w = f.vector * np.exp(-model.basis.row_eigenvalues * t)
    return _scalar_or_array(x, model.ou.d, model.basis.combination(w)(pts))


def second_moment(model: ModelSpec, f: FunctionExpansion, t: float, x, rtol: float = 1e-11,
                  max_panels: int = 400) -> MomentReport:
    """``E_x <f, X_t>^2 = int_0^t T_s[A (T_{t-s} f)^2](x) ds + T_t(f^2)(x)``.

    ``(T_{t-s} f)^2`` is squared on the nodes and re-projected; the L2 size of
    the discarded part is folded into ``quadrature_error_estimate``.
    """
    _check_basis(model, f)
    if not t > 0:
        raise ValueError("t must be > 0")
    g = _grid(model)
    pts = as_points(x, model.ou.d)
    if pts.shape[0] != 1:
        raise ValueError("second_moment takes a single starting point")
    phi_x = model.basis.evaluate(pts)[0]
    a = f.vector
    lam = g.lam

    def integrand(s):
        s = np.atleast_1d(s)
        coef = a[None, :] * np.exp(-lam[None, :] * (t - s)[:, None])
        u = coef @ g.phi.T
        c, resid = g.project(g.A[None, :] * u * u)
        val = (c * np.exp(-lam[None, :] * s[:, None])) @ phi_x
        growth = np.exp(-lam.min() * s) * np.abs(phi_x).sum()
        return np.stack([val, resid * growth], axis=1)

    (branch, proj_err), q_err = gauss_kronrod(integrand, 0.0, t, rtol=rtol, max_panels=max_panels)
    c2, r2 = g.project(_values_on_grid(f, g) ** 2)
    tail = float((c2 * np.exp(-lam * t)) @ phi_x)
    mean = float((a * np.exp(-lam * t)) @ phi_x)
    second = float(branch) + tail
    err = q_err + float(proj_err) + float(r2) * np.exp(-lam.min() * t) * np.abs(phi_x).sum()
    return MomentReport(mean, second, second - mean * mean, float(err), model.basis.k_max)


# ---------------------------------------------------------------------------
# limiting variances


def sigma2_small(model: ModelSpec, f: FunctionExpansion, method: str = "closed") -> float:
    """Small-regime variance ``int_0^inf e^{lam_1 s} <A (T_s f)^2, phi_1> ds + <f^2, phi_1>``."""
    _require(model, f, "small", "sigma2_small")
    g = _grid(model)
    a = _active(f)
    lam1 = model.lambda1
    head = float(g.w @ (_values_on_grid(f, g) ** 2 * g.phi1))
    if method == "closed":
        P = g.pair_matrix(g.A * g.phi1)
        rows = np.flatnonzero(a)
        lr = g.lam[rows]
        den = lr[:, None] + lr[None, :] - lam1
        assert np.all(den > 0), "small-regime levels must satisfy lam_k + lam_l > lam_1"
        return float(a[rows] @ (P[np.ix_(rows, rows)] / den) @ a[rows]) + head
    if method == "quadrature":
        lam_g = model.basis.lam(f.gamma)

        def integrand(s):
            u = (a[None, :] * np.exp(-g.lam[None, :] * s[:, None])) @ g.phi.T
            return np.exp(lam1 * s) * ((g.A * g.phi1 * g.w)[None, :] * u * u).sum(axis=1)

        val, _ = integrate_to_infinity(integrand, 2 * lam_g - lam1)
        return float(val) + head
    raise ValueError(f"unknown method {method!r}")


def rho2_critical(model: ModelSpec, f: FunctionExpansion) -> float:
    """Critical-regime variance ``<A f_1^2, phi_1>``."""
    _require(model, f, "critical", "rho2_critical")
    g = _grid(model)
    f1 = g.phi @ f.level_vector(f.gamma)
    return float(g.w @ (g.A * f1 * f1 * g.phi1))


def _small_rows(model: ModelSpec, f: FunctionExpansion) -> np.ndarray:
    a = _active(f)
    lam = model.basis.row_eigenvalues
    return np.flatnonzero((a != 0) & (2 * lam < model.lambda1) &
                          ~np.isclose(2 * lam, model.lambda1, rtol=0, atol=1e-9 * max(1, abs(model.lambda1))))


def beta2_large(model: ModelSpec, f: FunctionExpansion, method: str = "closed") -> float:
    """Variance of the ``H_inf`` centering, integrated against ``phi_1``.

    ``int_0^inf e^{-lam_1 s} <A (sum_{2lam_k<lam_1} e^{lam_k s} f_k)^2, phi_1> ds - <f_(s)^2, phi_1>``
    """
    _require(model, f, "large", "beta2_large")
    g = _grid(model)
    a = _active(f)
    rows = _small_rows(model, f)
    if rows.size == 0:
        raise RegimeError("f has no component on levels with 2 lam_k < lam_1")
    lam1 = model.lambda1
    fs = g.phi[:, rows] @ a[rows]
    head = float(g.w @ (fs * fs * g.phi1))
    if method == "closed":
        P = g.pair_matrix(g.A * g.phi1)[np.ix_(rows, rows)]
        lr = g.lam[rows]
        den = lam1 - lr[:, None] - lr[None, :]
        if not np.all(den > 0):
            raise AssertionError("pair with lam_1 - lam_k - lam_l <= 0 among small levels")
        return float(a[rows] @ (P / den) @ a[rows]) - head
    if method == "quadrature":
        decay = lam1 - 2 * g.lam[rows].max()

        def integrand(s):
            u = (a[rows][None, :] * np.exp(g.lam[rows][None, :] * s[:, None])) @ g.phi[:, rows].T
            return np.exp(-lam1 * s) * ((g.A * g.phi1 * g.w)[None, :] * u * u).sum(axis=1)

        val, _ = integrate_to_infinity(integrand, decay)
        return float(val) - head
    raise ValueError(f"unknown method {method!r}")


def beta2_proxy(model: ModelSpec, f: FunctionExpansion, extension: float) -> float:
    """Finite-horizon counterpart of :func:`beta2_large`.

    Variance (integrated against ``phi_1``) of the centering when ``H_inf`` is
    replaced by ``H`` at ``extension`` time units after ``t``. Each pair term
    is ``P (1 - e^{-c D}) / c + Q e^{-c D}`` with ``c = lam_1 - lam_r - lam_s``,
    ``P = <A phi_r phi_s phi_1>`` and ``Q = <phi_r phi_s phi_1>``; it tends to
    ``beta2_large`` as ``extension`` grows.
    """
    _require(model, f, "large", "beta2_proxy")
    if extension < 0:
        raise ValueError("extension must be >= 0")
    g = _grid(model)
    a = _active(f)
    rows = _small_rows(model, f)
    if rows.size == 0:
        raise RegimeError("f has no component on levels with 2 lam_k < lam_1")
    fs = g.phi[:, rows] @ a[rows]
    head = float(g.w @ (fs * fs * g.phi1))
    ix = np.ix_(rows, rows)
    P = g.pair_matrix(g.A * g.phi1)[ix]
    Q = g.pair_matrix(g.phi1)[ix]
    lr = g.lam[rows]
    c = model.lambda1 - lr[:, None] - lr[None, :]
    decay = np.exp(-c * extension)
    return float(a[rows] @ (P * -np.expm1(-c * extension) / c + Q * decay) @ a[rows]) - head


def eta2_large(model: ModelSpec, f: FunctionExpansion, x, method: str = "closed") -> float:
    """Pointwise limit of ``e^{2 lam_gamma t} E_x <f, X_t>^2``: ``int_0^inf e^{2 lam_gamma s} T_s(A f_1^2)(x) ds``."""
    _require(model, f, "large", "eta2_large")
    g = _grid(model)
    lam_g = model.basis.lam(f.gamma)
    f1 = g.phi @ f.level_vector(f.gamma)
    c, _ = g.project(g.A * f1 * f1)
    phi_x = model.basis.evaluate(as_points(x, model.ou.d))[0]
    if method == "closed":
        den = g.lam - 2 * lam_g
        assert np.all(den > 0)
        return float((c / den) @ phi_x)
    if method == "quadrature":
        def integrand(s):
            return (c[None, :] * np.exp((2 * lam_g - g.lam)[None, :] * s[:, None])) @ phi_x

        val, _ = integrate_to_infinity(integrand, model.lambda1 - 2 * lam_g)
        return float(val)
    raise ValueError(f"unknown method {method!r}")


def remark_phi1_variance(model: ModelSpec) -> float:
    """``-(1/lam_1) int A phi_1^3 dmu``, the displayed variance for ``f = phi_1``.

    Note this omits ``-<phi_1^2, phi_1>``; ``beta2_large`` applied to ``phi_1``
    gives the variance of the centred statistic.
    """
    if not model.lambda1 < 0:
        raise ValueError("the phi_1 fluctuation variance needs a supercritical model")
    g = _grid(model)
    return float(g.w @ (g.A * g.phi1 ** 3)) / (-model.lambda1)


def predicted_variance(model: ModelSpec, f: FunctionExpansion) -> tuple[str, float]:
    """Theorem label and limiting variance of the matching normalized statistic.

    ``thm1.3``: sigma_f^2; ``thm1.4``: rho_f^2; ``thm2.1``: sigma^2 of f_(l)
    plus beta_f^2; ``thm2.3``: rho^2 of f_(c).
    """
    reg = regime(model, f)
    if reg == "small":
        return "thm1.3", sigma2_small(model, f)
    if reg == "critical":
        return "thm1.4", rho2_critical(model, f)
    fs = f if f.split is not None else split(f)
    if fs.split.critical.gamma is not None:
        return "thm2.3", rho2_critical(model, fs.split.critical)
    large_part = fs.split.large
    var_l = 0.0 if large_part.gamma is None else sigma2_small(model, large_part)
    return "thm2.1", var_l + beta2_large(model, f)
