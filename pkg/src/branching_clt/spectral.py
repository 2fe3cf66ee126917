"""Spectrum of the mean-semigroup generator for branching OU systems.

The generator is the OU operator ``0.5 * sigma2 * Laplacian - b x . grad``
plus the multiplicative potential ``alpha(x)``. Everything here is expressed
in the orthonormal Hermite basis of L2(mu), where mu is the OU invariant
Gaussian. Eigenvalues are stored negated (``lam``) so that the generator has
eigenvalues ``-lam_1 > -lam_2 > ...``.

Functions acting on space take arrays of shape ``(n, d)`` and return ``(n,)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from math import comb, sqrt
from typing import Callable, Mapping

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

__all__ = [
    "OUParams",
    "SpectralBasis",
    "FunctionExpansion",
    "SpectralError",
    "TruncationWarning",
    "closed_form_spectrum",
    "galerkin_spectrum",
    "inner_product",
    "expand",
    "split",
    "classify",
    "is_critical_pair",
    "quadrature_grid",
    "hermite_basis",
    "multi_indices",
]

DEFAULT_QUAD_ORDER = 128
CLUSTER_RTOL = 1e-6
CRITICAL_RTOL = 1e-9
ZERO_RTOL = 1e-9
_EVAL_CHUNK = 65536

SpaceFunction = Callable[[np.ndarray], np.ndarray]


class SpectralError(RuntimeError):
    """Raised when a truncated spectrum cannot be resolved reliably."""


class TruncationWarning(UserWarning):
    """The basis truncation leaves a visible part of a function unexplained."""


@dataclass(frozen=True)
class OUParams:
    """Ornstein-Uhlenbeck motion ``dX = -b X dt + sigma dB`` in R^d."""

    b: float = 1.0
    sigma2: float = 1.0
    d: int = 1

    def __post_init__(self):
        if not (self.b > 0 and np.isfinite(self.b)):
            raise ValueError(f"OU drift b must be > 0, got {self.b}")
        if not (self.sigma2 > 0 and np.isfinite(self.sigma2)):
            raise ValueError(f"OU diffusion sigma2 must be > 0, got {self.sigma2}")
        if int(self.d) != self.d or self.d < 1:
            raise ValueError(f"dimension d must be a positive integer, got {self.d}")

    @property
    def stationary_variance(self) -> float:
        """Per-coordinate variance of mu, ``sigma2 / (2 b)``."""
        return self.sigma2 / (2.0 * self.b)

    @property
    def normalization(self) -> float:
        return (self.b / (np.pi * self.sigma2)) ** (self.d / 2.0)

    def density(self, x: np.ndarray) -> np.ndarray:
        """Invariant density mu(x) with respect to Lebesgue measure."""
        x = as_points(x, self.d)
        return self.normalization * np.exp(-self.b / self.sigma2 * np.sum(x * x, axis=1))


def as_points(x, d: int) -> np.ndarray:
    """Coerce scalars, vectors or point clouds to shape ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = np.full((1, d), float(x)) if d == 1 else x.reshape(1, 1)
    elif x.ndim == 1:
        x = x.reshape(-1, 1) if d == 1 else x.reshape(1, -1)
    if x.shape[1] != d:
        raise ValueError(f"points have dimension {x.shape[1]}, expected {d}")
    return x


# ---------------------------------------------------------------------------
# Hermite machinery


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@lru_cache(maxsize=64)
def multi_indices(d: int, n_degrees: int) -> np.ndarray:
    """Multi-indices of total degree ``< n_degrees``, ordered by total degree."""
    rows = [c for deg in range(n_degrees) for c in _compositions(deg, d)]
    out = np.array(rows, dtype=np.int64).reshape(-1, d)
    out.setflags(write=False)
    return out


def _hermite_1d(z: np.ndarray, max_degree: int) -> np.ndarray:
    """Orthonormal probabilists' Hermite values ``He_n(z)/sqrt(n!)``, shape (n, max_degree+1)."""
    out = np.empty(z.shape + (max_degree + 1,))
    out[..., 0] = 1.0
    if max_degree >= 1:
        out[..., 1] = z
    for n in range(1, max_degree):
        out[..., n + 1] = (z * out[..., n] - sqrt(n) * out[..., n - 1]) / sqrt(n + 1)
    return out


def hermite_basis(x: np.ndarray, params: OUParams, indices: np.ndarray) -> np.ndarray:
    """Evaluate the mu-orthonormal Hermite tensor basis at points ``x``.

    Returns an array of shape ``(len(x), len(indices))``.
    """
    x = as_points(x, params.d)
    z = x / sqrt(params.stationary_variance)
    max_deg = int(indices.max()) if indices.size else 0
    vals = np.ones((x.shape[0], indices.shape[0]))
    for c in range(params.d):
        h = _hermite_1d(z[:, c], max_deg)
        vals *= h[:, indices[:, c]]
    return vals


@dataclass(frozen=True)
class QuadratureGrid:
    nodes: np.ndarray
    weights: np.ndarray


@lru_cache(maxsize=32)
def _grid(b: float, sigma2: float, d: int, order: int) -> QuadratureGrid:
    z, w = hermegauss(order)
    w = w / w.sum()
    scale = sqrt(sigma2 / (2.0 * b))
    mesh = np.meshgrid(*([z * scale] * d), indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    wmesh = np.meshgrid(*([w] * d), indexing="ij")
    weights = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return QuadratureGrid(nodes, weights)


def quadrature_grid(params: OUParams, order: int = DEFAULT_QUAD_ORDER) -> QuadratureGrid:
    """Tensor Gauss-Hermite rule for mu; weights sum to one."""
    if order < 1:
        raise ValueError("quadrature order must be >= 1")
    return _grid(float(params.b), float(params.sigma2), int(params.d), int(order))


def _sample(f: SpaceFunction, nodes: np.ndarray, what: str = "function") -> np.ndarray:
    vals = np.asarray(f(nodes), dtype=float)
    if vals.shape == ():
        vals = np.full(nodes.shape[0], float(vals))
    vals = vals.reshape(nodes.shape[0])
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"{what} is not finite at quadrature node {nodes[i].tolist()}")
    return vals


def inner_product(f: SpaceFunction, g: SpaceFunction, params: OUParams,
                  quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    """``<f, g>`` in L2(mu) by Gauss-Hermite quadrature."""
    grid = quadrature_grid(params, quad_order)
    fv = _sample(f, grid.nodes, "f")
    gv = _sample(g, grid.nodes, "g")
    return float(np.dot(grid.weights, fv * gv))


# ---------------------------------------------------------------------------
# Spectral basis


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    """Distinct eigen-levels ``lam_k`` with orthonormal eigenfunctions.

    ``vectors`` holds one row per eigenfunction (level-major order) with the
    Hermite coefficients over ``multi_indices(d, basis_size)``.
    """

    params: OUParams
    eigenvalues: np.ndarray
    multiplicities: tuple
    vectors: np.ndarray
    basis_size: int
    source: str
    residuals: np.ndarray | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if np.any(np.diff(lam) <= 0):
            raise SpectralError("eigenvalues must be strictly increasing")
        if sum(self.multiplicities) != self.vectors.shape[0]:
            raise SpectralError("multiplicities do not match the number of eigenvectors")

    @property
    def k_max(self) -> int:
        return len(self.eigenvalues)

    @property
    def indices(self) -> np.ndarray:
        return multi_indices(self.params.d, self.basis_size)

    @property
    def labels(self) -> list[tuple[int, int]]:
        """``(k, j)`` labels (1-based) in row order of ``vectors``."""
        return [(k + 1, j + 1) for k, n in enumerate(self.multiplicities) for j in range(n)]

    @property
    def level_of_row(self) -> np.ndarray:
        return np.repeat(np.arange(1, self.k_max + 1), self.multiplicities)

    @property
    def row_eigenvalues(self) -> np.ndarray:
        return np.repeat(np.asarray(self.eigenvalues, float), self.multiplicities)

    def lam(self, k: int) -> float:
        return float(self.eigenvalues[k - 1])

    def row(self, k: int, j: int) -> int:
        if not (1 <= k <= self.k_max and 1 <= j <= self.multiplicities[k - 1]):
            raise KeyError(f"eigenfunction ({k}, {j}) is outside the basis")
        return int(sum(self.multiplicities[: k - 1]) + j - 1)

    def level_rows(self, k: int) -> slice:
        start = int(sum(self.multiplicities[: k - 1]))
        return slice(start, start + self.multiplicities[k - 1])

    def _used_columns(self, rows) -> np.ndarray:
        used = np.flatnonzero(np.any(self.vectors[rows] != 0.0, axis=0))
        return used if used.size else np.array([0])

    def evaluate(self, x, rows=None) -> np.ndarray:
        """Eigenfunction values, shape ``(n_points, n_rows)``."""
        x = as_points(x, self.params.d)
        rows = np.arange(self.vectors.shape[0]) if rows is None else np.atleast_1d(rows)
        cols = self._used_columns(rows)
        vec = self.vectors[np.ix_(rows, cols)]
        idx = self.indices[cols]
        out = np.empty((x.shape[0], len(rows)))
        for s in range(0, x.shape[0], _EVAL_CHUNK):
            out[s:s + _EVAL_CHUNK] = hermite_basis(x[s:s + _EVAL_CHUNK], self.params, idx) @ vec.T
        return out

    def combination(self, weights: np.ndarray) -> SpaceFunction:
        """Function ``x -> sum_r weights[r] * phi_r(x)``."""
        weights = np.asarray(weights, dtype=float)
        rows = np.flatnonzero(weights)

        def fn(x):
            x = as_points(x, self.params.d)
            if rows.size == 0:
                return np.zeros(x.shape[0])
            return self.evaluate(x, rows) @ weights[rows]

        return fn

    def eigenfunction(self, k: int, j: int = 1) -> SpaceFunction:
        w = np.zeros(self.vectors.shape[0])
        w[self.row(k, j)] = 1.0
        return self.combination(w)

    def grid_values(self, quad_order: int = DEFAULT_QUAD_ORDER) -> np.ndarray:
        """Eigenfunctions on the quadrature nodes, cached per order."""
        cache = self.__dict__.setdefault("_grid_cache", {})
        if quad_order not in cache:
            grid = quadrature_grid(self.params, quad_order)
            vals = self.evaluate(grid.nodes)
            vals.setflags(write=False)
            cache[quad_order] = vals
        return cache[quad_order]

    def gram(self, quad_order: int = DEFAULT_QUAD_ORDER) -> np.ndarray:
        grid = quadrature_grid(self.params, quad_order)
        phi = self.grid_values(quad_order)
        return phi.T @ (grid.weights[:, None] * phi)


def closed_form_spectrum(params: OUParams, alpha_const: float, K_max: int) -> SpectralBasis:
    """OU spectrum shifted by a constant potential.

    Level k collects the Hermite products of total degree ``k-1`` and has
    ``lam_k = b (k-1) - alpha``.
    """
    if int(K_max) != K_max or K_max < 1:
        raise ValueError(f"K_max must be a positive integer, got {K_max}")
    K_max = int(K_max)
    d = params.d
    lam = params.b * np.arange(K_max) - float(alpha_const)
    mult = tuple(comb(k + d - 1, d - 1) for k in range(K_max))
    n = sum(mult)
    return SpectralBasis(params, lam, mult, np.eye(n), K_max, "closed_form")


def galerkin_spectrum(params: OUParams, alpha: SpaceFunction, N: int, K_max: int,
                      quad_order: int = DEFAULT_QUAD_ORDER,
                      cluster_rtol: float = CLUSTER_RTOL) -> SpectralBasis:
    """Top ``K_max`` levels of ``L + alpha`` from a Hermite-Galerkin matrix.

    ``N`` is the truncation order: Hermite products of total degree ``< N``.
    """
    if K_max < 1:
        raise ValueError("K_max must be >= 1")
    if N < K_max + 2:
        raise ValueError(f"basis size N={N} too small for K_max={K_max}; need N >= K_max + 2")
    grid = quadrature_grid(params, quad_order)
    a = _sample(alpha, grid.nodes, "alpha")
    idx = multi_indices(params.d, N)
    H = hermite_basis(grid.nodes, params, idx)
    M = H.T @ (grid.weights[:, None] * a[:, None] * H)
    M = 0.5 * (M + M.T)
    M[np.diag_indices_from(M)] -= params.b * idx.sum(axis=1)
    nu, V = np.linalg.eigh(M)
    lam = -nu[::-1]
    V = V[:, ::-1]

    # cluster numerically split degeneracies
    levels: list[list[int]] = [[0]]
    for i in range(1, len(lam)):
        if abs(lam[i] - lam[levels[-1][0]]) <= cluster_rtol * max(1.0, abs(lam[i])):
            levels[-1].append(i)
        else:
            levels.append([i])
    if len(levels) <= K_max:
        raise SpectralError(
            f"only {len(levels)} distinct levels resolved with N={N}; increase N above K_max={K_max}")
    last = levels[K_max - 1]
    nxt = levels[K_max][0]
    gap = lam[nxt] - lam[last[-1]]
    if gap <= 10 * cluster_rtol * max(1.0, abs(lam[nxt])):
        raise SpectralError(
            f"level {K_max} is not separated from level {K_max + 1}: gap {gap:.3e} "
            f"is below the cluster tolerance; change K_max")

    keep = [i for lev in levels[:K_max] for i in lev]
    vecs = V[:, keep].T.copy()
    # phi_1 positive; other signs fixed by the largest coefficient
    if vecs[0, 0] < 0:
        vecs[0] *= -1
    for r in range(1, vecs.shape[0]):
        piv = np.argmax(np.abs(vecs[r]))
        if vecs[r, piv] < 0:
            vecs[r] *= -1
    eig = np.array([np.mean(lam[lev]) for lev in levels[:K_max]])
    resid = np.linalg.norm(M @ vecs.T + vecs.T * lam[keep], axis=0)
    return SpectralBasis(params, eig, tuple(len(lev) for lev in levels[:K_max]),
                         vecs, N, "galerkin", resid)


# ---------------------------------------------------------------------------
# Function expansions


@dataclass(frozen=True)
class Split:
    small: "FunctionExpansion"
    critical: "FunctionExpansion"
    large: "FunctionExpansion"
    leading: "FunctionExpansion"


@dataclass(frozen=True, eq=False)
class FunctionExpansion:
    """Coefficients ``a[(k, j)] = <f, phi_j^(k)>`` over a truncated basis.

    ``gamma`` is the first level carrying a coefficient above
    ``zero_threshold`` (``None`` for the zero function). ``func`` is the
    function itself when known; otherwise the basis reconstruction is used.
    """

    basis: SpectralBasis
    coeffs: Mapping[tuple[int, int], float]
    gamma: int | None
    norm: float
    residual: float
    zero_threshold: float
    func: SpaceFunction | None = None
    warning: str | None = None
    split: Split | None = field(default=None, repr=False)

    @classmethod
    def from_coeffs(cls, basis: SpectralBasis, coeffs: Mapping[tuple[int, int], float],
                    zero_threshold: float | None = None) -> "FunctionExpansion":
        full = {lab: 0.0 for lab in basis.labels}
        for key, val in coeffs.items():
            key = tuple(key)
            if key not in full:
                raise KeyError(f"eigenfunction {key} is outside the basis")
            full[key] = float(val)
        norm = sqrt(sum(v * v for v in full.values()))
        thr = ZERO_RTOL * norm if zero_threshold is None else zero_threshold
        return cls(basis, full, _gamma(full, thr), norm, 0.0, thr)

    @property
    def vector(self) -> np.ndarray:
        """Coefficients in basis row order."""
        return np.array([self.coeffs[lab] for lab in self.basis.labels])

    @property
    def levels(self) -> list[int]:
        """Levels carrying at least one coefficient above the zero threshold."""
        return sorted({k for (k, _), v in self.coeffs.items() if abs(v) > self.zero_threshold})

    def level_vector(self, k: int) -> np.ndarray:
        v = np.zeros(self.basis.vectors.shape[0])
        sl = self.basis.level_rows(k)
        v[sl] = self.vector[sl]
        return v

    def reconstruct(self, x) -> np.ndarray:
        return self.basis.combination(self.vector)(x)

    def __call__(self, x) -> np.ndarray:
        if self.func is not None:
            return np.asarray(self.func(as_points(x, self.basis.params.d)), dtype=float)
        return self.reconstruct(x)

    def scaled(self, c: float) -> "FunctionExpansion":
        coeffs = {k: c * v for k, v in self.coeffs.items()}
        func = None if self.func is None else (lambda x, f=self.func: c * np.asarray(f(x)))
        out = replace(self, coeffs=coeffs, norm=abs(c) * self.norm, residual=abs(c) * self.residual,
                      zero_threshold=abs(c) * self.zero_threshold, func=func, split=None)
        return out

    def restricted(self, levels) -> "FunctionExpansion":
        """Projection onto the given eigen-levels; other coefficients become zero."""
        levels = set(levels)
        sub = {lab: (v if lab[0] in levels else 0.0) for lab, v in self.coeffs.items()}
        norm = sqrt(sum(v * v for v in sub.values()))
        return FunctionExpansion(self.basis, sub, _gamma(sub, self.zero_threshold), norm, 0.0,
                                 self.zero_threshold)


def _gamma(coeffs: Mapping[tuple[int, int], float], threshold: float) -> int | None:
    hits = [k for (k, _), v in coeffs.items() if abs(v) > threshold]
    return min(hits) if hits else None


def expand(f: SpaceFunction, basis: SpectralBasis, zero_threshold: float | None = None,
           quad_order: int = DEFAULT_QUAD_ORDER, residual_rtol: float = 1e-6) -> FunctionExpansion:
    """Project ``f`` onto the eigenbasis and classify its leading level."""
    grid = quadrature_grid(basis.params, quad_order)
    fv = _sample(f, grid.nodes, "f")
    phi = basis.grid_values(quad_order)
    a = phi.T @ (grid.weights * fv)
    norm2 = float(np.dot(grid.weights, fv * fv))
    rest = fv - phi @ a
    residual = sqrt(max(float(np.dot(grid.weights, rest * rest)), 0.0))
    norm = sqrt(norm2)
    thr = ZERO_RTOL * norm if zero_threshold is None else zero_threshold
    coeffs = dict(zip(basis.labels, a.tolist()))
    warning = None
    if norm > 0 and residual > residual_rtol * norm:
        warning = (f"truncation residual {residual:.3e} is {residual / norm:.2e} of ||f||; "
                   f"raise K_max (currently {basis.k_max})")
        warnings.warn(warning, TruncationWarning, stacklevel=2)
    return FunctionExpansion(basis, coeffs, _gamma(coeffs, thr), norm, residual, thr, f, warning)


def is_critical_pair(lam_k: float, lam_1: float, rtol: float = CRITICAL_RTOL) -> bool:
    """``2 lam_k == lam_1`` up to the regime tolerance."""
    return abs(2.0 * lam_k - lam_1) <= rtol * max(1.0, abs(lam_1))


def classify(lam_gamma: float, lam_1: float) -> str:
    """Regime of a function whose leading level has eigenvalue ``lam_gamma``."""
    if is_critical_pair(lam_gamma, lam_1):
        return "critical"
    return "large" if lam_1 > 2.0 * lam_gamma else "small"


def split(expansion: FunctionExpansion, lambda1: float | None = None,
          basis: SpectralBasis | None = None) -> FunctionExpansion:
    """Partition the coefficient levels by the sign of ``2 lam_k - lam_1``.

    Returns a copy of ``expansion`` with ``split`` populated. The small,
    critical and large parts partition the coefficient keys exactly.
    """
    basis = expansion.basis if basis is None else basis
    if basis is not expansion.basis:
        raise ValueError("expansion was computed against a different basis")
    lambda1 = basis.lam(1) if lambda1 is None else float(lambda1)
    kinds = {}
    for k in range(1, basis.k_max + 1):
        lk = basis.lam(k)
        kinds[k] = "critical" if is_critical_pair(lk, lambda1) else ("small" if 2 * lk < lambda1 else "large")
    small = expansion.restricted(k for k, v in kinds.items() if v == "small")
    crit = expansion.restricted(k for k, v in kinds.items() if v == "critical")
    large = expansion.restricted(k for k, v in kinds.items() if v == "large")
    if expansion.func is not None:
        # the large part carries whatever the truncation left out
        s_fn, c_fn, f_fn = small.reconstruct, crit.reconstruct, expansion.func

        def large_fn(x):
            return np.asarray(f_fn(x), dtype=float) - s_fn(x) - c_fn(x)

        large = replace(large, func=large_fn, residual=expansion.residual)
    lead_levels = [] if expansion.gamma is None else [expansion.gamma]
    leading = expansion.restricted(lead_levels)
    return replace(expansion, split=Split(small, crit, large, leading))
