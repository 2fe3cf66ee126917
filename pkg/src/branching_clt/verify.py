"""Normalized CLT statistics from simulated ensembles and their limit-law checks."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .moments import (
    ModelSpec,
    RegimeError,
    beta2_proxy,
    mean_Tt,
    predicted_variance,
    regime,
    sigma2_small,
)
from .particle import (
    DEFAULT_POP_CAP,
    Configuration,
    SimConfig,
    Trajectory,
    functional,
    martingale_W,
    run_ensemble,
    survival_indicator,
)
from .spectral import FunctionExpansion, expand, split

__all__ = [
    "Scenario",
    "Thresholds",
    "EnsembleReport",
    "L2Report",
    "stat_small",
    "stat_critical",
    "stat_large",
    "stat_large_critical",
    "limit_law_tests",
    "run_scenario",
    "theorem12_l2_check",
    "histogram_rows",
]

log = logging.getLogger(__name__)

THEOREMS = {"thm1.3": "small", "thm1.4": "critical", "thm2.1": "large", "thm2.3": "large"}


def _with_split(f: FunctionExpansion) -> FunctionExpansion:
    return f if f.split is not None else split(f)


def _phi1_sum(config: Configuration, model: ModelSpec) -> float:
    return functional(config, model.phi1)


def _ratio(num: float, den: float) -> float:
    return num / math.sqrt(den) if den > 0 else math.nan


def _centering(traj: Trajectory, model: ModelSpec, f: FunctionExpansion, t: float,
               extension: float) -> float:
    """``sum_{2 lam_k < lam_1} e^{-lam_k t} sum_j a_j^k H^{k,j}_{t + extension}``."""
    small = _with_split(f).split.small
    rows = np.flatnonzero(small.vector)
    if rows.size == 0:
        return 0.0
    late = traj.at(t + extension)
    if len(late) == 0:
        return 0.0
    lam = model.basis.row_eigenvalues[rows]
    sums = model.basis.evaluate(late.positions, rows).sum(axis=0)
    # e^{-lam t} H_{t+D} = e^{lam D} <phi, X_{t+D}>
    return float(np.sum(small.vector[rows] * np.exp(lam * extension) * sums))


def _check(model, f, wanted, name):
    got = regime(model, f)
    if got != wanted:
        raise RegimeError(f"{name} needs the {wanted} regime, f is in the {got} regime")


def stat_small(traj: Trajectory, model: ModelSpec, f: FunctionExpansion, t: float) -> float:
    """``<f, X_t> / sqrt(<phi_1, X_t>)``; NaN when the population is empty."""
    _check(model, f, "small", "stat_small")
    x = traj.at(t)
    return _ratio(functional(x, f), _phi1_sum(x, model))


def stat_critical(traj: Trajectory, model: ModelSpec, f: FunctionExpansion, t: float) -> float:
    """``<f, X_t> / sqrt(t <phi_1, X_t>)``."""
    _check(model, f, "critical", "stat_critical")
    x = traj.at(t)
    return _ratio(functional(x, f), t * _phi1_sum(x, model))


def stat_large(traj: Trajectory, model: ModelSpec, f: FunctionExpansion, t: float,
               extension: float) -> float:
    """Centred statistic with ``H_inf`` proxied by ``H_{t+extension}`` on the same path."""
    _check(model, f, "large", "stat_large")
    if _with_split(f).split.critical.gamma is not None:
        raise RegimeError("f has a critical component; use stat_large_critical")
    x = traj.at(t)
    return _ratio(functional(x, f) - _centering(traj, model, f, t, extension), _phi1_sum(x, model))


def stat_large_critical(traj: Trajectory, model: ModelSpec, f: FunctionExpansion, t: float,
                        extension: float) -> float:
    """As :func:`stat_large` with the extra ``t^{-1/2}``; needs a critical component."""
    _check(model, f, "large", "stat_large_critical")
    if _with_split(f).split.critical.gamma is None:
        raise RegimeError("f has no critical component; use stat_large")
    x = traj.at(t)
    return _ratio(functional(x, f) - _centering(traj, model, f, t, extension),
                  t * _phi1_sum(x, model))


_STATS = {"thm1.3": stat_small, "thm1.4": stat_critical}


@dataclass(frozen=True, eq=False)
class Scenario:
    """A model, a test function and a time at which to test one theorem.

    ``theorem`` is derived from the regime; passing ``expect`` asserts it.
    """

    model: ModelSpec
    f: FunctionExpansion
    t: float
    extension: float | None = None
    n_replicates: int = 1000
    x0: tuple = (0.0,)
    pop_cap: int = DEFAULT_POP_CAP
    seed: int = 0
    w_threshold: float = 0.0
    expect: str | None = None
    regime: str = field(init=False)
    theorem: str = field(init=False)

    def __post_init__(self):
        f = _with_split(self.f)
        object.__setattr__(self, "f", f)
        reg = regime(self.model, f)
        if reg == "large":
            thm = "thm2.3" if f.split.critical.gamma is not None else "thm2.1"
        else:
            thm = "thm1.3" if reg == "small" else "thm1.4"
        if self.expect is not None and self.expect != thm:
            raise RegimeError(
                f"scenario asks for {self.expect} ({THEOREMS.get(self.expect, '?')} regime) "
                f"but f is in the {reg} regime, which is {thm}")
        object.__setattr__(self, "regime", reg)
        object.__setattr__(self, "theorem", thm)
        if thm in ("thm2.1", "thm2.3"):
            ext = self.t if self.extension is None else self.extension
            if not ext > 0:
                raise ValueError("large-regime scenarios need extension > 0")
            object.__setattr__(self, "extension", float(ext))
        else:
            object.__setattr__(self, "extension", 0.0 if self.extension is None else float(self.extension))
        if self.t <= 0:
            raise ValueError("t must be > 0")

    @property
    def horizon(self) -> float:
        return self.t + self.extension

    def init(self) -> Configuration:
        return Configuration.single(np.asarray(self.x0, dtype=float), self.model.ou.d)

    def sim_config(self) -> SimConfig:
        times = (self.t,) if self.extension == 0 else (self.t, self.horizon)
        return SimConfig(self.horizon, times, self.pop_cap, self.seed)

    def predicted(self) -> float:
        return predicted_variance(self.model, self.f)[1]

    def proxy_variance(self) -> float | None:
        """Limit variance with ``H_inf`` replaced by its proxy at ``t + extension`` (thm2.1 scenarios only)."""
        if self.theorem != "thm2.1":
            return None
        large = self.f.split.large
        var_l = 0.0 if large.gamma is None else sigma2_small(self.model, large)
        return var_l + beta2_proxy(self.model, self.f, self.extension)

    def expected_population(self) -> float:
        one = expand(lambda x: np.ones(x.shape[0]), self.model.basis)
        return float(mean_Tt(self.model, one, self.horizon, np.asarray(self.x0, dtype=float)))

    def statistic(self, traj: Trajectory) -> float:
        if self.theorem in _STATS:
            return _STATS[self.theorem](traj, self.model, self.f, self.t)
        fn = stat_large if self.theorem == "thm2.1" else stat_large_critical
        return fn(traj, self.model, self.f, self.t, self.extension)


@dataclass(frozen=True)
class Thresholds:
    ks_p: float = 0.01
    var_rel: float = 0.10
    skew_se: float = 4.0
    kurt_se: float = 4.0
    corr_se: float = 4.0
    min_samples: int = 200
    checks: tuple = ("ks", "variance", "skewness", "kurtosis", "independence")


@dataclass
class EnsembleReport:
    theorem: str
    regime: str
    predicted_variance: float
    n_used: int
    proxy_variance: float | None = None
    empirical_variance: float = math.nan
    variance_se: float = math.nan
    ks_p_value: float = math.nan
    skewness: float = math.nan
    skewness_se: float = math.nan
    excess_kurtosis: float = math.nan
    excess_kurtosis_se: float = math.nan
    independence_corr: float = math.nan
    independence_corr_se: float = math.nan
    checks: dict = field(default_factory=dict)
    excluded_counts: dict = field(default_factory=dict)
    n_replicates: int = 0
    note: str | None = None
    samples: list = field(default_factory=list, repr=False)

    @property
    def underpowered(self) -> bool:
        return not self.checks

    @property
    def verdict(self) -> str:
        if self.underpowered:
            return "underpowered"
        return "pass" if all(self.checks.values()) else "fail"

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("samples")
        out["verdict"] = self.verdict
        return out


def _skew_se(n):
    return math.sqrt(6.0 * n * (n - 1) / ((n - 2) * (n + 1) * (n + 3)))


def _kurt_se(n):
    return 2.0 * _skew_se(n) * math.sqrt((n * n - 1.0) / ((n - 3) * (n + 5)))


def limit_law_tests(statistic, predicted_variance: float, w=None,
                    thresholds: Thresholds = Thresholds(), theorem: str = "",
                    regime: str = "") -> EnsembleReport:
    """Compare conditional samples of a normalized statistic with ``N(0, predicted_variance)``.

    ``w`` (same length) feeds the independence diagnostic ``corr(W, statistic^2)``.
    Fewer than ``thresholds.min_samples`` samples gives an underpowered report.
    """
    x = np.asarray(statistic, dtype=float)
    n = x.size
    rep = EnsembleReport(theorem, regime, float(predicted_variance), n)
    if n < max(thresholds.min_samples, 8):
        rep.note = f"underpowered: {n} conditional samples < {thresholds.min_samples}"
        return rep
    if not predicted_variance > 0:
        raise ValueError("predicted variance must be positive")
    xc = x - x.mean()
    var = float(np.var(x, ddof=1))
    m4 = float(np.mean(xc ** 4))
    rep.empirical_variance = var
    rep.variance_se = math.sqrt(max(m4 - var * var, 0.0) / n)
    rep.ks_p_value = float(stats.kstest(x / math.sqrt(predicted_variance), "norm").pvalue)
    rep.skewness = float(stats.skew(x, bias=False))
    rep.skewness_se = _skew_se(n)
    rep.excess_kurtosis = float(stats.kurtosis(x, bias=False))
    rep.excess_kurtosis_se = _kurt_se(n)
    if w is not None:
        w = np.asarray(w, dtype=float)
        r = float(np.corrcoef(w, x * x)[0, 1])
        rep.independence_corr = r
        rep.independence_corr_se = math.sqrt(max(1.0 - r * r, 0.0) / (n - 2))

    th = thresholds
    results = {
        "ks": rep.ks_p_value >= th.ks_p,
        "variance": abs(var / predicted_variance - 1.0) <= th.var_rel,
        "skewness": abs(rep.skewness) <= th.skew_se * rep.skewness_se,
        "kurtosis": abs(rep.excess_kurtosis) <= th.kurt_se * rep.excess_kurtosis_se,
    }
    if w is not None:
        results["independence"] = abs(rep.independence_corr) <= th.corr_se * rep.independence_corr_se
    rep.checks = {k: bool(v) for k, v in results.items() if k in th.checks}
    return rep


def run_scenario(scenario: Scenario, thresholds: Thresholds = Thresholds(), threads: int = 1,
                 variance_override: float = 1.0) -> EnsembleReport:
    """Simulate the scenario's ensemble and test the matching limit law.

    Samples enter the tests only when the replicate survived (alive at the
    horizon, ``W >= w_threshold``) and was not capped.
    """
    model, sc = scenario.model, scenario
    expected_pop = sc.expected_population()
    note = None
    if expected_pop > sc.pop_cap:
        note = (f"expected population {expected_pop:.3g} at horizon {sc.horizon} exceeds "
                f"pop_cap={sc.pop_cap}; most replicates will be capped")
        log.warning(note)

    def reducer(rep, traj):
        if traj.capped:
            return (rep, False, True, math.nan, math.nan)
        alive = bool(survival_indicator(traj, sc.w_threshold, model))
        if not alive:
            return (rep, False, False, math.nan, math.nan)
        w_t = martingale_W(traj.at(sc.t), model)
        return (rep, True, False, w_t, sc.statistic(traj))

    run = run_ensemble(model, sc.init(), sc.sim_config(), sc.n_replicates, reducer, threads)
    rows = run.rows
    used = [r for r in rows if r[1] and not r[2]]
    pred = sc.predicted() * variance_override
    report = limit_law_tests([r[4] for r in used], pred, [r[3] for r in used], thresholds,
                             sc.theorem, sc.regime)
    n_capped = sum(1 for r in rows if r[2])
    report.excluded_counts = {
        "capped": n_capped,
        "extinct": sum(1 for r in rows if not r[1] and not r[2]),
        "not_run": sc.n_replicates - len(rows),
    }
    report.n_replicates = sc.n_replicates
    report.proxy_variance = sc.proxy_variance()
    report.samples = rows
    notes = [m for m in (note, run.aborted, report.note) if m]
    report.note = "; ".join(notes) if notes else None
    if run.aborted:
        report.checks = {}
    return report


@dataclass
class L2Report:
    times: list
    horizon: float
    distances: list
    standard_errors: list
    monotone: bool
    net_decrease: bool


def theorem12_l2_check(model: ModelSpec, f: FunctionExpansion, times, n_reps: int,
                       extension: float | None = None, x0=(0.0,), seed: int = 0,
                       pop_cap: int = DEFAULT_POP_CAP, threads: int = 1) -> L2Report:
    """Empirical L2 distance between ``e^{lam_g t} <f, X_t>`` and its martingale limit.

    The limit ``sum_j a_j^g H_inf^{g,j}`` is proxied at ``T = max(times) + extension``.
    """
    reg = regime(model, f)
    if reg != "large":
        raise RegimeError(f"L2 convergence to the martingale limit needs the large regime, f is {reg}")
    times = sorted(float(t) for t in times)
    ext = times[-1] if extension is None else float(extension)
    T = times[-1] + ext
    g = f.gamma
    lam_g = model.basis.lam(g)
    sl = model.basis.level_rows(g)
    rows = np.arange(sl.start, sl.stop)
    coef = f.vector[rows]
    cfg = SimConfig(T, tuple(times) + (T,), pop_cap, seed)
    init = Configuration.single(np.asarray(x0, dtype=float), model.ou.d)

    def reducer(rep, traj):
        if traj.capped:
            return None
        late = traj.at(T)
        limit = 0.0
        if len(late):
            limit = math.exp(lam_g * T) * float(model.basis.evaluate(late.positions, rows).sum(axis=0) @ coef)
        return [math.exp(lam_g * t) * functional(traj.at(t), f) - limit for t in times]

    run = run_ensemble(model, init, cfg, n_reps, reducer, threads)
    diffs = np.array([r for r in run.rows if r is not None])
    if diffs.size == 0:
        raise RuntimeError(run.aborted or "every replicate was capped")
    sq = diffs ** 2
    dist = np.sqrt(sq.mean(axis=0))
    se = sq.std(axis=0, ddof=1) / (2 * np.maximum(dist, 1e-300) * math.sqrt(sq.shape[0]))
    comb = np.sqrt(se[1:] ** 2 + se[:-1] ** 2)
    monotone = bool(np.all(dist[1:] - dist[:-1] <= 2 * comb))
    net = bool(dist[0] - dist[-1] > 2 * math.sqrt(se[0] ** 2 + se[-1] ** 2))
    return L2Report(times, T, dist.tolist(), se.tolist(), monotone, net)


def histogram_rows(statistic, predicted_variance: float, bins: int = 40):
    """Histogram of the standardized statistic against the standard normal density."""
    z = np.asarray(statistic, dtype=float) / math.sqrt(predicted_variance)
    edges = np.linspace(-5, 5, bins + 1)
    counts, _ = np.histogram(z, edges)
    width = edges[1] - edges[0]
    dens = counts / (max(z.size, 1) * width)
    mid = 0.5 * (edges[1:] + edges[:-1])
    pdf = stats.norm.pdf(mid)
    return [(float(a), float(b), int(c), float(d), float(p))
            for a, b, c, d, p in zip(edges[:-1], edges[1:], counts, dens, pdf)]
