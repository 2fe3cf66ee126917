"""Exact-in-law simulation of branching OU particle systems.

Branch times come from thinning a Poisson clock of rate ``B >= sup beta``;
between events particles move by the exact Gaussian OU transition. Every
replicate owns a counter-based Philox stream keyed by ``(seed, replicate)``,
so ensembles are identical whatever the execution order.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .moments import ModelSpec
from .spectral import OUParams, as_points

__all__ = [
    "Configuration",
    "SimConfig",
    "Trajectory",
    "ThinningError",
    "replicate_rng",
    "ou_transition",
    "simulate",
    "functional",
    "martingale_W",
    "martingale_H",
    "survival_indicator",
    "run_ensemble",
    "EnsembleRun",
    "write_trajectory_csv",
]

_MASK64 = (1 << 64) - 1
DEFAULT_POP_CAP = 2_000_000


class ThinningError(RuntimeError):
    """A sampled branching rate exceeded the thinning bound."""


@dataclass(frozen=True, eq=False)
class Configuration:
    """Particle positions at time ``t``; an empty array means extinction."""

    t: float
    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos.reshape(-1, 1)
        if not np.all(np.isfinite(pos)):
            raise ValueError("particle coordinates must be finite")
        object.__setattr__(self, "positions", pos)

    @classmethod
    def single(cls, x, d: int = 1) -> "Configuration":
        return cls(0.0, as_points(x, d))

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class SimConfig:
    horizon: float
    snapshot_times: Sequence[float] = ()
    pop_cap: int = DEFAULT_POP_CAP
    rng_seed: int = 0
    thinning_bound: float | None = None

    def __post_init__(self):
        if not self.horizon >= 0:
            raise ValueError("horizon must be >= 0")
        times = tuple(sorted(float(s) for s in self.snapshot_times))
        if any(s < 0 or s > self.horizon for s in times):
            raise ValueError("snapshot times must lie in [0, horizon]")
        if self.horizon not in times:
            times = times + (float(self.horizon),)
        object.__setattr__(self, "snapshot_times", times)
        if self.pop_cap < 1:
            raise ValueError("pop_cap must be >= 1")
        if self.thinning_bound is not None and self.thinning_bound < 0:
            raise ValueError("thinning bound must be >= 0")

    def bound_for(self, model: ModelSpec) -> float:
        """Thinning rate, validated against beta on the model's probe grid."""
        sup = model.beta_sup()
        if self.thinning_bound is None:
            return sup
        if sup > self.thinning_bound:
            raise ThinningError(
                f"thinning bound {self.thinning_bound} is below sup beta ~ {sup} on the probe grid")
        return float(self.thinning_bound)


@dataclass(eq=False)
class Trajectory:
    snapshots: dict = field(default_factory=dict)
    extinct: bool = False
    capped: bool = False
    event_count: int = 0

    def at(self, t: float) -> Configuration:
        return self.snapshots[float(t)]

    @property
    def final(self) -> Configuration:
        return self.snapshots[max(self.snapshots)]


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, replicate)``."""
    key = np.array([int(seed) & _MASK64, int(replicate) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def ou_transition(x, dt, params: OUParams, rng: np.random.Generator) -> np.ndarray:
    """Exact OU step: mean ``x e^{-b dt}``, variance ``sigma2 (1 - e^{-2 b dt}) / (2 b)`` per coordinate.

    ``dt`` may be a scalar or one value per point.
    """
    x = np.asarray(x, dtype=float)
    pts = x.reshape(-1, params.d) if x.ndim < 2 else x
    dt = np.broadcast_to(np.asarray(dt, dtype=float), (pts.shape[0],))
    if np.any(dt < 0):
        raise ValueError("dt must be >= 0")
    decay = np.exp(-params.b * dt)[:, None]
    sd = np.sqrt(-np.expm1(-2.0 * params.b * dt) * params.stationary_variance)[:, None]
    out = pts * decay + sd * rng.standard_normal(pts.shape)
    return out.reshape(x.shape)


class _Capped(Exception):
    pass


def _sampler(model: ModelSpec, bound: float, rng: np.random.Generator):
    """Closures for acceptance and offspring draws, specialised for constant laws."""
    const_beta = not callable(model.beta)
    exact_clock = const_beta and float(model.beta) == bound

    if exact_clock:
        def accept(pos):
            return np.ones(pos.shape[0], dtype=bool)
    else:
        def accept(pos):
            b = model.beta_fn(pos)
            if np.any(b > bound * (1 + 1e-12)):
                i = int(np.argmax(b))
                raise ThinningError(
                    f"beta({pos[i].tolist()}) = {b[i]} exceeds thinning bound {bound}; "
                    f"the simulation would no longer be exact")
            return rng.random(pos.shape[0]) * bound < b

    if callable(model.offspring):
        def offspring(pos):
            cdf = np.cumsum(model.pmf(pos), axis=1)
            u = rng.random(pos.shape[0])
            k = (cdf <= u[:, None]).sum(axis=1)
            return np.minimum(k, cdf.shape[1] - 1)
    else:
        cdf = np.cumsum(np.asarray(model.offspring, dtype=float))
        deterministic = np.flatnonzero(np.isclose(model.offspring, 1.0, rtol=0, atol=1e-15))
        if deterministic.size:
            n_fixed = int(deterministic[0])

            def offspring(pos):
                return np.full(pos.shape[0], n_fixed)
        else:
            def offspring(pos):
                k = np.searchsorted(cdf, rng.random(pos.shape[0]), side="right")
                return np.minimum(k, len(cdf) - 1)

    return accept, offspring


def _advance(pos, t0, t1, model, bound, rng, accept, offspring, pop_cap, counter):
    """Run every particle from ``t0`` to ``t1``; returns positions at ``t1``."""
    params = model.ou
    if pos.shape[0] == 0 or t1 == t0:
        return pos
    if bound == 0:
        return ou_transition(pos, t1 - t0, params, rng)
    clock = np.full(pos.shape[0], float(t0))
    done = []
    n_done = 0
    while pos.shape[0]:
        tau = clock + rng.standard_exponential(pos.shape[0]) / bound
        fin = tau >= t1
        if fin.any():
            done.append(ou_transition(pos[fin], t1 - clock[fin], params, rng))
            n_done += done[-1].shape[0]
            keep = ~fin
            pos, clock, tau = pos[keep], clock[keep], tau[keep]
            if pos.shape[0] == 0:
                break
        pos = ou_transition(pos, tau - clock, params, rng)
        clock = tau
        acc = accept(pos)
        if acc.any():
            counter[0] += int(acc.sum())
            k = offspring(pos[acc])
            stay = ~acc
            pos = np.concatenate([pos[stay], np.repeat(pos[acc], k, axis=0)])
            clock = np.concatenate([clock[stay], np.repeat(clock[acc], k)])
        if n_done + pos.shape[0] > pop_cap:
            raise _Capped
    if not done:
        return np.empty((0, params.d))
    return np.concatenate(done) if len(done) > 1 else done[0]


def simulate(model: ModelSpec, init: Configuration, cfg: SimConfig,
             rng: np.random.Generator | None = None) -> Trajectory:
    """One exact realisation; snapshots at ``cfg.snapshot_times`` (horizon always included)."""
    if init.t != 0:
        raise ValueError("initial configuration must be at t = 0")
    if init.positions.shape[1] != model.ou.d:
        raise ValueError("initial positions have the wrong dimension")
    rng = replicate_rng(cfg.rng_seed, 0) if rng is None else rng
    bound = cfg.bound_for(model)
    accept, offspring = _sampler(model, bound, rng)
    traj = Trajectory()
    counter = [0]
    pos = init.positions.copy()
    if len(pos) > cfg.pop_cap:
        traj.capped = True
        return traj
    t_cur = 0.0
    for t_snap in cfg.snapshot_times:
        try:
            pos = _advance(pos, t_cur, t_snap, model, bound, rng, accept, offspring, cfg.pop_cap, counter)
        except _Capped:
            traj.capped = True
            break
        t_cur = t_snap
        traj.snapshots[t_snap] = Configuration(t_snap, pos)
    traj.event_count = counter[0]
    traj.extinct = (not traj.capped) and len(traj.final) == 0
    return traj


def functional(config: Configuration, f: Callable) -> float:
    """``<f, X_t>``: sum of ``f`` over particle positions."""
    if len(config) == 0:
        return 0.0
    vals = np.asarray(f(config.positions), dtype=float).reshape(len(config))
    bad = ~np.isfinite(vals)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise ValueError(f"f is not finite at particle position {config.positions[i].tolist()}")
    return float(math.fsum(vals))


def martingale_W(config: Configuration, model: ModelSpec) -> float:
    """``W_t = e^{lam_1 t} <phi_1, X_t>``."""
    return martingale_H(config, model, 1, 1)


def martingale_H(config: Configuration, model: ModelSpec, k: int, j: int) -> float:
    """``H_t^{k,j} = e^{lam_k t} <phi_j^(k), X_t>``."""
    row = model.basis.row(k, j)
    if len(config) == 0:
        return 0.0
    vals = model.basis.evaluate(config.positions, [row])[:, 0]
    return math.exp(model.basis.lam(k) * config.t) * float(math.fsum(vals))


def survival_indicator(traj: Trajectory, threshold: float = 0.0,
                       model: ModelSpec | None = None) -> bool | None:
    """Proxy for non-extinction: alive at the last snapshot and ``W >= threshold``.

    Capped trajectories are indeterminate and return ``None``.
    """
    if traj.capped:
        return None
    final = traj.final
    if len(final) == 0:
        return False
    if threshold > 0:
        if model is None:
            raise ValueError("a positive W threshold needs the model")
        return martingale_W(final, model) >= threshold
    return True


@dataclass
class EnsembleRun:
    rows: list
    n_requested: int
    aborted: str | None = None


def run_ensemble(model: ModelSpec, init: Configuration, cfg: SimConfig, n_replicates: int,
                 reducer: Callable[[int, Trajectory], object], threads: int = 1,
                 chunk: int = 16, abort_capped_fraction: float = 0.5) -> EnsembleRun:
    """Simulate replicates ``0..n-1`` and reduce each trajectory as it finishes.

    Results are ordered by replicate index. If more than
    ``abort_capped_fraction`` of the first chunk hits ``pop_cap`` the run stops
    and says so in ``aborted`` (chunking does not depend on ``threads``).
    """
    def one(rep):
        traj = simulate(model, init, cfg, replicate_rng(cfg.rng_seed, rep))
        return traj.capped, reducer(rep, traj)

    rows, aborted = [], None
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for start in range(0, n_replicates, chunk):
            reps = range(start, min(start + chunk, n_replicates))
            out = list(pool.map(one, reps)) if pool else [one(r) for r in reps]
            rows.extend(r for _, r in out)
            if start == 0:
                capped = sum(c for c, _ in out)
                if capped > abort_capped_fraction * len(out):
                    aborted = (f"{capped} of the first {len(out)} replicates exceeded pop_cap="
                               f"{cfg.pop_cap}; run stopped")
                    break
    finally:
        if pool:
            pool.shutdown()
    return EnsembleRun(rows, n_replicates, aborted)


def write_trajectory_csv(path, trajectories: Iterable[tuple[int, Trajectory]], d: int,
                         header: str = "") -> None:
    """One row per (replicate, snapshot_time, particle_index, coordinates...)."""
    with open(path, "w", newline="") as fh:
        fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["replicate", "snapshot_time", "particle_index"] + [f"x{c + 1}" for c in range(d)])
        for rep, traj in trajectories:
            for t in sorted(traj.snapshots):
                for i, p in enumerate(traj.snapshots[t].positions):
                    w.writerow([rep, repr(float(t)), i] + [repr(float(v)) for v in p])
