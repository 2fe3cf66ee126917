"""``bcl``: run spectrum, variance, simulate and verify experiments from TOML configs.

Exit codes: 0 pass, 1 fail, 2 underpowered or indeterminate, 64 config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, list_presets, load_config
from .moments import (
    RegimeError,
    beta2_large,
    beta2_proxy,
    eta2_large,
    predicted_variance,
    regime,
    remark_phi1_variance,
    rho2_critical,
    sigma2_small,
)
from .particle import DEFAULT_POP_CAP, Configuration, SimConfig, martingale_W, run_ensemble
from .spectral import classify
from .verify import Scenario, histogram_rows, run_scenario, theorem12_l2_check

EXIT_PASS, EXIT_FAIL, EXIT_UNDERPOWERED, EXIT_CONFIG = 0, 1, 2, 64

log = logging.getLogger("branching_clt")


def _clean(obj):
    """JSON-safe copy: NaN/inf become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _num(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


class _Output:
    def __init__(self, cfg: ExperimentConfig, out: str | None, command: str):
        self.cfg = cfg
        self.dir = Path(out) if out else (Path(cfg.out_dir) if cfg.out_dir else None)
        self.command = command
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    @property
    def stamp(self) -> str:
        return f"# branching_clt {__version__} config_hash={self.cfg.config_hash} command={self.command}\n"

    def report(self, payload: dict) -> str:
        doc = {"version": __version__, "config_hash": self.cfg.config_hash,
               "config": self.cfg.source, "command": self.command, **payload}
        text = json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"
        if self.dir is not None and "json" in self.cfg.formats:
            (self.dir / "report.json").write_text(text)
        return text

    def table(self, name: str, fmt: str, header, rows) -> None:
        if self.dir is None or fmt not in self.cfg.formats:
            return
        buf = io.StringIO()
        buf.write(self.stamp)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])
        (self.dir / name).write_text(buf.getvalue())


# ---------------------------------------------------------------------------
# subcommands


def cmd_spectrum(cfg: ExperimentConfig, args) -> int:
    model = cfg.model()
    basis = model.basis
    lam1 = model.lambda1
    levels = []
    for k in range(1, basis.k_max + 1):
        sl = basis.level_rows(k)
        res = float(np.max(basis.residuals[sl])) if basis.residuals is not None else 0.0
        lk = basis.lam(k)
        levels.append({"k": k, "lambda": lk, "multiplicity": int(basis.multiplicities[k - 1]),
                       "two_lambda": 2 * lk, "regime": classify(lk, lam1), "residual": res})
    out = _Output(cfg, args.out, "spectrum")
    text = out.report({"source": basis.source, "lambda1": lam1, "levels": levels})
    if args.json:
        sys.stdout.write(text)
        return EXIT_PASS
    print(f"spectrum ({basis.source}), lambda_1 = {lam1!r}")
    print(f"{'k':>3} {'lambda_k':>22} {'n_k':>4} {'2 lambda_k':>22} {'regime':>9} {'residual':>10}")
    for row in levels:
        print(f"{row['k']:>3} {row['lambda']!r:>22} {row['multiplicity']:>4} "
              f"{row['two_lambda']!r:>22} {row['regime']:>9} {row['residual']:>10.2e}")
    return EXIT_PASS


def _variance_payload(cfg: ExperimentConfig) -> dict:
    model, f = cfg.model(), cfg.function()
    reg = regime(model, f)
    thm, pred = predicted_variance(model, f)
    expect = cfg.scenario.get("expect")
    if expect is not None and expect != thm:
        raise RegimeError(f"config asks for {expect}, but f is in the {reg} regime ({thm}); refusing")
    out = {"regime": reg, "theorem": thm, "gamma": f.gamma, "lambda1": model.lambda1,
           "lambda_gamma": model.basis.lam(f.gamma), "predicted_variance": pred,
           "truncation_residual": f.residual}
    if model.lambda1 < 0:
        out["remark_phi1_variance"] = remark_phi1_variance(model)
    if thm == "thm1.3":
        q = sigma2_small(model, f, method="quadrature")
        out.update(sigma2=pred, sigma2_quadrature=q, quadrature_error_estimate=abs(q - pred))
    elif thm == "thm1.4":
        out.update(rho2=pred)
    else:
        b_closed = beta2_large(model, f)
        b_quad = beta2_large(model, f, method="quadrature")
        x0 = np.asarray(cfg.x0, dtype=float)
        out.update(beta2=b_closed, beta2_quadrature=b_quad,
                   quadrature_error_estimate=abs(b_quad - b_closed),
                   eta2_at_x0=eta2_large(model, f, x0))
        large = f.split.large
        out["sigma2_large_part"] = 0.0 if large.gamma is None else sigma2_small(model, large)
        if thm == "thm2.3":
            out["rho2_critical_part"] = rho2_critical(model, f.split.critical)
        ext = cfg.scenario.get("extension", cfg.scenario.get("t"))
        if ext is not None:
            out["extension"] = ext
            out["beta2_proxy"] = beta2_proxy(model, f, ext)
    return out


def cmd_variance(cfg: ExperimentConfig, args) -> int:
    payload = _variance_payload(cfg)
    text = _Output(cfg, args.out, "variance").report(payload)
    if args.json:
        sys.stdout.write(text)
    else:
        for key in sorted(payload):
            print(f"{key:>26} = {payload[key]!r}")
    return EXIT_PASS


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    model = cfg.model()
    sc = cfg.scenario
    t = sc.get("t", 1.0)
    times = tuple(sc.get("snapshot_times", [t]))
    horizon = max(times + (t,))
    sim = SimConfig(horizon, times, sc.get("pop_cap", DEFAULT_POP_CAP), sc.get("seed", 0))
    init = Configuration.single(np.asarray(cfg.x0, dtype=float), model.ou.d)
    n = sc.get("replicates", 100)
    dump = sc.get("dump_replicates", 5) if "trajectory" in cfg.formats else 0
    kept = {}

    def reducer(rep, traj):
        if rep < dump:
            kept[rep] = traj
        if traj.capped:
            return (rep, True, None)
        return (rep, False, [(len(traj.at(s)), martingale_W(traj.at(s), model)) for s in sim.snapshot_times])

    run = run_ensemble(model, init, sim, n, reducer, args.threads)
    done = [r[2] for r in run.rows if not r[1]]
    n_capped = sum(1 for r in run.rows if r[1])
    snaps = []
    for i, s in enumerate(sim.snapshot_times):
        pops = np.array([d[i][0] for d in done], dtype=float)
        ws = np.array([d[i][1] for d in done], dtype=float)
        m = len(pops)
        se = (lambda v: float(v.std(ddof=1) / math.sqrt(m)) if m > 1 else math.nan)
        snaps.append({"t": s, "mean_population": float(pops.mean()) if m else math.nan,
                      "mean_population_se": se(pops),
                      "var_population": float(pops.var(ddof=1)) if m > 1 else math.nan,
                      "mean_W": float(ws.mean()) if m else math.nan, "mean_W_se": se(ws),
                      "alive_fraction": float(np.mean(pops > 0)) if m else math.nan})
    payload = {"n_replicates": n, "n_run": len(run.rows), "n_capped": n_capped,
               "aborted": run.aborted, "snapshots": snaps}
    out = _Output(cfg, args.out, "simulate")
    text = out.report(payload)
    if out.dir is not None and "trajectory" in cfg.formats:
        from .particle import write_trajectory_csv
        write_trajectory_csv(out.dir / "trajectory.csv", sorted(kept.items()), model.ou.d, out.stamp)
    all_capped = n_capped == len(run.rows)
    if n_capped:
        print(f"WARNING: {n_capped} of {len(run.rows)} replicates hit pop_cap={sim.pop_cap}"
              + (f"; {run.aborted}" if run.aborted else ""), file=sys.stderr)
    if args.json:
        sys.stdout.write(text)
    else:
        for s in snaps:
            print(f"t={s['t']!r}: mean |X_t| = {s['mean_population']!r} +- {s['mean_population_se']!r}, "
                  f"mean W = {s['mean_W']!r}, alive = {s['alive_fraction']!r}")
    return EXIT_UNDERPOWERED if all_capped else EXIT_PASS


def cmd_verify(cfg: ExperimentConfig, args) -> int:
    model, f = cfg.model(), cfg.function()
    sc = cfg.scenario
    scenario = Scenario(model, f, sc.get("t", 1.0), sc.get("extension"), sc.get("replicates", 1000),
                        tuple(cfg.x0), sc.get("pop_cap", DEFAULT_POP_CAP), sc.get("seed", 0),
                        sc.get("w_threshold", 0.0), sc.get("expect"))
    report = run_scenario(scenario, cfg.thresholds, args.threads, cfg.variance_override)
    payload = report.to_dict()
    payload.update(t=scenario.t, extension=scenario.extension, seed=scenario.seed,
                   variance_override=cfg.variance_override, x0=list(scenario.x0))
    if "l2_times" in sc and not report.underpowered:
        l2 = theorem12_l2_check(model, f, sc["l2_times"], scenario.n_replicates,
                                extension=scenario.extension, x0=scenario.x0, seed=scenario.seed,
                                pop_cap=scenario.pop_cap, threads=args.threads)
        payload["l2"] = vars(l2)
        report.checks["l2"] = l2.monotone
        payload["checks"] = dict(report.checks)
        payload["verdict"] = report.verdict
    out = _Output(cfg, args.out, "verify")
    text = out.report(payload)
    out.table("samples.csv", "samples", ["replicate", "survived", "capped", "W_t", "statistic"],
              report.samples)
    used = [r[4] for r in report.samples if r[1] and not r[2]]
    pred = report.predicted_variance
    out.table("histogram.csv", "histogram",
              ["bin_left", "bin_right", "count", "empirical_density", "normal_density"],
              histogram_rows(used, pred))
    if args.json:
        sys.stdout.write(text)
    else:
        print(f"{report.theorem} ({report.regime} regime): predicted variance {pred!r}, "
              f"empirical {report.empirical_variance!r} +- {report.variance_se!r} "
              f"over {report.n_used} conditional samples")
        print(f"KS p = {report.ks_p_value!r}, checks = {payload['checks']}")
        if report.note:
            print(f"note: {report.note}", file=sys.stderr)
        print(f"verdict: {payload['verdict']}")
    return {"pass": EXIT_PASS, "fail": EXIT_FAIL}.get(payload["verdict"], EXIT_UNDERPOWERED)


COMMANDS = {"spectrum": cmd_spectrum, "variance": cmd_variance,
            "simulate": cmd_simulate, "verify": cmd_verify}


def _threads(value: str | None) -> int:
    raw = value if value is not None else os.environ.get("BCL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"--threads / BCL_THREADS: expected a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"--threads / BCL_THREADS: expected a positive integer, got {raw!r}")
    return n


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcl", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True,
                       help="TOML file or preset:NAME (" + ", ".join(list_presets()) + ")")
        s.add_argument("--seed", type=int, help="overrides scenario.seed")
        s.add_argument("--threads", help="worker threads (default $BCL_THREADS or 1)")
        s.add_argument("--out", help="output directory (overrides output.dir)")
        s.add_argument("--json", action="store_true", help="print the JSON report to stdout")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args.threads = _threads(args.threads)
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2 ** 64:
                raise ConfigError(f"--seed: must be an unsigned 64-bit integer, got {args.seed}")
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, RegimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
