"""TOML experiment configs: parsing, validation and conversion to library objects."""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .moments import ModelSpec
from .spectral import FunctionExpansion, OUParams, expand, split
from .verify import Thresholds

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "list_presets"]

_SCHEMA = {
    "model": {"b": float, "sigma2": float, "d": int, "k_max": int, "basis_size": int,
              "quad_order": int, "allow_subcritical": bool, "beta": dict, "offspring": dict},
    "model.beta": {"kind": str, "value": float, "base": float, "height": float,
                   "center": list, "width": float},
    "model.offspring": {"kind": str, "pmf": list, "pmf_near": list, "pmf_far": list,
                        "center": list, "width": float},
    "function": {"terms": list, "polynomial": list, "constant": float},
    "function.terms": {"k": int, "j": int, "coeff": float},
    "scenario": {"t": float, "extension": float, "replicates": int, "pop_cap": int, "seed": int,
                 "x0": list, "snapshot_times": list, "w_threshold": float, "expect": str,
                 "l2_times": list, "dump_replicates": int},
    "thresholds": {"ks_p": float, "var_rel": float, "skew_se": float, "kurt_se": float,
                   "corr_se": float, "min_samples": int, "checks": list,
                   "variance_override": float},
    "output": {"dir": str, "formats": list},
}
_REQUIRED = {"model": ("b", "sigma2", "beta", "offspring")}
_FORMATS = {"json", "samples", "histogram", "trajectory"}
_CHECKS = {"ks", "variance", "skewness", "kurtosis", "independence", "l2"}


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; the message names file, line and field."""


def _line_of(text: str, dotted: str) -> int | None:
    """Best-effort line number of ``section.key`` in the TOML source."""
    parts = dotted.split(".")
    section, key = parts[:-1], parts[-1]
    current = []
    header = re.compile(r"^\s*\[+\s*([A-Za-z0-9_.\s]+?)\s*\]+")
    keyline = re.compile(rf"^\s*{re.escape(key)}\s*=")
    fallback = None
    for no, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = [p.strip() for p in m.group(1).split(".")]
            if current == parts:
                fallback = no
            continue
        if keyline.match(line) and current == section:
            return no
        if keyline.match(line) and current == section[:1] and fallback is None:
            fallback = no
    return fallback


@dataclass
class _Ctx:
    source: str
    text: str

    def fail(self, dotted: str, msg: str):
        line = _line_of(self.text, dotted)
        where = f"{self.source}:{line}" if line else self.source
        raise ConfigError(f"{where}: field '{dotted}': {msg}")


def _typed(ctx: _Ctx, table: dict, schema_key: str, path: str) -> dict:
    schema = _SCHEMA[schema_key]
    if not isinstance(table, dict):
        ctx.fail(path, "expected a table")
    for key, val in table.items():
        dotted = f"{path}.{key}"
        if key not in schema:
            ctx.fail(dotted, f"unknown key (allowed: {', '.join(sorted(schema))})")
        want = schema[key]
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            table[key] = float(val)
        elif want is int and isinstance(val, bool):
            ctx.fail(dotted, "expected an integer, got a boolean")
        elif not isinstance(val, want):
            ctx.fail(dotted, f"expected {want.__name__}, got {type(val).__name__}")
        if want is float and not math.isfinite(table[key]):
            ctx.fail(dotted, "must be finite")
    return table


def _floats(ctx, path, seq, length=None):
    try:
        out = [float(v) for v in seq]
    except (TypeError, ValueError):
        ctx.fail(path, "expected a list of numbers")
    if any(isinstance(v, bool) for v in seq) or not all(math.isfinite(v) for v in out):
        ctx.fail(path, "expected finite numbers")
    if length is not None and len(out) != length:
        ctx.fail(path, f"expected {length} entries, got {len(out)}")
    return out


@dataclass
class ExperimentConfig:
    """A parsed experiment: model, test function, scenario, thresholds and output."""

    raw: dict
    source: str
    model_block: dict
    function_block: dict
    scenario: dict
    thresholds: Thresholds
    variance_override: float
    out_dir: str | None
    formats: tuple
    _model: ModelSpec | None = field(default=None, repr=False)

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        raw = json.loads(json.dumps(self.raw))
        raw.setdefault("scenario", {})["seed"] = int(seed)
        scen = dict(self.scenario, seed=int(seed))
        return ExperimentConfig(raw, self.source, self.model_block, self.function_block, scen,
                                self.thresholds, self.variance_override, self.out_dir,
                                self.formats, self._model)

    # -- library objects -------------------------------------------------

    def model(self) -> ModelSpec:
        if self._model is None:
            try:
                self._model = _build_model(self.model_block)
            except ValueError as exc:
                raise ConfigError(f"{self.source}: section 'model': {exc}") from None
        return self._model

    def function(self) -> FunctionExpansion:
        return _build_function(self.function_block, self.model())

    @property
    def x0(self) -> tuple:
        return tuple(self.scenario.get("x0", [0.0] * self.model_block.get("d", 1)))


def _bump(center, width):
    c = np.asarray(center, dtype=float)

    def w(x):
        r2 = np.sum((np.asarray(x, dtype=float) - c) ** 2, axis=1)
        return np.exp(-r2 / (2.0 * width * width))
    return w


def _build_model(m: dict) -> ModelSpec:
    ou = OUParams(m["b"], m["sigma2"], m.get("d", 1))
    beta_spec, off_spec = m["beta"], m["offspring"]
    if beta_spec["kind"] == "constant":
        beta = beta_spec["value"]
    else:
        base, height = beta_spec.get("base", 0.0), beta_spec["height"]
        bump = _bump(beta_spec["center"], beta_spec["width"])

        def beta(x):
            return base + height * bump(x)
    if off_spec["kind"] == "table":
        offspring = off_spec["pmf"]
    else:
        near = np.asarray(off_spec["pmf_near"], dtype=float)
        far = np.asarray(off_spec["pmf_far"], dtype=float)
        n = max(len(near), len(far))
        near, far = np.pad(near, (0, n - len(near))), np.pad(far, (0, n - len(far)))
        bump = _bump(off_spec["center"], off_spec["width"])

        def offspring(x):
            w = bump(x)[:, None]
            return w * near[None, :] + (1.0 - w) * far[None, :]
    kw = {k: m[k] for k in ("k_max", "basis_size", "quad_order") if k in m}
    return ModelSpec(ou, beta, offspring, require_supercritical=not m.get("allow_subcritical", False), **kw)


def _build_function(fb: dict, model: ModelSpec) -> FunctionExpansion:
    basis = model.basis
    coeffs = {}
    for term in fb.get("terms", []):
        key = (term["k"], term.get("j", 1))
        coeffs[key] = coeffs.get(key, 0.0) + term.get("coeff", 1.0)
    poly = fb.get("polynomial")
    const = fb.get("constant", 0.0)
    if poly is None and const == 0.0:
        return split(FunctionExpansion.from_coeffs(basis, coeffs))
    eig = FunctionExpansion.from_coeffs(basis, coeffs) if coeffs else None
    p = np.asarray(poly if poly is not None else [0.0], dtype=float)

    def f(x):
        out = np.polynomial.polynomial.polyval(x[:, 0], p) + const
        return out + eig.reconstruct(x) if eig is not None else out
    return split(expand(f, basis))


def _validate(ctx: _Ctx, raw: dict) -> ExperimentConfig:
    for top in raw:
        if top not in ("model", "function", "scenario", "thresholds", "output"):
            ctx.fail(top, "unknown section (allowed: function, model, output, scenario, thresholds)")
    model = _typed(ctx, raw.get("model", {}), "model", "model")
    for key in _REQUIRED["model"]:
        if key not in model:
            ctx.fail(f"model.{key}", "required")
    if model["b"] <= 0 or model["sigma2"] <= 0:
        ctx.fail("model.b", "b and sigma2 must be > 0")
    d = model.get("d", 1)
    if d < 1:
        ctx.fail("model.d", "must be >= 1")
    beta = _typed(ctx, model["beta"], "model.beta", "model.beta")
    kind = beta.get("kind")
    if kind == "constant":
        if "value" not in beta:
            ctx.fail("model.beta.value", "required for kind = 'constant'")
        if beta["value"] < 0:
            ctx.fail("model.beta.value", "branching rate must be >= 0")
    elif kind == "bump":
        for k in ("height", "center", "width"):
            if k not in beta:
                ctx.fail(f"model.beta.{k}", "required for kind = 'bump'")
        _floats(ctx, "model.beta.center", beta["center"], d)
        if beta.get("base", 0.0) < 0 or beta.get("base", 0.0) + min(beta["height"], 0.0) < 0:
            ctx.fail("model.beta.height", "branching rate must stay >= 0")
        if beta["width"] <= 0:
            ctx.fail("model.beta.width", "must be > 0")
    else:
        ctx.fail("model.beta.kind", f"expected 'constant' or 'bump', got {kind!r}")
    off = _typed(ctx, model["offspring"], "model.offspring", "model.offspring")
    kind = off.get("kind")
    if kind == "table":
        if "pmf" not in off:
            ctx.fail("model.offspring.pmf", "required for kind = 'table'")
        pm = _floats(ctx, "model.offspring.pmf", off["pmf"])
        if abs(sum(pm) - 1.0) > 1e-12 or min(pm) < 0:
            ctx.fail("model.offspring.pmf", "must be non-negative and sum to 1 within 1e-12")
    elif kind == "mixture":
        for k in ("pmf_near", "pmf_far", "center", "width"):
            if k not in off:
                ctx.fail(f"model.offspring.{k}", "required for kind = 'mixture'")
        for k in ("pmf_near", "pmf_far"):
            pm = _floats(ctx, f"model.offspring.{k}", off[k])
            if abs(sum(pm) - 1.0) > 1e-12 or min(pm) < 0:
                ctx.fail(f"model.offspring.{k}", "must be non-negative and sum to 1 within 1e-12")
        _floats(ctx, "model.offspring.center", off["center"], d)
        if off["width"] <= 0:
            ctx.fail("model.offspring.width", "must be > 0")
    else:
        ctx.fail("model.offspring.kind", f"expected 'table' or 'mixture', got {kind!r}")

    fn = _typed(ctx, raw.get("function", {}), "function", "function")
    for i, term in enumerate(fn.get("terms", [])):
        _typed(ctx, term, "function.terms", f"function.terms.{i}")
        if "k" not in term:
            ctx.fail("function.terms", f"term {i} needs k")
        if not 1 <= term["k"] <= model.get("k_max", 8):
            ctx.fail("function.terms", f"term {i}: level k={term['k']} outside 1..k_max")
    if "polynomial" in fn:
        _floats(ctx, "function.polynomial", fn["polynomial"])
    if not fn.get("terms") and "polynomial" not in fn and fn.get("constant", 0.0) == 0.0:
        ctx.fail("function", "needs terms, polynomial or constant")

    scen = _typed(ctx, raw.get("scenario", {}), "scenario", "scenario")
    if scen.get("t", 1.0) <= 0:
        ctx.fail("scenario.t", "must be > 0")
    if scen.get("extension", 1.0) < 0:
        ctx.fail("scenario.extension", "must be >= 0")
    if scen.get("replicates", 1) < 1:
        ctx.fail("scenario.replicates", "must be >= 1")
    if scen.get("pop_cap", 1) < 1:
        ctx.fail("scenario.pop_cap", "must be >= 1")
    if not 0 <= scen.get("seed", 0) < 2 ** 64:
        ctx.fail("scenario.seed", "must be an unsigned 64-bit integer")
    if "x0" in scen:
        scen["x0"] = _floats(ctx, "scenario.x0", scen["x0"], d)
    for k in ("snapshot_times", "l2_times"):
        if k in scen:
            ts = _floats(ctx, f"scenario.{k}", scen[k])
            if any(v < 0 for v in ts) or ts != sorted(ts):
                ctx.fail(f"scenario.{k}", "must be ascending and >= 0")
            scen[k] = ts
    if "expect" in scen and scen["expect"] not in ("thm1.3", "thm1.4", "thm2.1", "thm2.3"):
        ctx.fail("scenario.expect", "expected one of thm1.3, thm1.4, thm2.1, thm2.3")

    th = _typed(ctx, raw.get("thresholds", {}), "thresholds", "thresholds")
    checks = th.get("checks")
    if checks is not None:
        bad = [c for c in checks if c not in _CHECKS]
        if bad:
            ctx.fail("thresholds.checks", f"unknown checks {bad} (allowed: {sorted(_CHECKS)})")
    override = th.pop("variance_override", 1.0)
    if override <= 0:
        ctx.fail("thresholds.variance_override", "must be > 0")
    if "checks" in th:
        th["checks"] = tuple(th["checks"])
    thresholds = Thresholds(**th)

    out = _typed(ctx, raw.get("output", {}), "output", "output")
    formats = tuple(out.get("formats", ["json", "samples", "histogram"]))
    bad = [x for x in formats if x not in _FORMATS]
    if bad:
        ctx.fail("output.formats", f"unknown formats {bad} (allowed: {sorted(_FORMATS)})")
    return ExperimentConfig(raw, ctx.source, model, fn, scen, thresholds, override,
                            out.get("dir"), formats)


def list_presets() -> list[str]:
    root = resources.files("branching_clt") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_config(spec: str | Path) -> ExperimentConfig:
    """Load ``path/to/file.toml`` or a bundled ``preset:NAME``."""
    spec = str(spec)
    if spec.startswith("preset:"):
        name = spec[len("preset:"):]
        res = resources.files("branching_clt") / "presets" / f"{name}.toml"
        if not res.is_file():
            raise ConfigError(f"{spec}: unknown preset (available: {', '.join(list_presets())})")
        text, source = res.read_text(), spec
    else:
        try:
            text = Path(spec).read_text()
        except OSError as exc:
            raise ConfigError(f"{spec}: cannot read config: {exc.strerror}") from None
        source = spec
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    ctx = _Ctx(source, text)
    cfg = _validate(ctx, json.loads(json.dumps(raw)))
    cfg.raw = raw
    return cfg
