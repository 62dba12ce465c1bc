"""Experiment configuration: a TOML document validated into ``ExperimentConfig``.

All violations are collected and reported together, each prefixed with the
dotted path of the offending field.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import tomli

from .coeffs import CATALOG, CoefficientFn, CoefficientPair, RhoSpec
from .kernel import KernelSpec
from .noise import GridSpec
from .solver import EXPLICIT_CFL_LIMIT, SCHEMES, InitialCondition, SchemeConfig

KINDS = ("simulate", "couple", "moments", "confluence", "invariant", "martingale", "kernel-check", "galerkin")
PDE_KINDS = ("simulate", "couple", "moments", "confluence", "invariant", "galerkin")
COUPLED_KINDS = ("couple", "moments", "confluence", "invariant")
U64 = (1 << 64) - 1


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))


_REQ = object()

# section -> key -> (type, default); _REQ marks required keys
SCHEMA: dict[str, dict[str, tuple]] = {
    "": {
        "kind": (str, _REQ),
        "seed": (int, 0),
        "replicas": (int, 1),
        "output_dir": (str, "heatpath-out"),
    },
    "grid": {
        "N": (int, _REQ),
        "T": (float, _REQ),
        "dt": (float, None),
        "cfl": (float, None),
        "scheme": (str, "explicit"),
        "checkpoint_stride": (int, None),
    },
    "coefficients": {
        "catalog": (str, None),
        "b": (dict, None),
        "sigma": (dict, None),
        "nonincreasing": (bool, False),
        "rho": (dict, None),
    },
    "initial": {"u": (dict, None), "v": (dict, None), "truncate": (float, None)},
    "kernel": {"modes": (int, 256), "quadrature_points": (int, 1024), "small_time": (float, 1e-4)},
    "couple": {"residual_tol": (float, None)},
    "moments": {
        "gamma": (float, 0.5),
        "variant": (str, "iii"),
        "levels": (list, None),
        "center": (float, 0.0),
        "blocks": (int, 20),
    },
    "confluence": {},
    "invariant": {"windows": (int, 6)},
    "martingale": {
        "gamma": (float, 1.0 / 3.0),
        "m": (float, 1.0),
        "dt": (float, None),
        "T_cap": (float, None),
        "hitting": (list, None),
        "hitting_dt": (float, 1e-3),
        "confidence": (float, 0.99),
    },
    "kernel_check": {"T": (float, 1.0), "n_grid": (int, 16), "s": (float, 0.01), "t": (float, 0.02)},
    "galerkin": {"modes": (list, None), "x": (float, 0.5)},
}

ASSERTIONS: dict[str, dict[str, type]] = {
    "simulate": {"max_sup_l1": float, "max_semigroup_error": float},
    "couple": {
        "max_negative_fraction": float,
        "mart_mean_sigmas": float,
        "isometry_rel_tol": float,
        "d1_nonincreasing": bool,
    },
    "moments": {"band_sigmas": float},
    "confluence": {"max_median_ratio": float, "tail_nonincreasing": bool},
    "invariant": {"max_final_kstat_median": float, "max_ks_distance": float},
    "martingale": {"hitting_covers": bool, "moment_rel_tol": float, "tau_rel_tol": float, "within_bound": bool},
    "kernel-check": {"mass_tol": float, "ck_tol": float, "nonneg_tol": float},
    "galerkin": {"strictly_decreasing": bool},
}

_COEFF_KEYS = {"kind", "params", "lipschitz"}
_RHO_KEYS = {"kind", "epsilon", "p", "xs", "ys"}


@dataclass
class ExperimentConfig:
    kind: str
    master_seed: int
    replicas: int
    output_dir: str
    grid: Optional[GridSpec]
    scheme: Optional[SchemeConfig]
    pair: Optional[CoefficientPair]
    initial: dict
    truncate: Optional[float]
    kernel: KernelSpec
    sections: dict
    assertions: dict
    document: dict = field(repr=False, default_factory=dict)

    @property
    def config_hash(self) -> str:
        return config_hash(self.document)

    @property
    def gamma(self) -> Optional[float]:
        if self.kind == "moments":
            return self.sections["moments"]["gamma"]
        if self.kind == "martingale":
            return self.sections["martingale"]["gamma"]
        return None

    def with_overrides(self, seed: Optional[int] = None, output_dir: Optional[str] = None) -> "ExperimentConfig":
        out = ExperimentConfig(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        if seed is not None:
            if not 0 <= seed <= U64:
                raise ConfigError([f"seed: {seed} is not an unsigned 64-bit integer"])
            out.master_seed = int(seed)
        if output_dir is not None:
            out.output_dir = output_dir
        return out


def config_hash(document: dict) -> str:
    """Short SHA-256 of the canonical document without seed and output location."""
    doc = {k: v for k, v in document.items() if k not in ("seed", "output_dir")}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _typed(value, kind, path, errs) -> Any:
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append(f"{path}: expected a number, got {value!r}")
            return None
        if not math.isfinite(value):
            errs.append(f"{path}: must be finite")
            return None
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append(f"{path}: expected an integer, got {value!r}")
            return None
        return value
    if not isinstance(value, kind) or (kind is not bool and isinstance(value, bool)):
        errs.append(f"{path}: expected {kind.__name__}, got {value!r}")
        return None
    return value


def _section(doc: dict, name: str, errs: list) -> dict:
    schema = SCHEMA[name]
    raw = doc if name == "" else doc.get(name, {})
    prefix = "" if name == "" else name + "."
    if not isinstance(raw, dict):
        errs.append(f"{name}: expected a table")
        return {k: (None if d is _REQ else d) for k, (_, d) in schema.items()}
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _typed(raw[key], kind, prefix + key, errs)
        elif default is _REQ:
            # absent sections are checked by kind, not key by key
            if name == "" or name in doc:
                errs.append(f"{prefix}{key}: required key missing")
            out[key] = None
        else:
            out[key] = default
    if name != "":
        for key in raw:
            if key not in schema:
                errs.append(f"{prefix}{key}: unknown key")
    return out


def _coefficient(rec: dict, path: str, errs: list) -> Optional[CoefficientFn]:
    extra = set(rec) - _COEFF_KEYS
    if extra:
        errs.extend(f"{path}.{k}: unknown key" for k in sorted(extra))
    if "kind" not in rec:
        errs.append(f"{path}.kind: required key missing")
        return None
    try:
        return CoefficientFn(rec["kind"], dict(rec.get("params", {})), float(rec.get("lipschitz", 0.0)))
    except (ValueError, TypeError) as exc:
        errs.append(f"{path}: {exc}")
        return None


def _pair(sec: dict, errs: list) -> Optional[CoefficientPair]:
    if sec["catalog"] is not None:
        clash = [k for k in ("b", "sigma", "rho") if sec[k] is not None]
        if clash:
            errs.append(f"coefficients: catalog cannot be combined with {', '.join(clash)}")
        if sec["catalog"] not in CATALOG:
            errs.append(f"coefficients.catalog: unknown entry {sec['catalog']!r}; known: {sorted(CATALOG)}")
            return None
        return CATALOG[sec["catalog"]]
    if sec["b"] is None or sec["sigma"] is None:
        errs.append("coefficients: give either catalog or both b and sigma")
        return None
    b = _coefficient(sec["b"], "coefficients.b", errs)
    s = _coefficient(sec["sigma"], "coefficients.sigma", errs)
    rho = None
    if sec["rho"] is not None:
        extra = set(sec["rho"]) - _RHO_KEYS
        errs.extend(f"coefficients.rho.{k}: unknown key" for k in sorted(extra))
        try:
            rho = RhoSpec(**{k: v for k, v in sec["rho"].items() if k in _RHO_KEYS})
        except (ValueError, TypeError) as exc:
            errs.append(f"coefficients.rho: {exc}")
    if b is None or s is None:
        return None
    return CoefficientPair(b, s, bool(sec["nonincreasing"]), rho)


def _initial(rec: Optional[dict], path: str, errs: list) -> Optional[InitialCondition]:
    if rec is None:
        return None
    rec = dict(rec)
    kind = rec.pop("kind", None)
    if kind is None:
        errs.append(f"{path}.kind: required key missing")
        return None
    try:
        return InitialCondition(kind, rec)
    except (ValueError, TypeError) as exc:
        errs.append(f"{path}: {exc}")
        return None


def _normalise(obj):
    if isinstance(obj, dict):
        return {k: _normalise(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [_normalise(v) for v in obj]
    return obj


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a TOML experiment document."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError([f"<document>: {exc}"]) from None
    errs: list[str] = []
    known = (set(SCHEMA) - {""}) | set(SCHEMA[""]) | {"assert"}
    for key in doc:
        if key not in known:
            errs.append(f"{key}: unknown key")
    top = _section(doc, "", errs)
    sections = {name: _section(doc, name, errs) for name in SCHEMA if name}
    kind = top["kind"]
    if kind is not None and kind not in KINDS:
        errs.append(f"kind: unknown experiment kind {kind!r}; expected one of {KINDS}")
        kind = None
    seed = top["seed"]
    if seed is not None and not 0 <= seed <= U64:
        errs.append(f"seed: {seed} is not an unsigned 64-bit integer")
    if top["replicas"] is not None and top["replicas"] < 1:
        errs.append("replicas: must be >= 1")

    grid = scheme = pair = None
    initial = {}
    g = sections["grid"]
    if kind in PDE_KINDS:
        if "grid" not in doc:
            errs.append("grid: required section missing")
        elif g["N"] is not None and g["T"] is not None:
            grid, scheme = _grid(g, errs)
        if "coefficients" not in doc:
            errs.append("coefficients: required section missing")
        else:
            pair = _pair(sections["coefficients"], errs)
        ini = sections["initial"]
        initial = {k: _initial(ini[k], f"initial.{k}", errs) for k in ("u", "v")}
        if ini["truncate"] is not None and not ini["truncate"] > 0:
            errs.append("initial.truncate: must be positive")
        need = ["u", "v"] if kind in COUPLED_KINDS and sections["moments"]["levels"] is None else ["u"]
        if kind == "moments" and sections["moments"]["levels"] is not None:
            need = []
        for k in need:
            if ini[k] is None:
                errs.append(f"initial.{k}: required for kind {kind!r}")
        for k in ("u", "v"):
            if initial.get(k) is not None and not initial[k].bounded and ini["truncate"] is None:
                errs.append(f"initial.{k}: unbounded profile needs initial.truncate")

    _kind_checks(kind, sections, top, errs)
    kern = sections["kernel"]
    kernel = None
    try:
        kernel = KernelSpec(kern["modes"], kern["quadrature_points"], kern["small_time"])
    except (ValueError, TypeError) as exc:
        errs.append(f"kernel: {exc}")

    assertions = {}
    raw_assert = doc.get("assert", {})
    if not isinstance(raw_assert, dict):
        errs.append("assert: expected a table")
        raw_assert = {}
    allowed = ASSERTIONS.get(kind, {}) if kind else {}
    for key, value in raw_assert.items():
        if key not in allowed:
            errs.append(f"assert.{key}: not an assertion of kind {kind!r}; allowed: {sorted(allowed)}")
            continue
        v = _typed(value, allowed[key], f"assert.{key}", errs)
        if v is not None:
            assertions[key] = v

    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(
        kind,
        int(seed),
        top["replicas"],
        top["output_dir"],
        grid,
        scheme,
        pair,
        initial,
        sections["initial"]["truncate"],
        kernel,
        sections,
        assertions,
        _normalise(doc),
    )


def _grid(g: dict, errs: list):
    N, T = g["N"], g["T"]
    if N < 2:
        errs.append("grid.N: must be >= 2")
        return None, None
    if not T > 0:
        errs.append("grid.T: must be positive")
        return None, None
    if g["dt"] is not None and g["cfl"] is not None:
        errs.append("grid: give dt or cfl, not both")
        return None, None
    if g["scheme"] not in SCHEMES:
        errs.append(f"grid.scheme: unknown scheme {g['scheme']!r}; expected one of {SCHEMES}")
        return None, None
    if g["dt"] is not None:
        if not g["dt"] > 0:
            errs.append("grid.dt: must be positive")
            return None, None
        grid = GridSpec(N, g["dt"], T)
        where = "grid.dt"
    else:
        cfl = 0.25 if g["cfl"] is None else g["cfl"]
        if not cfl > 0:
            errs.append("grid.cfl: must be positive")
            return None, None
        grid = GridSpec.from_cfl(N, T, cfl)
        where = "grid.cfl"
    if g["scheme"] == "explicit" and grid.cfl > EXPLICIT_CFL_LIMIT + 1e-12:
        errs.append(
            f"{where}: CFL invariant violated: explicit scheme requires dt/dx^2 <= {EXPLICIT_CFL_LIMIT}, got {grid.cfl:.6g}"
        )
        return None, None
    stride = g["checkpoint_stride"]
    if stride is None:
        stride = max(1, grid.M // 200)
    elif stride < 1:
        errs.append("grid.checkpoint_stride: must be >= 1")
        return None, None
    return grid, SchemeConfig(g["scheme"], stride)


def _kind_checks(kind, sections, top, errs):
    mo = sections["moments"]
    if kind == "moments":
        if mo["gamma"] is not None and not 0 < mo["gamma"] < 1:
            errs.append(f"moments.gamma: must lie in (0, 1), got {mo['gamma']}")
        if mo["variant"] not in ("iii", "iv"):
            errs.append("moments.variant: must be 'iii' or 'iv'")
        if mo["levels"] is not None:
            if not mo["levels"] or not all(isinstance(x, (int, float)) and not isinstance(x, bool) and x > 0 for x in mo["levels"]):
                errs.append("moments.levels: must be a non-empty list of positive numbers")
        if mo["blocks"] is not None and mo["blocks"] < 1:
            errs.append("moments.blocks: must be >= 1")
    ma = sections["martingale"]
    if kind == "martingale":
        if ma["gamma"] is not None and not 0 < ma["gamma"] < 1:
            errs.append(f"martingale.gamma: must lie in (0, 1), got {ma['gamma']}")
        if ma["m"] is not None and not ma["m"] > 0:
            errs.append("martingale.m: must be positive")
        for key in ("dt", "T_cap", "hitting_dt"):
            if ma[key] is not None and not ma[key] > 0:
                errs.append(f"martingale.{key}: must be positive")
        if ma["confidence"] is not None and not 0 < ma["confidence"] < 1:
            errs.append("martingale.confidence: must lie in (0, 1)")
        if ma["hitting"] is not None:
            ok = all(
                isinstance(p, list) and len(p) == 2 and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p) and p[0] > 0 and p[1] >= 0
                for p in ma["hitting"]
            )
            if not ok:
                errs.append("martingale.hitting: must be a list of [m, x] pairs with m > 0, x >= 0")
    ga = sections["galerkin"]
    if kind == "galerkin":
        if ga["modes"] is None or not all(isinstance(n, int) and not isinstance(n, bool) and n >= 0 for n in ga["modes"]):
            errs.append("galerkin.modes: required list of nonnegative integers")
        elif sections["grid"]["N"] is not None and any(n >= sections["grid"]["N"] for n in ga["modes"]):
            errs.append("galerkin.modes: every mode count must be < grid.N")
        if ga["x"] is not None and not 0 <= ga["x"] <= 1:
            errs.append("galerkin.x: must lie in [0, 1]")
    kc = sections["kernel_check"]
    if kind == "kernel-check":
        if kc["T"] is not None and not kc["T"] > 0:
            errs.append("kernel_check.T: must be positive")
        if kc["n_grid"] is not None and kc["n_grid"] < 2:
            errs.append("kernel_check.n_grid: must be >= 2")
        for key in ("s", "t"):
            if kc[key] is not None and not kc[key] > 0:
                errs.append(f"kernel_check.{key}: must be positive")
    if kind == "invariant" and sections["invariant"]["windows"] is not None and sections["invariant"]["windows"] < 1:
        errs.append("invariant.windows: must be >= 1")
    rt = sections["couple"]["residual_tol"]
    if rt is not None and rt < 0:
        errs.append("couple.residual_tol: must be nonnegative")


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError([f"<document>: not UTF-8 ({exc})"]) from None
    return parse_config(text)
