"""Dispatch validated configs to the simulation modules and write artifacts.

Every CSV row starts with ``config_hash, master_seed, replica`` (replica is
-1 on aggregate rows). Floats are written with ``repr`` so reruns are
byte-identical. ``manifest.json`` lists each artifact with its SHA-256, the
assertion outcomes and the wall time.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import ks_2samp

from . import diagnostics as dg
from .config import ExperimentConfig
from .ensemble import run_coupled_ensemble, run_path_ensemble
from .kernel import (
    bound_ratio,
    chapman_kolmogorov_gap,
    check_gaussian_bound,
    green_eval,
    mass,
    semigroup_apply,
)
from .martingale import c1_closed_form, c2_closed_form, hitting_prob, lemma_check, lemma_constants
from .noise import derive_seed
from .solver import PathBlowupError, checkpoint_steps, truncate_initial

EXIT_OK, EXIT_ASSERT, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _num(x):
    """JSON-safe scalar: non-finite floats become None."""
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    return _num(obj)


class ArtifactWriter:
    def __init__(self, out_dir: str, config_hash: str, master_seed: int):
        self.out_dir = out_dir
        self.prov = (config_hash, master_seed)
        self.files: list[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def csv(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["config_hash", "master_seed", "replica", *header])
            for row in rows:
                w.writerow([*self.prov, *row])
        self.files.append(name)

    def json(self, name: str, obj) -> None:
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_clean(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")
        self.files.append(name)

    def digest(self) -> list[dict]:
        out = []
        for name in self.files:
            with open(self.path(name), "rb") as fh:
                data = fh.read()
            out.append({"name": name, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        return out


@dataclass
class Assertion:
    name: str
    value: object
    threshold: object
    passed: bool


@dataclass
class RunResult:
    status: int
    reason: Optional[str]
    out_dir: str
    summary: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.out_dir, "manifest.json")


class _Checks:
    def __init__(self, requested: dict):
        self.requested = requested
        self.results: list[Assertion] = []

    def want(self, name: str) -> bool:
        return name in self.requested

    def add(self, name: str, value, passed: bool):
        self.results.append(Assertion(name, _num(value), self.requested[name], bool(passed)))


def _initial_values(cfg: ExperimentConfig, key: str) -> np.ndarray:
    ic = cfg.initial[key]
    if cfg.truncate is not None:
        return truncate_initial(ic, cfg.truncate, cfg.grid)[0].values
    return ic.sample(cfg.grid).values


def _record_steps(cfg: ExperimentConfig) -> np.ndarray:
    return checkpoint_steps(cfg.grid.M, cfg.scheme.checkpoint_stride)


# -- kinds ----------------------------------------------------------------------


def _simulate(cfg, w, checks, workers):
    g = cfg.grid
    u0 = _initial_values(cfg, "u")
    steps = _record_steps(cfg)
    res = run_path_ensemble(cfg.pair, g, cfg.scheme, u0, cfg.master_seed, range(cfg.replicas), record_steps=steps, norms=True, workers=workers)
    x, t = g.x, g.times
    F = res.fields[0]

    def field_rows():
        for r in range(cfg.replicas):
            for si, s in enumerate(steps):
                for i in range(g.N):
                    yield (r, int(s), t[s], x[i], F[r, si, i])

    def norm_rows():
        for r in range(cfg.replicas):
            for m in range(g.M + 1):
                yield (r, m, t[m], res.l1[0, r, m], res.l2[0, r, m], res.sigma_l2_sq_integral[0, r, m])

    w.csv("checkpoints.csv", ("step", "t", "x", "u"), field_rows())
    w.csv("norms.csv", ("step", "t", "l1", "l2", "sigma_l2_sq_integral"), norm_rows())
    ref = semigroup_apply(cfg.kernel, u0, g.T)
    sg_err = np.max(np.abs(res.terminal[0] - ref), axis=-1)
    summary = {
        "sup_l1": res.sup_l1[0],
        "terminal_l1": res.l1[0, :, -1],
        "sigma_l2_sq_integral_T": res.sigma_l2_sq_integral[0, :, -1],
        "semigroup_sup_error": sg_err,
    }
    if checks.want("max_sup_l1"):
        v = float(np.max(res.sup_l1))
        checks.add("max_sup_l1", v, v <= checks.requested["max_sup_l1"])
    if checks.want("max_semigroup_error"):
        v = float(np.max(sg_err))
        checks.add("max_semigroup_error", v, v <= checks.requested["max_semigroup_error"])
    w.json("summary.json", summary)
    return summary


def _couple(cfg, w, checks, workers):
    g = cfg.grid
    tol = cfg.sections["couple"]["residual_tol"]
    tol = 5.0 * g.dx if tol is None else tol
    steps = _record_steps(cfg)
    res = run_coupled_ensemble(
        cfg.pair, g, cfg.scheme, _initial_values(cfg, "u"), _initial_values(cfg, "v"),
        cfg.master_seed, range(cfg.replicas), record_steps=steps, residual_tol=tol, workers=workers,
    )
    S = res.series
    t = g.times

    def rows():
        for r in range(cfg.replicas):
            for si, s in enumerate(steps):
                yield (r, t[s], S["d1"][0, r, si], S["drift"][0, r, si], S["bracket"][0, r, si], S["mart"][0, r, si], S["residual"][0, r, si])

    w.csv("diagnostics.csv", ("t", "d1", "drift", "bracket", "mart", "residual"), rows())
    mart = res.mart_T[0]
    R = mart.size
    se = float(np.std(mart, ddof=1) / math.sqrt(R)) if R > 1 else float("nan")
    var = float(np.var(mart, ddof=1)) if R > 1 else float("nan")
    br = float(np.mean(res.bracket_T[0]))
    summary = {
        "residual_tol": tol,
        "negative_fraction": float(res.negative_fraction[0]),
        "min_residual": float(np.min(res.min_residual)),
        "mart_T_mean": float(np.mean(mart)),
        "mart_T_stderr": se,
        "mart_T_var": var,
        "bracket_T_mean": br,
        "isometry_ratio": var / br if br > 0 else float("nan"),
        "d1_increases": int(np.sum(res.n_d1_increase)),
        "d1_violations": int(np.sum(res.n_d1_violation)),
        "max_d1_increase": float(np.max(res.max_d1_increase)),
    }
    rq = checks.requested
    if checks.want("max_negative_fraction"):
        checks.add("max_negative_fraction", summary["negative_fraction"], summary["negative_fraction"] < rq["max_negative_fraction"])
    if checks.want("mart_mean_sigmas"):
        z = abs(summary["mart_T_mean"]) / se if se > 0 else 0.0
        checks.add("mart_mean_sigmas", z, z <= rq["mart_mean_sigmas"])
    if checks.want("isometry_rel_tol"):
        e = abs(summary["isometry_ratio"] - 1.0)
        checks.add("isometry_rel_tol", e, e <= rq["isometry_rel_tol"])
    if checks.want("d1_nonincreasing"):
        checks.add("d1_nonincreasing", summary["d1_violations"], (summary["d1_violations"] == 0) == rq["d1_nonincreasing"])
    w.json("summary.json", summary)
    return summary


def _moments(cfg, w, checks, workers):
    g = cfg.grid
    mo = cfg.sections["moments"]
    if mo["levels"] is not None:
        lv = np.asarray(mo["levels"], dtype=float)
        u0 = np.repeat((mo["center"] + lv / 2)[:, None], g.N, axis=1)
        v0 = np.repeat((mo["center"] - lv / 2)[:, None], g.N, axis=1)
    else:
        u0, v0 = _initial_values(cfg, "u")[None], _initial_values(cfg, "v")[None]
    res = run_coupled_ensemble(cfg.pair, g, cfg.scheme, u0, v0, cfg.master_seed, range(cfg.replicas), workers=workers)
    reports = []
    for gi in range(u0.shape[0]):
        rep = dg.moment_bound(res.moments(gi), mo["gamma"], mo["variant"], mo["blocks"])
        rec = rep.to_record()
        rec["level"] = float(res.d1_0[gi, 0])
        reports.append((rep, rec))
    vals = [dg.moment_values(res.moments(gi), mo["gamma"], mo["variant"]) for gi in range(u0.shape[0])]

    def rows():
        for gi in range(u0.shape[0]):
            for r in range(cfg.replicas):
                yield (r, res.d1_0[gi, r], res.sup_d1[gi, r], res.bracket_T[gi, r], res.b_l1_T[gi, r], vals[gi][r])

    w.csv("moments.csv", ("level", "sup_d1", "bracket_T", "b_l1_T", "value"), rows())
    summary = {"reports": [rec for _, rec in reports]}
    if checks.want("band_sigmas"):
        k = checks.requested["band_sigmas"]
        ok = dg.bands_overlap([rep for rep, _ in reports], k)
        checks.add("band_sigmas", k, ok)
    w.json("moments.json", summary)
    return summary


def _confluence(cfg, w, checks, workers):
    g = cfg.grid
    res = run_coupled_ensemble(
        cfg.pair, g, cfg.scheme, _initial_values(cfg, "u"), _initial_values(cfg, "v"),
        cfg.master_seed, range(cfg.replicas), record_steps=np.arange(g.M + 1), record_keys=("d1",), workers=workers,
    )
    d1 = res.series["d1"][0]
    delta = dg.confluence_tail(d1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = delta[:, -1] / delta[:, 0]
    monotone = bool(np.all(np.diff(delta, axis=-1) <= 0))
    steps = _record_steps(cfg)
    t = g.times

    def rows():
        for r in range(cfg.replicas):
            for s in steps:
                yield (r, t[s], d1[r, s], delta[r, s])

    w.csv("confluence.csv", ("t", "d1", "delta"), rows())
    summary = {"ratio": ratio, "median_ratio": float(np.median(ratio)), "tail_nonincreasing": monotone}
    if checks.want("max_median_ratio"):
        checks.add("max_median_ratio", summary["median_ratio"], summary["median_ratio"] <= checks.requested["max_median_ratio"])
    if checks.want("tail_nonincreasing"):
        checks.add("tail_nonincreasing", monotone, monotone == checks.requested["tail_nonincreasing"])
    w.json("summary.json", summary)
    return summary


def _observables(F: np.ndarray, dx: float) -> dict:
    return {
        "integral": dx * F.sum(axis=-1),
        "integral_sq": dx * (F * F).sum(axis=-1),
        "max": F.max(axis=-1),
    }


def _invariant(cfg, w, checks, workers):
    g = cfg.grid
    steps = _record_steps(cfg)
    res = run_coupled_ensemble(
        cfg.pair, g, cfg.scheme, _initial_values(cfg, "u"), _initial_values(cfg, "v"),
        cfg.master_seed, range(cfg.replicas), record_steps=steps, record_keys=("kstat",), workers=workers,
    )
    K = res.series["kstat"][0]
    times = g.times[steps]
    n = cfg.sections["invariant"]["windows"]
    sel = [dg.select_subsequence(K[r], times, n) for r in range(cfg.replicas)]
    picked = np.array([s.values for s in sel])
    obs_u, obs_v = _observables(res.u_T[0], g.dx), _observables(res.v_T[0], g.dx)
    ks = {}
    for name in obs_u:
        out = ks_2samp(obs_u[name], obs_v[name])
        ks[name] = {"statistic": float(out.statistic), "pvalue": float(out.pvalue)}

    def rows():
        for r in range(cfg.replicas):
            for si, s in enumerate(steps):
                yield (r, g.times[s], K[r, si])

    w.csv("kstat.csv", ("t", "kstat"), rows())
    summary = {
        "windows": n,
        "selected_times_median": np.median(np.array([s.times for s in sel]), axis=0),
        "selected_kstat_median": np.median(picked, axis=0),
        "integrable_fraction": float(np.mean([s.integrable for s in sel])),
        "final_kstat_median": float(np.median(K[:, -1])),
        "ks": ks,
    }
    if checks.want("max_final_kstat_median"):
        v = summary["final_kstat_median"]
        checks.add("max_final_kstat_median", v, v <= checks.requested["max_final_kstat_median"])
    if checks.want("max_ks_distance"):
        v = max(d["statistic"] for d in ks.values())
        checks.add("max_ks_distance", v, v <= checks.requested["max_ks_distance"])
    w.json("invariant.json", summary)
    return summary


def _martingale(cfg, w, checks, workers):
    ma = cfg.sections["martingale"]
    gamma, m = ma["gamma"], ma["m"]
    c1, c2 = lemma_constants(gamma)
    lem = lemma_check(gamma, m, cfg.replicas, cfg.master_seed, ma["dt"], ma["T_cap"])
    pairs = ma["hitting"] if ma["hitting"] is not None else [[m, m]]
    hits = [
        hitting_prob(float(pm), float(px), cfg.replicas, derive_seed(cfg.master_seed, i + 1).key, ma["hitting_dt"], confidence=ma["confidence"])
        for i, (pm, px) in enumerate(pairs)
    ]
    w.csv(
        "hitting.csv",
        ("m", "x", "estimate", "lower", "upper", "exact", "covers_exact"),
        ((-1, h.m, h.x, h.estimate, h.lower, h.upper, h.exact, int(h.covers_exact)) for h in hits),
    )
    summary = {
        "constants": {"gamma": gamma, "c1": c1, "c2": c2, "c1_closed_form": c1_closed_form(gamma), "c2_closed_form": c2_closed_form(gamma)},
        "lemma": lem.to_record(),
        "hitting": [h.to_record() for h in hits],
    }
    rq = checks.requested
    if checks.want("hitting_covers"):
        ok = all(h.covers_exact for h in hits)
        checks.add("hitting_covers", ok, ok == rq["hitting_covers"])
    if checks.want("moment_rel_tol"):
        e = abs(lem.E_S_gamma - lem.analytic_S) / lem.analytic_S
        checks.add("moment_rel_tol", e, e <= rq["moment_rel_tol"])
    if checks.want("tau_rel_tol"):
        e = abs(lem.E_tau_gamma2 - lem.analytic_tau) / lem.analytic_tau
        checks.add("tau_rel_tol", e, e <= rq["tau_rel_tol"])
    if checks.want("within_bound"):
        checks.add("within_bound", lem.within_bound, lem.within_bound == rq["within_bound"])
    w.json("martingale.json", summary)
    return summary


def _kernel_check(cfg, w, checks, workers):
    spec = cfg.kernel
    kc = cfg.sections["kernel_check"]
    T, n = kc["T"], kc["n_grid"]
    ts = T * np.arange(1, n + 1) / n
    xs = np.linspace(0.0, 1.0, n)
    X, Y = np.meshgrid(xs, xs, indexing="ij")

    def rows():
        for t in ts:
            G = green_eval(spec, t, X, Y)
            B = bound_ratio(t, X, Y)
            tb = spec.tail_bound(t)
            for i in range(n):
                for j in range(n):
                    yield (-1, t, xs[i], xs[j], G[i, j], B[i, j], tb)

    w.csv("kernel.csv", ("t", "x", "y", "G", "bound_ratio", "tail_bound"), rows())
    gb = check_gaussian_bound(spec, T, n)
    mass_err = max(float(np.max(np.abs(mass(spec, t, xs) - 1.0))) for t in ts)
    sym = max(float(np.max(np.abs(green_eval(spec, t, X, Y) - green_eval(spec, t, Y, X)))) for t in ts)
    ck = float(np.max(np.abs(chapman_kolmogorov_gap(spec, kc["s"], kc["t"], xs, xs))))
    summary = {
        "fitted_C_T": gb.fitted_C_T,
        "nonnegativity_min": gb.nonnegativity_min,
        "mass_max_error": mass_err,
        "symmetry_max_error": sym,
        "chapman_kolmogorov_max_gap": ck,
        "T": T,
        "n_grid": n,
        "modes": spec.modes,
    }
    rq = checks.requested
    if checks.want("mass_tol"):
        checks.add("mass_tol", mass_err, mass_err <= rq["mass_tol"])
    if checks.want("ck_tol"):
        checks.add("ck_tol", ck, ck <= rq["ck_tol"])
    if checks.want("nonneg_tol"):
        checks.add("nonneg_tol", gb.nonnegativity_min, gb.nonnegativity_min >= -rq["nonneg_tol"])
    w.json("kernel.json", summary)
    return summary


def _galerkin(cfg, w, checks, workers):
    g = cfg.grid
    ga = cfg.sections["galerkin"]
    modes = list(ga["modes"])
    c = g.cell_of(ga["x"])
    res = run_path_ensemble(cfg.pair, g, cfg.scheme, _initial_values(cfg, "u"), cfg.master_seed, range(cfg.replicas), modes=[None] + modes, workers=workers)
    full = res.terminal[0, :, c]
    rows, table = [], []
    for k, n in enumerate(modes):
        err = (res.terminal[k + 1, :, c] - full) ** 2
        se = float(np.std(err, ddof=1) / math.sqrt(err.size)) if err.size > 1 else float("nan")
        table.append({"modes": n, "mse": float(np.mean(err)), "stderr": se})
        rows.append((-1, n, float(np.mean(err)), se))
    w.csv("galerkin.csv", ("modes", "mse", "stderr"), rows)
    order = np.argsort(modes, kind="stable")
    mse = np.array([table[i]["mse"] for i in order])
    decreasing = bool(np.all(np.diff(mse) < 0))
    summary = {"x_cell": c, "x_midpoint": float(g.x[c]), "t": g.T, "table": table, "strictly_decreasing": decreasing}
    if checks.want("strictly_decreasing"):
        checks.add("strictly_decreasing", decreasing, decreasing == checks.requested["strictly_decreasing"])
    w.json("galerkin.json", summary)
    return summary


RUNNERS = {
    "simulate": _simulate,
    "couple": _couple,
    "moments": _moments,
    "confluence": _confluence,
    "invariant": _invariant,
    "martingale": _martingale,
    "kernel-check": _kernel_check,
    "galerkin": _galerkin,
}


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> RunResult:
    """Run one experiment, write its artifacts and manifest, and return the status.

    Status 0 means every requested assertion passed, 1 that one failed, 3 a
    runtime failure (path blowup or I/O), recorded with a machine-readable
    reason in the manifest.
    """
    start = time.perf_counter()
    checks = _Checks(cfg.assertions)
    w = None
    status, reason, summary = EXIT_OK, None, {}
    try:
        w = ArtifactWriter(cfg.output_dir, cfg.config_hash, cfg.master_seed)
        summary = RUNNERS[cfg.kind](cfg, w, checks, max(1, int(workers)))
        failed = [a.name for a in checks.results if not a.passed]
        if failed:
            status, reason = EXIT_ASSERT, "assertion-failed: " + ",".join(failed)
    except PathBlowupError as exc:
        status, reason = EXIT_RUNTIME, f"path-blowup: step {exc.step}"
    except OSError as exc:
        status, reason = EXIT_RUNTIME, f"io-error: {exc}"
        if w is None:
            return RunResult(status, reason, cfg.output_dir)
    manifest = {
        "kind": cfg.kind,
        "config_hash": cfg.config_hash,
        "master_seed": cfg.master_seed,
        "seed": cfg.master_seed,
        "replicas": cfg.replicas,
        "files": w.digest(),
        "assertions": [a.__dict__ for a in checks.results],
        "status": status,
        "reason": reason,
        "wall_time": time.perf_counter() - start,
    }
    try:
        with open(w.path("manifest.json"), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_clean(manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        status, reason = EXIT_RUNTIME, f"io-error: {exc}"
    return RunResult(status, reason, cfg.output_dir, summary, checks.results)
