"""Drift and diffusion coefficients for the stochastic heat equation.

Coefficients are small declarative descriptors (a catalog ``kind`` plus
parameters and a declared Lipschitz constant) so that they can be written in
experiment config files and certified by the sampling checkers below.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import qmc

KINDS = (
    "linear",
    "linear-plus-sine",
    "signed-min-power",
    "compact-bump",
    "zero",
    "custom-table",
)
RHO_KINDS = ("linear", "rho_p", "custom")

_DEFAULTS = {
    "linear": {"slope": 1.0, "offset": 0.0},
    "linear-plus-sine": {"slope": 1.0, "amplitude": 1.0, "offset": 0.0},
    "signed-min-power": {"scale": 1.0, "p": 2.0},
    "compact-bump": {"amplitude": 1.0},
    "zero": {},
    "custom-table": {"xs": None, "ys": None, "extrapolate": "clamp"},
}


class DomainError(ValueError):
    """Raised when a coefficient or rho is evaluated outside its domain."""


def sg(z):
    """Sign convention with ``sg(0) = +1``; works on scalars and arrays."""
    out = np.where(np.asarray(z) >= 0, 1.0, -1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CoefficientFn:
    """A catalog coefficient ``f: R -> R``.

    Parameters
    ----------
    kind : str
        One of ``KINDS``.
    params : mapping
        Kind-specific parameters; missing entries take the kind defaults.
    lipschitz : float
        Declared Lipschitz constant. It is validated by the checkers, never
        inferred.
    """

    kind: str
    params: Mapping = field(default_factory=dict)
    lipschitz: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown coefficient kind {self.kind!r}; expected one of {KINDS}")
        unknown = set(self.params) - set(_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)} for kind {self.kind!r}")
        merged = {**_DEFAULTS[self.kind], **dict(self.params)}
        if self.kind == "signed-min-power" and merged["p"] < 1:
            raise ValueError("signed-min-power requires p >= 1")
        if self.kind == "custom-table":
            xs = np.asarray(merged["xs"], dtype=float)
            ys = np.asarray(merged["ys"], dtype=float)
            if xs.ndim != 1 or xs.size < 2 or xs.shape != ys.shape:
                raise ValueError("custom-table needs 1-d xs and ys of equal length >= 2")
            if np.any(np.diff(xs) <= 0):
                raise ValueError("custom-table xs must be strictly increasing")
            if merged["extrapolate"] not in ("clamp", "error"):
                raise ValueError("custom-table extrapolate must be 'clamp' or 'error'")
            merged["xs"], merged["ys"] = xs, ys
        if self.lipschitz < 0:
            raise ValueError("declared Lipschitz constant must be nonnegative")
        object.__setattr__(self, "params", merged)

    def __call__(self, z):
        return evaluate(self, z)

    @property
    def breakpoints(self) -> np.ndarray:
        """Points where the coefficient has a kink (used by the checkers)."""
        if self.kind == "signed-min-power":
            return np.array([-1.0, 0.0, 1.0])
        if self.kind == "compact-bump":
            return np.array([-1.0, 1.0])
        if self.kind == "custom-table":
            return np.asarray(self.params["xs"], dtype=float)
        return np.empty(0)

    def to_record(self) -> dict:
        params = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()
        }
        return {"kind": self.kind, "params": params, "lipschitz": self.lipschitz}


def evaluate(f: CoefficientFn, z):
    """Evaluate the catalog formula of ``f`` at ``z`` (scalar or array)."""
    z = np.asarray(z, dtype=float)
    p = f.params
    if f.kind == "linear":
        out = p["slope"] * z + p["offset"]
    elif f.kind == "linear-plus-sine":
        out = p["slope"] * z + p["amplitude"] * np.sin(z) + p["offset"]
    elif f.kind == "signed-min-power":
        a = np.abs(z)
        out = p["scale"] * sg(z) * np.minimum(a, a ** p["p"])
    elif f.kind == "compact-bump":
        out = np.where(np.abs(z) <= 1.0, p["amplitude"] * (1.0 - z * z), 0.0)
    elif f.kind == "zero":
        out = np.zeros_like(z)
    else:
        xs, ys = p["xs"], p["ys"]
        if p["extrapolate"] == "error" and (np.any(z < xs[0]) or np.any(z > xs[-1])):
            raise DomainError(f"custom-table evaluated outside [{xs[0]}, {xs[-1]}]")
        out = np.interp(z, xs, ys)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RhoSpec:
    """Coercivity function for the confluence condition.

    ``linear`` is ``eps * z``; ``rho_p`` is ``eps * rho_p(z)`` with
    ``rho_p(z) = z**p`` on [0, 1] and ``p z - p + 1`` beyond; ``custom`` is a
    piecewise-linear table through the origin, extended linearly with its last
    slope.
    """

    kind: str = "linear"
    epsilon: float = 1.0
    p: float = 1.0
    xs: Optional[Sequence[float]] = None
    ys: Optional[Sequence[float]] = None

    def __post_init__(self):
        if self.kind not in RHO_KINDS:
            raise ValueError(f"unknown rho kind {self.kind!r}")
        if not self.epsilon > 0:
            raise ValueError("rho epsilon must be positive")
        if self.p < 1:
            raise ValueError("rho power p must be >= 1")
        if self.kind == "custom":
            xs = np.asarray(self.xs, dtype=float)
            ys = np.asarray(self.ys, dtype=float)
            if xs.size < 2 or xs.shape != ys.shape or xs[0] != 0 or ys[0] != 0:
                raise ValueError("custom rho table must start at (0, 0)")
            slopes = np.diff(ys) / np.diff(xs)
            if np.any(np.diff(xs) <= 0) or np.any(slopes <= 0) or np.any(np.diff(slopes) < 0):
                raise ValueError("custom rho table must be strictly increasing and convex")

    def __call__(self, z):
        return eval_rho(self, z)

    def to_record(self) -> dict:
        rec = {"kind": self.kind, "epsilon": self.epsilon, "p": self.p}
        if self.kind == "custom":
            rec.update(xs=list(self.xs), ys=list(self.ys))
        return rec


def eval_rho(rho: RhoSpec, z):
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise DomainError("rho is defined on [0, inf) only")
    if rho.kind == "linear":
        out = z
    elif rho.kind == "rho_p":
        out = np.where(z <= 1.0, np.minimum(z, 1.0) ** rho.p, rho.p * z - rho.p + 1.0)
    else:
        xs = np.asarray(rho.xs, dtype=float)
        ys = np.asarray(rho.ys, dtype=float)
        last = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
        out = np.where(z <= xs[-1], np.interp(z, xs, ys), ys[-1] + last * (z - xs[-1]))
    out = rho.epsilon * out
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CoefficientPair:
    b: CoefficientFn
    sigma: CoefficientFn
    b_nonincreasing: bool = False
    rho: Optional[RhoSpec] = None

    @property
    def lipschitz(self) -> float:
        """The constant C of the Lipschitz hypothesis, L_b + L_sigma."""
        return self.b.lipschitz + self.sigma.lipschitz

    def to_record(self) -> dict:
        return {
            "b": self.b.to_record(),
            "sigma": self.sigma.to_record(),
            "nonincreasing": self.b_nonincreasing,
            "rho": None if self.rho is None else self.rho.to_record(),
        }


def sg_drift(pair: CoefficientPair, u, v):
    """Pointwise ``sg(u - v) * (b(u) - b(v))``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return sg(u - v) * (pair.b(u) - pair.b(v))


# -- checkers ---------------------------------------------------------------


@dataclass
class HypothesisHReport:
    max_ratio: float
    violations: int
    declared: float
    n_pairs: int
    monotone_violations: int


@dataclass
class ConditionIReport:
    min_slack: float
    feasible_epsilon: float
    argmin: tuple


@dataclass
class SgLipschitzReport:
    max_excess: float
    max_excess_b: float
    max_excess_sigma: float
    n_quadruples: int


def _check_range(interval) -> tuple[float, float]:
    lo, hi = float(interval[0]), float(interval[1])
    if not hi > lo:
        raise ValueError(f"degenerate range [{lo}, {hi}]")
    return lo, hi


def _sample_pairs(pair: CoefficientPair, lo: float, hi: float, samples: int):
    """Halton points in the square plus every pair of kink points."""
    halton = qmc.Halton(d=2, scramble=False).random(samples + 1)[1:]
    pts = lo + (hi - lo) * halton
    kinks = np.concatenate([pair.b.breakpoints, pair.sigma.breakpoints])
    kinks = kinks[(kinks >= lo) & (kinks <= hi)]
    if kinks.size:
        # probe both sides of every kink
        probes = np.unique(np.concatenate([kinks, kinks - 1e-6, kinks + 1e-6, [lo, hi]]))
        r, z = np.meshgrid(probes, probes, indexing="ij")
        pts = np.vstack([pts, np.column_stack([r.ravel(), z.ravel()])])
    r, z = pts[:, 0], pts[:, 1]
    keep = np.abs(r - z) > 1e-12
    return r[keep], z[keep]


def verify_hypothesis_H(
    pair: CoefficientPair, range=(-10.0, 10.0), samples: int = 4096
) -> HypothesisHReport:
    """Validate the declared Lipschitz constant ``C = L_b + L_sigma``."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    lo, hi = _check_range(range)
    r, z = _sample_pairs(pair, lo, hi, samples)
    ratio = (np.abs(pair.b(r) - pair.b(z)) + np.abs(pair.sigma(r) - pair.sigma(z))) / np.abs(r - z)
    declared = pair.lipschitz
    violations = int(np.count_nonzero(ratio > declared * (1 + 1e-12) + 1e-12))
    mono = 0
    if pair.b_nonincreasing:
        lo_, hi_ = np.minimum(r, z), np.maximum(r, z)
        mono = int(np.count_nonzero(pair.b(lo_) < pair.b(hi_) - 1e-12))
    return HypothesisHReport(float(ratio.max()), violations, declared, r.size, mono)


def verify_condition_I(
    pair: CoefficientPair, range=(-10.0, 10.0), samples: int = 400
) -> ConditionIReport:
    """Scan ``|b(r)-b(z)| + |sigma(r)-sigma(z)|**2 - rho(|r-z|)`` on a grid.

    ``feasible_epsilon`` is the largest scale such that ``eps * rho_1``
    (the declared rho with unit scale) stays below the left side at every
    sampled pair; it comes from a finite scan and is not claimed optimal.
    """
    if pair.rho is None:
        raise ValueError("pair has no rho; condition (I) needs one")
    lo, hi = _check_range(range)
    g = np.linspace(lo, hi, samples)
    r, z = np.meshgrid(g, g, indexing="ij")
    lhs = np.abs(pair.b(r) - pair.b(z)) + (pair.sigma(r) - pair.sigma(z)) ** 2
    d = np.abs(r - z)
    slack = lhs - pair.rho(d)
    idx = np.unravel_index(np.argmin(slack), slack.shape)
    unit = RhoSpec(pair.rho.kind, 1.0, pair.rho.p, pair.rho.xs, pair.rho.ys)(d)
    pos = unit > 0
    feasible = float(np.min(lhs[pos] / unit[pos])) if pos.any() else float("inf")
    return ConditionIReport(float(slack[idx]), feasible, (float(r[idx]), float(z[idx])))


def _sg_difference(f: CoefficientFn, r1, z1, r2, z2):
    return np.abs(sg(r1 - z1) * (f(r1) - f(z1)) - sg(r2 - z2) * (f(r2) - f(z2)))


def check_sg_lipschitz(
    pair: CoefficientPair,
    samples: int = 10**6,
    range=(-10.0, 10.0),
    seed: int = 0,
    chunk: int = 200_000,
) -> SgLipschitzReport:
    """Largest excess of the sign-weighted difference over ``C(|dr| + |dz|)``.

    Each function is checked against its own declared constant. A fifth of
    the quadruples are forced sign crossings (``r1 < z < r2``), the case where
    the sign factor flips.
    """
    lo, hi = _check_range(range)
    rng = np.random.default_rng(seed)
    worst = {"b": -np.inf, "sigma": -np.inf}
    done = 0
    while done < samples:
        n = min(chunk, samples - done)
        r1, z1, r2, z2 = lo + (hi - lo) * rng.random((4, n))
        cross = rng.random(n) < 0.2
        z2 = np.where(cross, z1, z2)
        r2 = np.where(cross, 2 * z1 - r1 + (hi - lo) * 1e-3 * rng.standard_normal(n), r2)
        dist = np.abs(r1 - r2) + np.abs(z1 - z2)
        for name, f in (("b", pair.b), ("sigma", pair.sigma)):
            excess = _sg_difference(f, r1, z1, r2, z2) - f.lipschitz * dist
            worst[name] = max(worst[name], float(excess.max()))
        done += n
    return SgLipschitzReport(max(worst.values()), worst["b"], worst["sigma"], samples)


# -- catalog ----------------------------------------------------------------


def linear(slope: float, offset: float = 0.0) -> CoefficientFn:
    return CoefficientFn("linear", {"slope": slope, "offset": offset}, abs(slope))


def linear_plus_sine(slope: float, amplitude: float, offset: float = 0.0) -> CoefficientFn:
    return CoefficientFn(
        "linear-plus-sine",
        {"slope": slope, "amplitude": amplitude, "offset": offset},
        abs(slope) + abs(amplitude),
    )


def signed_min_power(p: float, scale: float = 1.0) -> CoefficientFn:
    # derivative of |z|**p reaches p just inside |z| = 1
    return CoefficientFn("signed-min-power", {"scale": scale, "p": p}, abs(scale) * p)


def compact_bump(amplitude: float = 1.0) -> CoefficientFn:
    return CoefficientFn("compact-bump", {"amplitude": amplitude}, 2.0 * abs(amplitude))


ZERO = CoefficientFn("zero", {}, 0.0)


def _build_catalog() -> dict[str, CoefficientPair]:
    return {
        # strictly decreasing drifts
        "linear-drift": CoefficientPair(
            linear(-1.0), linear(0.0, 1.0), True, RhoSpec("linear", 1.0)
        ),
        "sine-drift": CoefficientPair(
            linear_plus_sine(-1.0, -1.0), linear_plus_sine(0.0, 0.5), True, RhoSpec("rho_p", 0.1, 3)
        ),
        "min-power-drift": CoefficientPair(
            signed_min_power(2.0, -1.0), linear(0.0, 0.5), True, RhoSpec("rho_p", 0.25, 2)
        ),
        # zero drift, strictly monotone diffusion
        "sine-diffusion": CoefficientPair(
            ZERO, linear_plus_sine(1.0, 1.0), True, RhoSpec("rho_p", 1e-3, 6)
        ),
        "min-power-diffusion": CoefficientPair(
            ZERO, signed_min_power(2.0), True, RhoSpec("rho_p", 0.2, 4)
        ),
        # compactly supported diffusion
        "bump": CoefficientPair(linear(-1.0), compact_bump(), True, RhoSpec("linear", 1.0)),
        "bump-shifted": CoefficientPair(
            linear(-1.0, 2.0), compact_bump(), True, RhoSpec("linear", 1.0)
        ),
        # linear multiplicative
        "linear-multiplicative": CoefficientPair(
            linear(-0.5), linear(1.0), True, RhoSpec("linear", 0.5)
        ),
        # dissipative plus bounded perturbation; drift not monotone
        "perturbed-dissipative": CoefficientPair(
            linear_plus_sine(-1.0, 0.5), linear_plus_sine(0.0, 0.1, 0.2), False, None
        ),
        "half-sine": CoefficientPair(linear(-1.0), linear_plus_sine(0.0, 0.5), True, RhoSpec("linear", 1.0)),
    }


CATALOG = _build_catalog()
