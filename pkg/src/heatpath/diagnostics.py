"""Functionals of simulated paths: norms, coupled L1 series, moment estimators,
confluence tails, coupling statistics and weak/mild identity residuals.

Time integrals use the left-point rule on the simulation grid so that the
stochastic sums are genuine discrete Ito sums:

    drift(t_m)   = sum_{j<m} dt dx sum_i sg(w) (b(u) - b(v))
    bracket(t_m) = sum_{j<m} dt dx sum_i (sigma(u) - sigma(v))^2
    mart(t_m)    = sum_{j<m}       sum_i sg(w) (sigma(u) - sigma(v)) dW
    b_l1(t_m)    = sum_{j<m} dt dx sum_i |b(u) - b(v)|

with ``w = u - v`` evaluated at step ``j``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .coeffs import CoefficientPair
from .kernel import KernelSpec, convolution_rows, semigroup_apply
from .noise import GridSpec, NoiseGrid
from .solver import Field, PathRecord

DEFAULT_MOM_BLOCKS = 20
# allowance for float rounding when checking that d1 never increases
D1_RTOL = 64 * np.finfo(float).eps


def lp_norm(f, p: int = 1, dx: Optional[float] = None) -> float:
    """Midpoint-rule ``(dx * sum |f_i|^p)^(1/p)`` for a Field or a raw array."""
    if p not in (1, 2):
        raise ValueError("only p in {1, 2} is supported")
    if isinstance(f, Field):
        values, dx = f.values, f.grid.dx
    else:
        values = np.asarray(f, dtype=float)
        dx = 1.0 / values.shape[-1] if dx is None else dx
    if p == 1:
        return float(dx * np.sum(np.abs(values)))
    return float(math.sqrt(dx * np.sum(values * values)))


# -- coupled series -------------------------------------------------------------


@dataclass
class CoupledDiagnostics:
    """Per-step series of a coupled pair, one entry per time level."""

    times: np.ndarray
    d1: np.ndarray
    drift: np.ndarray
    bracket: np.ndarray
    mart: np.ndarray
    b_l1: np.ndarray
    b_nonincreasing: bool = False
    replica: Optional[int] = None

    @property
    def d1_0(self) -> float:
        return float(self.d1[0])

    @property
    def sup_d1(self) -> float:
        return float(np.max(self.d1))

    def residual(self, d1_0: Optional[float] = None) -> np.ndarray:
        return inequality_residual(self, d1_0)


def _step_terms(pair: CoefficientPair, dx: float, u, v, dW):
    """Per-step increments (drift, bracket, mart, b_l1) without the dt factor."""
    w = u - v
    s = np.where(w >= 0, 1.0, -1.0)
    db = pair.b(u) - pair.b(v)
    ds = pair.sigma(u) - pair.sigma(v)
    return (
        dx * np.sum(s * db, axis=-1),
        dx * np.sum(ds * ds, axis=-1),
        np.sum(s * ds * dW, axis=-1),
        dx * np.sum(np.abs(db), axis=-1),
    )


def coupled_series(u_path: PathRecord, v_path: PathRecord, pair: CoefficientPair, noise: NoiseGrid) -> CoupledDiagnostics:
    """Recompute all coupled series from two stride-1 records and their noise."""
    if u_path.grid != v_path.grid or u_path.grid != noise.grid:
        raise ValueError("paths and noise must share one grid")
    grid = u_path.grid
    U, V = u_path.full_history(), v_path.full_history()
    dW = noise.materialize()
    dt, dx, M = grid.dt, grid.dx, grid.M
    d1 = dx * np.sum(np.abs(U - V), axis=1)
    drift, bracket, mart, b_l1 = (np.zeros(M + 1) for _ in range(4))
    # explicit left-to-right loop: an independent summation order from the
    # streaming accumulator used by ensemble runs
    for m in range(M):
        a, b_, c, e = _step_terms(pair, dx, U[m], V[m], dW[m])
        drift[m + 1] = drift[m] + dt * a
        bracket[m + 1] = bracket[m] + dt * b_
        mart[m + 1] = mart[m] + c
        b_l1[m + 1] = b_l1[m] + dt * e
    return CoupledDiagnostics(grid.times, d1, drift, bracket, mart, b_l1, pair.b_nonincreasing)


class CoupledAccumulator:
    """Streaming version of ``coupled_series`` for batched states (..., N).

    Keeps running totals, the running supremum of ``d1``, the minimum of the
    inequality residual, the number of steps whose residual falls below
    ``-residual_tol``, and counts of steps where ``d1`` rose at all or by more
    than the rounding allowance ``D1_RTOL * d1(0)``. Series are stored only at
    ``record_steps``.
    """

    def __init__(self, pair: CoefficientPair, grid: GridSpec, u0, v0, record_steps=None, residual_tol: float = 0.0):
        self.pair, self.grid = pair, grid
        self.tol = residual_tol
        u0, v0 = np.asarray(u0, float), np.asarray(v0, float)
        lead = np.broadcast_shapes(u0.shape, v0.shape)[:-1]
        self.d1_0 = grid.dx * np.sum(np.abs(u0 - v0), axis=-1) * np.ones(lead)
        self.d1 = self.d1_0.copy()
        self.sup_d1 = self.d1_0.copy()
        self.drift = np.zeros(lead)
        self.bracket = np.zeros(lead)
        self.mart = np.zeros(lead)
        self.b_l1 = np.zeros(lead)
        self.min_residual = np.zeros(lead)
        self.n_below = np.zeros(lead, dtype=np.int64)
        self.n_d1_increase = np.zeros(lead, dtype=np.int64)
        self.n_d1_violation = np.zeros(lead, dtype=np.int64)
        self.max_d1_increase = np.full(lead, -np.inf)
        self.record_steps = None if record_steps is None else np.asarray(record_steps)
        self._rec = {}
        if self.record_steps is not None:
            shape = lead + (self.record_steps.size,)
            self._rec = {k: np.zeros(shape) for k in ("d1", "drift", "bracket", "mart", "b_l1")}
            self._slot = 0
            self._store(0)

    def _store(self, m: int):
        if self._slot < self.record_steps.size and self.record_steps[self._slot] == m:
            for k, arr in self._rec.items():
                arr[..., self._slot] = getattr(self, k)
            self._slot += 1

    def update(self, m: int, u, v, u_new, v_new, dW, terms=None) -> None:
        """Fold the step ``m-1 -> m``. ``terms`` may carry precomputed coefficient differences."""
        dt, dx = self.grid.dt, self.grid.dx
        a, b_, c, e = _step_terms(self.pair, dx, u, v, dW) if terms is None else terms
        self.drift = self.drift + dt * a
        self.bracket = self.bracket + dt * b_
        self.mart = self.mart + c
        self.b_l1 = self.b_l1 + dt * e
        d1 = dx * np.sum(np.abs(u_new - v_new), axis=-1)
        rise = d1 - self.d1
        self.n_d1_increase += rise > 0
        self.n_d1_violation += rise > D1_RTOL * self.d1_0
        self.max_d1_increase = np.maximum(self.max_d1_increase, rise)
        self.d1 = d1
        self.sup_d1 = np.maximum(self.sup_d1, self.d1)
        R = self.d1_0 + self.mart + self.drift - self.d1
        self.min_residual = np.minimum(self.min_residual, R)
        self.n_below += R < -self.tol
        if self.record_steps is not None:
            self._store(m)

    @property
    def series(self) -> dict:
        return self._rec


def inequality_residual(diag: CoupledDiagnostics, d1_0: Optional[float] = None) -> np.ndarray:
    """``R(t) = d1(0) + mart(t) + drift(t) - d1(t)``; nonnegative in continuous time."""
    d1_0 = diag.d1_0 if d1_0 is None else d1_0
    return d1_0 + diag.mart + diag.drift - diag.d1


# -- moment estimators ----------------------------------------------------------


def median_of_means(x, blocks: int = DEFAULT_MOM_BLOCKS) -> tuple[float, float]:
    """Median of block means and its standard error.

    Blocks are contiguous in replica order. The error uses the asymptotic
    relative efficiency of the median, ``sqrt(pi/2) * sd(block means) / sqrt(blocks)``.
    With fewer samples than blocks it falls back to the plain mean.
    """
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("empty sample")
    if x.size < blocks:
        se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else float("nan")
        return float(np.mean(x)), se
    means = np.array([c.mean() for c in np.array_split(x, blocks)])
    se = math.sqrt(math.pi / 2) * float(np.std(means, ddof=1)) / math.sqrt(blocks)
    return float(np.median(means)), se


@dataclass
class MomentReport:
    gamma: float
    variant: str
    lhs: float
    rhs_scale: float
    ratio: float
    stderr: float
    ratio_stderr: float
    replicas: int
    seed: Optional[int] = None

    def to_record(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


VARIANTS = ("iii", "iv")


@dataclass
class EnsembleMoments:
    """Per-replica scalars needed by ``moment_bound``."""

    sup_d1: np.ndarray
    bracket_T: np.ndarray
    b_l1_T: np.ndarray
    d1_0: float
    b_nonincreasing: bool
    seed: Optional[int] = None

    @classmethod
    def from_series(cls, diags: Sequence[CoupledDiagnostics], seed=None) -> "EnsembleMoments":
        d0 = {round(d.d1_0, 15) for d in diags}
        if len(d0) != 1:
            raise ValueError("ensemble members must share the initial L1 distance")
        return cls(
            np.array([d.sup_d1 for d in diags]),
            np.array([d.bracket[-1] for d in diags]),
            np.array([d.b_l1[-1] for d in diags]),
            diags[0].d1_0,
            all(d.b_nonincreasing for d in diags),
            seed,
        )


def moment_values(ens: EnsembleMoments, gamma: float, variant: str = "iii") -> np.ndarray:
    vals = np.asarray(ens.sup_d1) ** gamma + np.asarray(ens.bracket_T) ** (gamma / 2)
    if variant == "iv":
        vals = vals + np.asarray(ens.b_l1_T) ** gamma
    return vals


def moment_bound(ensemble, gamma: float, variant: str = "iii", blocks: int = DEFAULT_MOM_BLOCKS) -> MomentReport:
    """Median-of-means estimate of the fractional stability moment.

    ``ensemble`` is an ``EnsembleMoments`` or a sequence of
    ``CoupledDiagnostics``. Variant ``"iv"`` adds the integrated drift gap and
    requires a non-increasing drift. Quantities over an infinite horizon are
    truncated at the run horizon, so they bound the untruncated ones from below.
    """
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}")
    ens = ensemble if isinstance(ensemble, EnsembleMoments) else EnsembleMoments.from_series(ensemble)
    if variant == "iv" and not ens.b_nonincreasing:
        raise ValueError("variant iv needs a non-increasing drift")
    vals = moment_values(ens, gamma, variant)
    lhs, se = median_of_means(vals, blocks)
    scale = ens.d1_0**gamma
    ratio = lhs / scale if scale > 0 else float("nan")
    rse = se / scale if scale > 0 else float("nan")
    return MomentReport(gamma, variant, lhs, scale, ratio, se, rse, int(vals.size), ens.seed)


def bands_overlap(reports: Sequence[MomentReport], k: float = 3.0) -> bool:
    """True when every pair of ratio bands ``ratio +- k * se`` intersects."""
    lo = [r.ratio - k * r.ratio_stderr for r in reports]
    hi = [r.ratio + k * r.ratio_stderr for r in reports]
    return max(lo) <= min(hi)


# -- confluence and coupling statistics ----------------------------------------


def confluence_tail(d1) -> np.ndarray:
    """Backward running maximum ``sup_{s >= t} d1(s)`` over the recorded horizon."""
    d1 = np.asarray(d1, dtype=float)
    return np.maximum.accumulate(d1[..., ::-1], axis=-1)[..., ::-1]


def k_stat(u, u_tilde, pair: CoefficientPair, dx: Optional[float] = None):
    """``||b(u) - b(u~)||_1 + ||sigma(u) - sigma(u~)||_1 ** 2``; batches over leading axes."""
    if isinstance(u, Field):
        if not isinstance(u_tilde, Field) or u.grid != u_tilde.grid:
            raise ValueError("k_stat needs two fields on one grid")
        dx, u, u_tilde = u.grid.dx, u.values, u_tilde.values
    u, u_tilde = np.asarray(u, float), np.asarray(u_tilde, float)
    dx = 1.0 / u.shape[-1] if dx is None else dx
    db = dx * np.sum(np.abs(pair.b(u) - pair.b(u_tilde)), axis=-1)
    ds = dx * np.sum(np.abs(pair.sigma(u) - pair.sigma(u_tilde)), axis=-1)
    out = db + ds * ds
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class SubsequenceReport:
    indices: np.ndarray
    times: np.ndarray
    values: np.ndarray
    integral: float
    tail_share: float
    integrable: bool


def select_subsequence(K, times, n: int) -> SubsequenceReport:
    """Pick the minimiser of ``K`` in each of ``n`` geometrically growing windows.

    Window edges are ``T * 2^(j-n)`` for ``j = 0..n``. The series is flagged
    non-integrable when the second half of the horizon carries at least a
    quarter of the running integral, the signature of linear growth.
    """
    K = np.asarray(K, dtype=float)
    times = np.asarray(times, dtype=float)
    if K.shape != times.shape or K.ndim != 1 or K.size < 2:
        raise ValueError("K and times must be matching 1-d series")
    if np.any(K < 0):
        raise ValueError("K must be nonnegative")
    if n < 1:
        raise ValueError("need at least one window")
    T = times[-1]
    edges = T * 2.0 ** (np.arange(n + 1) - n)
    idx = []
    for j in range(n):
        last = j == n - 1
        mask = (times >= edges[j]) & ((times <= edges[j + 1]) if last else (times < edges[j + 1]))
        cand = np.flatnonzero(mask)
        if cand.size == 0:
            raise ValueError("a window holds no time points; use fewer windows")
        idx.append(int(cand[np.argmin(K[cand])]))
    idx = np.array(idx)
    dt = np.diff(times)
    total = float(np.sum(K[:-1] * dt))
    late = times[:-1] >= T / 2
    tail = float(np.sum(K[:-1][late] * dt[late]))
    share = tail / total if total > 0 else 0.0
    return SubsequenceReport(idx, times[idx], K[idx], total, share, share < 0.25)


# -- weak and mild identities ---------------------------------------------------

_PHI = re.compile(r"^(1|cos(\d*))$")


def parse_test_function(tag) -> int:
    """Cosine mode index for a Neumann-compatible test function tag.

    ``"1"`` is the constant, ``"cos"`` is ``cos(pi x)`` and ``"cosK"`` is
    ``cos(K pi x)``; an integer is taken as the mode index itself.
    """
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError("mode index must be nonnegative")
        return int(tag)
    hit = _PHI.match(str(tag).replace(" ", ""))
    if not hit:
        raise ValueError(f"test function {tag!r} is not of the form 1 or cos(k pi x)")
    if hit.group(1) == "1":
        return 0
    return int(hit.group(2) or 1)


def weak_form_residual(path: PathRecord, noise: NoiseGrid, pair: CoefficientPair, phi="cos") -> np.ndarray:
    """Test-function identity residual at every time level (stride-1 record)."""
    k = parse_test_function(phi)
    grid = path.grid
    if noise.grid != grid:
        raise ValueError("noise and path grids differ")
    U = path.full_history()
    dW = noise.materialize()
    x = grid.x
    ph = np.cos(k * np.pi * x)
    ph2 = -((k * np.pi) ** 2) * ph
    dt, dx = grid.dt, grid.dx
    lhs = dx * (U @ ph)
    inc = np.sum(pair.sigma(U[:-1]) * ph * dW, axis=1)
    inc = inc + dt * dx * (U[:-1] @ ph2 + pair.b(U[:-1]) @ ph)
    rhs = lhs[0] + np.concatenate([[0.0], np.cumsum(inc)])
    return lhs - rhs


def mild_residual(path: PathRecord, noise: NoiseGrid, pair: CoefficientPair, spec: KernelSpec, t: float, x: float) -> float:
    """``u(t, x)`` minus its kernel reconstruction from the same noise.

    Evaluated at the midpoint of the cell containing ``x``; requires a
    stride-1 record.
    """
    grid = path.grid
    c = grid.cell_of(x)
    xc = float(grid.x[c])
    idx = int(round(t / grid.dt))
    if abs(t - idx * grid.dt) > 1e-9 * max(1.0, t) or not 0 <= idx <= grid.M:
        raise ValueError(f"t={t} is not on the time grid")
    U = path.full_history()
    if idx == 0:
        return 0.0
    free = semigroup_apply(spec, U[0], t)[c]
    G = convolution_rows(spec, grid, idx, xc)
    hist = U[:idx]
    dW = noise.increments(0, idx)
    stoch = float(np.sum(G * pair.sigma(hist) * dW))
    drift = float(np.sum(G * pair.b(hist))) * grid.dt * grid.dx
    return float(U[idx, c] - (free + stoch + drift))


# -- mollified absolute value ---------------------------------------------------


def _check_eps(eps: float):
    if not eps > 0:
        raise ValueError("eps must be positive")


def phi_eps(z, eps: float):
    """Smooth ``|z|``: ``z^2/(2 eps) + eps/2`` inside ``(-eps, eps)``, ``|z|`` outside."""
    _check_eps(eps)
    z = np.asarray(z, dtype=float)
    a = np.abs(z)
    out = np.where(a < eps, z * z / (2 * eps) + eps / 2, a)
    return float(out) if out.ndim == 0 else out


def phi_eps_prime(z, eps: float):
    _check_eps(eps)
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) < eps, z / eps, np.sign(z))
    return float(out) if out.ndim == 0 else out


def phi_eps_second(z, eps: float):
    _check_eps(eps)
    z = np.asarray(z, dtype=float)
    out = np.where(np.abs(z) < eps, 1.0 / eps, 0.0)
    return float(out) if out.ndim == 0 else out
