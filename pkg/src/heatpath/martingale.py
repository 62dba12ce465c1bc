"""Stopped Brownian motion as a model of a nonnegative continuous local martingale.

``M_t = m + beta_t`` is run until it hits 0 (equivalently, ``beta`` hits
``-m``), so the quadratic variation of ``M`` is the elapsed time and
``S = sup beta`` before absorption has ``P[S >= x] = m / (m + x)``.

Each Euler step is corrected with the Brownian bridge between its endpoints:
barrier crossings inside a step are detected with probability
``exp(-2 a b / dt)`` (distances ``a`` and ``b`` to the barrier), and the
within-step maximum is sampled exactly from the bridge-maximum law.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate, special
from scipy.stats import binomtest

from .diagnostics import median_of_means
from .noise import derive_seed

CHUNK = 10_000
HEAVY_TAIL_GAMMA = 0.4


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=(derive_seed(seed, stream).key << 64) | 0x6D61))


def _bridge_max(a, b, dt, u):
    return 0.5 * (a + b + np.sqrt((b - a) ** 2 - 2.0 * dt * np.log(u)))


def _crossed(dist_a, dist_b, dt, u):
    """Bridge crossing test for a barrier at distances ``dist_a``, ``dist_b`` (>= 0 inside)."""
    inside = dist_b > 0
    p = np.where(inside, np.exp(-2.0 * np.clip(dist_a, 0, None) * np.clip(dist_b, 0, None) / dt), 1.0)
    return ~inside | (u < p)


@dataclass
class StoppedPath:
    """Values of ``M`` on the grid ``j * dt`` up to the cap (zero after absorption)."""

    m: float
    dt: float
    values: np.ndarray
    running_max: np.ndarray
    stop_index: Optional[int]
    tau: float
    censored: bool

    @property
    def sup(self) -> float:
        return float(self.running_max[-1])

    @property
    def S(self) -> float:
        """Supremum of the driving Brownian motion before absorption."""
        return self.sup - self.m

    @property
    def bracket(self) -> float:
        """Quadratic variation of the stopped martingale (elapsed time)."""
        return self.tau


def simulate_stopped_bm(m: float, dt: float, T_cap: float, seed: int) -> StoppedPath:
    """One bridge-corrected Euler path of ``m + beta`` absorbed at 0, capped at ``T_cap``."""
    if not m > 0 or not dt > 0 or not T_cap > 0:
        raise ValueError("m, dt and T_cap must be positive")
    n = max(1, int(math.ceil(T_cap / dt - 1e-9)))
    rng = _rng(seed, 0)
    values = np.zeros(n + 1)
    runmax = np.empty(n + 1)
    values[0] = runmax[0] = m
    pos, top, stop = m, m, None
    sd = math.sqrt(dt)
    done = 0
    while done < n and stop is None:
        k = min(4096, n - done)
        z = rng.standard_normal(k) * sd
        u = rng.random((k, 2))
        for i in range(k):
            j = done + i + 1
            nxt = pos + z[i]
            if _crossed(np.array(pos), np.array(nxt), dt, u[i, 0]):
                top = max(top, pos)
                runmax[j:] = top
                stop = j
                break
            top = max(top, float(_bridge_max(pos, nxt, dt, u[i, 1])))
            values[j] = pos = nxt
            runmax[j] = top
        done += k
    if stop is None:
        return StoppedPath(m, dt, values, runmax, None, n * dt, True)
    return StoppedPath(m, dt, values, runmax, stop, (stop - 0.5) * dt, False)


# -- ensembles ------------------------------------------------------------------


@dataclass
class _Ensemble:
    S: np.ndarray
    tau: np.ndarray
    censored: np.ndarray
    position: np.ndarray
    hit_upper: np.ndarray


def _run_ensemble(m, dt, T_cap, seed, replicas, upper=None, chunk=CHUNK) -> _Ensemble:
    """``beta`` started at 0, stopped at ``-m`` (and at ``upper`` if given) or at the cap."""
    n_steps = max(1, int(math.ceil(T_cap / dt - 1e-9)))
    sd = math.sqrt(dt)
    out = {k: [] for k in ("S", "tau", "censored", "position", "hit_upper")}
    for c, start in enumerate(range(0, replicas, chunk)):
        R = min(chunk, replicas - start)
        rng = _rng(seed, c + 1)
        pos = np.zeros(R)
        S = np.zeros(R)
        tau = np.full(R, n_steps * dt)
        cens = np.ones(R, dtype=bool)
        hit_up = np.zeros(R, dtype=bool)
        act = np.arange(R)
        for j in range(1, n_steps + 1):
            if act.size == 0:
                break
            a = pos[act]
            b = a + sd * rng.standard_normal(act.size)
            u = rng.random((act.size, 3))
            low = _crossed(a + m, b + m, dt, u[:, 0])
            if upper is not None:
                up = _crossed(upper - a, upper - b, dt, u[:, 1])
                both = low & up
                if np.any(both):
                    # rare: decide the first barrier in proportion to the crossing odds
                    pl = np.exp(-2 * np.clip(a + m, 0, None) * np.clip(b + m, 0, None) / dt)
                    pu = np.exp(-2 * np.clip(upper - a, 0, None) * np.clip(upper - b, 0, None) / dt)
                    first_up = u[:, 2] * (pl + pu) < pu
                    low = low & ~(both & first_up)
                    up = up & ~(both & ~first_up)
                stop = low | up
                hit_up[act[up]] = True
            else:
                stop = low
            S[act] = np.maximum(S[act], np.where(stop, a, _bridge_max(a, b, dt, u[:, 2])))
            done = act[stop]
            tau[done] = (j - 0.5) * dt
            cens[done] = False
            pos[act] = b
            act = act[~stop]
        out["S"].append(S)
        out["tau"].append(tau)
        out["censored"].append(cens)
        out["position"].append(pos)
        out["hit_upper"].append(hit_up)
    return _Ensemble(*(np.concatenate(out[k]) for k in ("S", "tau", "censored", "position", "hit_upper")))


@dataclass
class HittingReport:
    m: float
    x: float
    estimate: float
    lower: float
    upper: float
    hits: int
    replicas: int
    censored: int
    exact: float
    confidence: float

    @property
    def covers_exact(self) -> bool:
        return self.lower <= self.exact <= self.upper

    def to_record(self) -> dict:
        return {**{k: getattr(self, k) for k in self.__dataclass_fields__}, "covers_exact": self.covers_exact}


def hitting_prob(
    m: float,
    x: float,
    replicas: int,
    seed: int,
    dt: float = 1e-3,
    T_cap: Optional[float] = None,
    confidence: float = 0.99,
) -> HittingReport:
    """Monte Carlo ``P[S_m >= x]`` from exits of ``beta`` through ``(-m, x)``, with a Wilson interval."""
    if not m > 0:
        raise ValueError("m must be positive")
    if x < 0:
        raise ValueError("x must be nonnegative")
    exact = m / (m + x)
    if x == 0:
        return HittingReport(m, x, 1.0, 1.0, 1.0, replicas, replicas, 0, 1.0, confidence)
    T_cap = 50.0 * (m + x) ** 2 if T_cap is None else T_cap
    ens = _run_ensemble(m, dt, T_cap, seed, replicas, upper=x)
    hits = int(ens.hit_upper.sum())
    ci = binomtest(hits, replicas).proportion_ci(confidence_level=confidence, method="wilson")
    return HittingReport(m, x, hits / replicas, float(ci.low), float(ci.high), hits, replicas, int(ens.censored.sum()), exact, confidence)


# -- constants --------------------------------------------------------------------


def _check_gamma(gamma: float):
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")


def lemma_constants(gamma: float) -> tuple[float, float]:
    """``c1 = int_0^inf dy / (1 + y^(1/gamma))`` and ``c2 = E|N(0,1)|^(-gamma)`` by quadrature."""
    _check_gamma(gamma)
    q = 1.0 / gamma
    opts = dict(epsabs=1e-13, epsrel=1e-12, limit=200)
    head = integrate.quad(lambda y: 1.0 / (1.0 + y**q), 0.0, 1.0, **opts)[0]
    # tail y = 1/t: int_0^1 t^(q-2) / (1 + t^q) dt, algebraic weight at t = 0
    tail = integrate.quad(lambda t: 1.0 / (1.0 + t**q), 0.0, 1.0, weight="alg", wvar=(q - 2.0, 0.0), **opts)[0]
    dens = lambda z: 2.0 * math.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)
    near = integrate.quad(dens, 0.0, 1.0, weight="alg", wvar=(-gamma, 0.0), **opts)[0]
    far = integrate.quad(lambda z: z**-gamma * dens(z), 1.0, np.inf, **opts)[0]
    return head + tail, near + far


def c1_closed_form(gamma: float) -> float:
    _check_gamma(gamma)
    return math.pi * gamma / math.sin(math.pi * gamma)


def c2_closed_form(gamma: float) -> float:
    _check_gamma(gamma)
    return 2.0 ** (-gamma / 2) * math.gamma((1 - gamma) / 2) / math.sqrt(math.pi)


# -- moment check ------------------------------------------------------------------


@dataclass
class LemmaReport:
    gamma: float
    m: float
    replicas: int
    censored_fraction: float
    E_S_gamma: float
    E_S_gamma_se: float
    E_sup_M_gamma: float
    E_sup_M_gamma_se: float
    E_tau_gamma2: float
    E_tau_gamma2_se: float
    analytic_S: float
    analytic_tau: float
    bound: float
    estimator: str

    @property
    def total(self) -> float:
        return self.E_sup_M_gamma + self.E_tau_gamma2

    @property
    def within_bound(self) -> bool:
        return self.total <= self.bound

    def to_record(self) -> dict:
        rec = {k: getattr(self, k) for k in self.__dataclass_fields__}
        rec.update(total=self.total, within_bound=self.within_bound)
        return rec


def _censored_S_moment(y, p, m, gamma):
    """``E[S^gamma]`` given running max ``y`` and current level ``p = m + beta`` of a censored path."""
    a = y / m
    full = gamma * math.pi / math.sin(math.pi * gamma)
    partial = a**gamma * special.hyp2f1(1.0, gamma, gamma + 1.0, -a)
    return y**gamma + p * m ** (gamma - 1.0) * (full - partial)


def _censored_supM_moment(y, p, m, gamma):
    top = m + y
    return top**gamma + p * gamma * top ** (gamma - 1.0) / (1.0 - gamma)


def lemma_check(
    gamma: float,
    m: float,
    replicas: int,
    seed: int,
    dt: Optional[float] = None,
    T_cap: Optional[float] = None,
) -> LemmaReport:
    """Monte Carlo moments of the supremum and of the absorption time.

    Censored paths contribute their exact conditional expectation given the
    state at the cap (the future maximum of ``M`` from level ``p`` exceeds
    ``z`` with probability ``p / z``). The absorption-time moment adds the
    analytic tail beyond the cap, ``P[tau >= t] = P[|N(0,1)| < m / sqrt(t)]``.
    Step and cap scale with ``m^2`` by default, so the ensemble is exactly
    Brownian-rescaled across ``m``.
    """
    _check_gamma(gamma)
    if not m > 0:
        raise ValueError("m must be positive")
    dt = 1e-2 * m * m if dt is None else dt
    T_cap = 100.0 * m * m if T_cap is None else T_cap
    ens = _run_ensemble(m, dt, T_cap, seed, replicas)
    c = ens.censored
    p = m + ens.position
    S_vals = ens.S**gamma
    supM = (m + ens.S) ** gamma
    if np.any(c):
        S_vals[c] = _censored_S_moment(ens.S[c], p[c], m, gamma)
        supM[c] = _censored_supM_moment(ens.S[c], p[c], m, gamma)
    e = gamma / 2
    cap = T_cap**e
    tau_vals = np.where(c, cap, ens.tau**e)
    tail = integrate.quad(lambda s: special.erf(m * s ** (-0.5 / e) / math.sqrt(2.0)), cap, np.inf, limit=200)[0]
    if gamma > HEAVY_TAIL_GAMMA:
        warnings.warn("gamma > 0.4: the supremum moment is not square-integrable; using median-of-means", RuntimeWarning)
        est = lambda v: median_of_means(v)
        name = "median-of-means"
    else:
        est = lambda v: (float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(v.size)))
        name = "mean"
    s_mean, s_se = est(S_vals)
    m_mean, m_se = est(supM)
    t_mean, t_se = est(tau_vals)
    c1, c2 = lemma_constants(gamma)
    return LemmaReport(
        gamma,
        m,
        replicas,
        float(np.mean(c)),
        s_mean,
        s_se,
        m_mean,
        m_se,
        t_mean + tail,
        t_se,
        m**gamma * c1,
        m**gamma * c2,
        (1.0 + c1 + c2) * m**gamma,
        name,
    )
