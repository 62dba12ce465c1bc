"""Time stepping for the stochastic heat equation with Neumann boundaries.

The state lives at cell midpoints. One explicit step is

    u' = u + r * lap(u) + dt * b(u) + sigma(u) * dW / dx,     r = dt / dx^2,

with mirrored ghost cells ``u[-1] = u[0]`` and ``u[N] = u[N-1]``. The
semi-implicit variant moves ``r * lap`` to the new time level and solves a
symmetric tridiagonal system. Array helpers accept leading batch axes so that
ensembles advance in lock-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np
from scipy.integrate import quad
from scipy.linalg import cho_solve_banded, cholesky_banded

from .coeffs import CoefficientPair
from .noise import BLOCK, GridSpec, NoiseGrid, cosine_basis

SCHEMES = ("explicit", "semi-implicit-linear")
EXPLICIT_CFL_LIMIT = 0.5


class PathBlowupError(RuntimeError):
    """A path produced non-finite values."""

    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class Field:
    """Spatial profile sampled at the cell midpoints of ``grid``."""

    __slots__ = ("values", "grid")

    def __init__(self, values, grid: GridSpec):
        values = np.array(values, dtype=float)
        if values.shape != (grid.N,):
            raise ValueError(f"field needs shape ({grid.N},), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite samples")
        values.setflags(write=False)
        self.values = values
        self.grid = grid

    def __repr__(self):
        return f"Field(N={self.grid.N}, l1={self.norm(1):.6g})"

    def __eq__(self, other):
        return isinstance(other, Field) and np.array_equal(self.values, other.values)

    __hash__ = None

    def norm(self, p: int = 1) -> float:
        return float((self.grid.dx * np.sum(np.abs(self.values) ** p)) ** (1.0 / p))

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.values - other.values, self.grid)


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str = "explicit"
    checkpoint_stride: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if int(self.checkpoint_stride) != self.checkpoint_stride or self.checkpoint_stride < 1:
            raise ValueError("checkpoint_stride must be a positive integer")

    def validate(self, grid: GridSpec) -> None:
        if self.scheme == "explicit" and grid.cfl > EXPLICIT_CFL_LIMIT + 1e-12:
            raise ValueError(
                f"explicit scheme needs cfl <= {EXPLICIT_CFL_LIMIT}, got cfl={grid.cfl:.6g}"
            )


# -- array kernels ------------------------------------------------------------


def laplacian(u: np.ndarray) -> np.ndarray:
    """Second difference with mirrored ghost cells (not divided by dx^2)."""
    lap = np.empty_like(u)
    lap[..., 1:-1] = u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]
    lap[..., 0] = u[..., 1] - u[..., 0]
    lap[..., -1] = u[..., -2] - u[..., -1]
    return lap


class Stepper:
    """Advance batched states one step; the factorisation is set up once.

    ``forcing`` is the noise density for the step, i.e. ``dW / dx`` for the
    plain scheme or a filtered version of it.
    """

    def __init__(self, pair: CoefficientPair, grid: GridSpec, scheme: SchemeConfig):
        scheme.validate(grid)
        self.pair, self.grid, self.scheme = pair, grid, scheme
        self.r = grid.cfl
        self._drift = pair.b.kind != "zero"
        self._noise = pair.sigma.kind != "zero"
        self._chol = None
        if scheme.scheme == "semi-implicit-linear":
            N, r = grid.N, self.r
            ab = np.empty((2, N))
            ab[0, 0] = 0.0
            ab[0, 1:] = -r
            ab[1, :] = 1.0 + 2.0 * r
            ab[1, 0] = ab[1, -1] = 1.0 + r
            self._chol = cholesky_banded(ab)

    def __call__(self, u: np.ndarray, forcing: np.ndarray, bu=None, su=None) -> np.ndarray:
        """``bu`` and ``su`` may carry precomputed ``b(u)`` and ``sigma(u)``."""
        rhs = u.copy() if self._chol is not None else u + self.r * laplacian(u)
        if self._drift:
            rhs += self.grid.dt * (self.pair.b(u) if bu is None else bu)
        if self._noise:
            rhs += (self.pair.sigma(u) if su is None else su) * forcing
        if self._chol is None:
            return rhs
        return cho_solve_banded((self._chol, False), rhs.T).T


def fd_step(state: Field, dW, pair: CoefficientPair, grid: GridSpec, scheme: SchemeConfig = SchemeConfig(), step: int = 0) -> Field:
    """One step of the finite-difference scheme driven by the increments ``dW``."""
    out = Stepper(pair, grid, scheme)(state.values, np.asarray(dW, float) / grid.dx)
    if not np.all(np.isfinite(out)):
        raise PathBlowupError(step)
    return Field(out, grid)


# -- path records ---------------------------------------------------------------


@dataclass
class PathRecord:
    """Checkpointed fields plus per-step norm series of one path.

    ``l1``, ``l2`` and ``sigma_l2_sq_integral`` have ``M + 1`` entries (one per
    time level, including t = 0); fields are kept every ``checkpoint_stride``
    steps and always at the final step.
    """

    grid: GridSpec
    checkpoint_steps: np.ndarray
    checkpoints: np.ndarray
    l1: np.ndarray
    l2: np.ndarray
    sigma_l2_sq_integral: np.ndarray
    seed: Optional[object] = None
    meta: dict = field(default_factory=dict)

    @property
    def checkpoint_times(self) -> np.ndarray:
        return self.checkpoint_steps * self.grid.dt

    @property
    def terminal(self) -> Field:
        return Field(self.checkpoints[-1], self.grid)

    @property
    def initial(self) -> Field:
        return Field(self.checkpoints[0], self.grid)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def field_at(self, step: int) -> Field:
        hit = np.flatnonzero(self.checkpoint_steps == step)
        if hit.size == 0:
            raise KeyError(f"step {step} was not checkpointed")
        return Field(self.checkpoints[hit[0]], self.grid)

    def full_history(self) -> np.ndarray:
        """All M + 1 fields; only available for stride-1 records."""
        if self.checkpoint_steps.size != self.grid.M + 1:
            raise ValueError("record was not checkpointed at every step")
        return self.checkpoints

    @property
    def sup_l1(self) -> float:
        return float(np.max(self.l1))


def checkpoint_steps(M: int, stride: int) -> np.ndarray:
    steps = np.arange(0, M + 1, stride)
    if steps[-1] != M:
        steps = np.append(steps, M)
    return steps


class _Recorder:
    """Streaming per-step norms and checkpoints for a batch of paths."""

    def __init__(self, u0: np.ndarray, pair: CoefficientPair, grid: GridSpec, stride: int):
        self.pair, self.grid = pair, grid
        self.steps = checkpoint_steps(grid.M, stride)
        lead = u0.shape[:-1]
        self.l1 = np.empty(lead + (grid.M + 1,))
        self.l2 = np.empty(lead + (grid.M + 1,))
        self.sig = np.empty(lead + (grid.M + 1,))
        self.fields = np.empty(lead + (self.steps.size, grid.N))
        self._next = 0
        self.sig[..., 0] = 0.0
        self._sig_prev = self._sigma_sq(u0)
        self.record(0, u0)

    def _sigma_sq(self, u):
        s = self.pair.sigma(u)
        return self.grid.dx * np.sum(np.broadcast_to(s, u.shape) ** 2, axis=-1)

    def record(self, m: int, u: np.ndarray) -> None:
        dx = self.grid.dx
        self.l1[..., m] = dx * np.sum(np.abs(u), axis=-1)
        self.l2[..., m] = np.sqrt(dx * np.sum(u * u, axis=-1))
        if m > 0:
            # left-point rule, matching the Ito increments
            self.sig[..., m] = self.sig[..., m - 1] + self.grid.dt * self._sig_prev
            self._sig_prev = self._sigma_sq(u)
        if self._next < self.steps.size and self.steps[self._next] == m:
            self.fields[..., self._next, :] = u
            self._next += 1

    def records(self, seeds) -> list[PathRecord]:
        lead = self.l1.shape[:-1]
        out = []
        for idx in np.ndindex(*lead):
            out.append(
                PathRecord(
                    self.grid,
                    self.steps.copy(),
                    self.fields[idx],
                    self.l1[idx],
                    self.l2[idx],
                    self.sig[idx],
                    seeds[idx[0]] if seeds is not None else None,
                )
            )
        return out


NoiseFilter = Callable[[np.ndarray], np.ndarray]


def advance(
    states: np.ndarray,
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    noise: NoiseGrid,
    filt: Optional[NoiseFilter] = None,
    observer=None,
) -> np.ndarray:
    """Advance ``states`` (shape (..., N)) over the whole grid.

    ``noise`` is a ``NoiseGrid`` (every slice sees the same increments) or an
    ensemble source whose blocks have shape (R, B, N), broadcast against the
    trailing (R, N) axes of ``states``. ``observer(m, u_prev, u_new, dW)`` is
    called after each step.
    """
    if noise.grid != grid:
        raise ValueError("noise was generated for a different grid")
    step = Stepper(pair, grid, scheme)
    u = np.array(states, dtype=float)
    M = grid.M
    for j in range(math.ceil(M / BLOCK)):
        dW = noise.block(j)
        xi = (dW / grid.dx) if filt is None else filt(dW)
        for k in range(dW.shape[-2]):
            m = j * BLOCK + k
            new = step(u, xi[..., k, :])
            if not np.all(np.isfinite(new)):
                raise PathBlowupError(m + 1)
            if observer is not None:
                observer(m + 1, u, new, dW[..., k, :])
            u = new
    return u


def simulate_path(
    u0: Field,
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    noise: NoiseGrid,
    noise_filter: Optional[NoiseFilter] = None,
) -> PathRecord:
    return simulate_many(u0.values[None], pair, grid, scheme, noise, noise_filter)[0]


def simulate_many(
    u0s: np.ndarray,
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    noise: NoiseGrid,
    noise_filter: Optional[NoiseFilter] = None,
) -> list[PathRecord]:
    """Several initial profiles advanced on one shared noise realisation."""
    u0s = np.atleast_2d(np.asarray(u0s, dtype=float))
    if u0s.shape[-1] != grid.N:
        raise ValueError("initial data does not match the grid")
    if not np.all(np.isfinite(u0s)):
        raise ValueError("initial data contains non-finite samples")
    rec = _Recorder(u0s, pair, grid, scheme.checkpoint_stride)
    advance(u0s, pair, grid, scheme, noise, noise_filter, lambda m, a, b, dW: rec.record(m, b))
    seeds = [noise.seed] * u0s.shape[0]
    return rec.records(seeds)


def simulate_coupled(
    u0: Field,
    v0: Field,
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    noise: NoiseGrid,
) -> tuple[PathRecord, PathRecord]:
    """Two solutions on the identical noise increments at every step."""
    if u0.grid != v0.grid or u0.grid != grid:
        raise ValueError("both initial fields must live on the simulation grid")
    u, v = simulate_many(np.stack([u0.values, v0.values]), pair, grid, scheme, noise)
    return u, v


def galerkin_projector(N: int, n: int) -> np.ndarray:
    """``E_n E_n^T`` for the first ``n`` cosine modes; maps dW to the noise density."""
    if not 0 <= n < N:
        raise ValueError(f"Galerkin mode count must satisfy 0 <= n < N={N}, got {n}")
    E = cosine_basis(N, n)
    return E @ E.T


def galerkin_filter(N: int, n: int) -> NoiseFilter:
    P = galerkin_projector(N, n)
    # per-block product of fixed shape keeps results independent of batching
    return lambda dW: dW @ P


def galerkin_simulate(
    u0: Field,
    n: int,
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    noise: NoiseGrid,
) -> PathRecord:
    """Path driven only by the first ``n`` noise modes ``dB^k = sum_i e_k(x_i) dW_i``.

    Here ``k`` runs over ``0..n-1`` (the constant mode first), so ``n = 0``
    removes the noise entirely.
    """
    return simulate_path(u0, pair, grid, scheme, noise, galerkin_filter(grid.N, n))


# -- initial conditions -------------------------------------------------------


INITIAL_KINDS = ("constant", "cosine", "step", "singular", "table")
_IC_DEFAULTS = {
    "constant": {"value": 0.0},
    "cosine": {"amplitude": 1.0, "mode": 1, "offset": 0.0},
    "step": {"left": 1.0, "right": 0.0, "at": 0.5},
    "singular": {"amplitude": 1.0, "power": 0.5},
    "table": {"xs": None, "ys": None},
}


@dataclass(frozen=True)
class InitialCondition:
    """Descriptor of an integrable initial profile on [0, 1]."""

    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in INITIAL_KINDS:
            raise ValueError(f"unknown initial kind {self.kind!r}; expected one of {INITIAL_KINDS}")
        unknown = set(self.params) - set(_IC_DEFAULTS[self.kind])
        if unknown:
            raise ValueError(f"unknown parameters {sorted(unknown)} for initial kind {self.kind!r}")
        p = {**_IC_DEFAULTS[self.kind], **dict(self.params)}
        if self.kind == "singular" and not 0 < p["power"] < 1:
            raise ValueError("singular profile a*x^(-p) is integrable only for 0 < p < 1")
        if self.kind == "table":
            xs, ys = np.asarray(p["xs"], float), np.asarray(p["ys"], float)
            if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2 or np.any(np.diff(xs) <= 0):
                raise ValueError("table profile needs increasing xs and matching ys")
            p["xs"], p["ys"] = xs, ys
        object.__setattr__(self, "params", p)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        p = self.params
        if self.kind == "constant":
            return np.full(x.shape, float(p["value"]))
        if self.kind == "cosine":
            return p["offset"] + p["amplitude"] * np.cos(p["mode"] * np.pi * x)
        if self.kind == "step":
            return np.where(x < p["at"], p["left"], p["right"]).astype(float)
        if self.kind == "singular":
            with np.errstate(divide="ignore"):
                return p["amplitude"] * x ** (-p["power"])
        return np.interp(x, p["xs"], p["ys"])

    @property
    def bounded(self) -> bool:
        return self.kind != "singular"

    def sample(self, grid: GridSpec) -> Field:
        return Field(self(grid.x), grid)

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "params": {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()},
        }


def truncate_initial(u0: InitialCondition, level: float, grid: GridSpec) -> tuple[Field, float]:
    """Clamp ``u0`` to ``[-level, level]`` on the grid and return the L1 cost.

    The L1 error is computed for the continuous profile: in closed form for
    the singular power profile, by adaptive quadrature otherwise.
    """
    if not level > 0:
        raise ValueError("truncation level must be positive")
    values = np.clip(u0(grid.x), -level, level)
    p = u0.params
    if u0.kind == "singular":
        a, q = abs(p["amplitude"]), p["power"]
        cut = min((a / level) ** (1.0 / q), 1.0)
        # int_0^cut (a x^-q - level) dx
        err = a * cut ** (1.0 - q) / (1.0 - q) - level * cut
    else:
        excess = lambda x: max(abs(float(u0(x))) - level, 0.0)
        points = None
        if u0.kind == "step":
            points = [p["at"]] if 0 < p["at"] < 1 else None
        elif u0.kind == "table":
            points = [x for x in p["xs"] if 0 < x < 1] or None
        err = quad(excess, 0.0, 1.0, points=points, limit=200)[0]
    return Field(values, grid), float(err)
