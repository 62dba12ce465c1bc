"""Discrete space-time white noise and seed derivation.

Each cell ``[s_m, s_m + dt) x [i dx, (i+1) dx)`` carries an independent
``N(0, dt dx)`` increment. Increments are produced in fixed blocks of
``BLOCK`` time steps from a counter-based Philox stream keyed by
``(replica key, block index)``, so any step can be regenerated on demand
without storing the grid and the values never depend on how a run is chunked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

BLOCK = 256
_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class GridSpec:
    """Uniform cell-centred grid on [0, T] x [0, 1].

    ``M = ceil(T / dt)`` and the step is then snapped to ``T / M`` so the last
    step lands exactly on the horizon.
    """

    N: int
    dt: float
    T: float

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 2:
            raise ValueError(f"N must be an integer >= 2, got {self.N}")
        if not self.dt > 0 or not self.T > 0:
            raise ValueError("dt and T must be positive")
        M = max(1, math.ceil(self.T / self.dt - 1e-9))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "dt", self.T / M)

    @classmethod
    def from_cfl(cls, N: int, T: float, cfl: float) -> "GridSpec":
        return cls(N, cfl / N**2, T)

    @property
    def M(self) -> int:
        return max(1, round(self.T / self.dt))

    @property
    def dx(self) -> float:
        return 1.0 / self.N

    @property
    def cfl(self) -> float:
        return self.dt / self.dx**2

    @property
    def x(self) -> np.ndarray:
        return (np.arange(self.N) + 0.5) / self.N

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.M + 1)

    def cell_of(self, x: float) -> int:
        """Index of the cell containing ``x`` (right edge maps to the last cell)."""
        if not 0.0 <= x <= 1.0:
            raise ValueError(f"x={x} outside [0, 1]")
        return min(int(x * self.N), self.N - 1)


def splitmix64(x):
    """SplitMix64 finaliser; a bijection on 64-bit integers (scalar or uint64 array)."""
    if isinstance(x, np.ndarray):
        z = x.astype(np.uint64)
        with np.errstate(over="ignore"):
            z = z + np.uint64(_GOLDEN)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))
    z = (int(x) + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replica_index: int

    @property
    def key(self) -> int:
        """64-bit stream key; injective in the replica index for a fixed master."""
        base = splitmix64(self.master_seed & _MASK)
        return splitmix64((base + _GOLDEN * (self.replica_index + 1)) & _MASK)


def derive_seed(master: int, replica: int) -> SeedSpec:
    if replica < 0:
        raise ValueError("replica index must be nonnegative")
    return SeedSpec(int(master) & _MASK, int(replica))


def stream_keys(master: int, replicas) -> np.ndarray:
    """Vectorised ``derive_seed(master, r).key`` for an array of replicas."""
    r = np.asarray(replicas, dtype=np.uint64)
    base = np.uint64(splitmix64(int(master) & _MASK))
    with np.errstate(over="ignore"):
        mixed = base + np.uint64(_GOLDEN) * (r + np.uint64(1))
    return splitmix64(mixed)


class NoiseGrid:
    """Cell-integrated white-noise increments ``dW[m, i]`` for one replica.

    Either generated lazily from a seed, or wrapping an explicit ``(M, N)``
    array (used for coarsened or filtered noise).
    """

    def __init__(self, grid: GridSpec, seed: Optional[SeedSpec] = None, data=None):
        if (seed is None) == (data is None):
            raise ValueError("give exactly one of seed or data")
        self.grid = grid
        self.seed = seed
        self._data = None
        if data is not None:
            data = np.asarray(data, dtype=float)
            if data.shape != (grid.M, grid.N):
                raise ValueError(f"noise data shape {data.shape} != {(grid.M, grid.N)}")
            self._data = data
            self._data.setflags(write=False)
        self._cache: dict[int, np.ndarray] = {}

    @classmethod
    def from_array(cls, grid: GridSpec, data) -> "NoiseGrid":
        return cls(grid, data=data)

    @property
    def std(self) -> float:
        return math.sqrt(self.grid.dt * self.grid.dx)

    def block(self, j: int) -> np.ndarray:
        """Increments for steps ``[j*BLOCK, (j+1)*BLOCK)`` (truncated at M)."""
        lo, hi = j * BLOCK, min((j + 1) * BLOCK, self.grid.M)
        if self._data is not None:
            return self._data[lo:hi]
        out = self._cache.get(j)
        if out is None:
            rng = np.random.Generator(np.random.Philox(key=(self.seed.key << 64) | j))
            out = rng.standard_normal((BLOCK, self.grid.N))[: hi - lo] * self.std
            out.setflags(write=False)
            self._cache = {j: out}
        return out

    def increments(self, start: int, stop: int) -> np.ndarray:
        if not 0 <= start <= stop <= self.grid.M:
            raise ValueError("step range outside the grid")
        if self._data is not None:
            return self._data[start:stop]
        parts = []
        for j in range(start // BLOCK, (stop - 1) // BLOCK + 1 if stop > start else start // BLOCK):
            b = self.block(j)
            lo = max(start - j * BLOCK, 0)
            hi = min(stop - j * BLOCK, b.shape[0])
            parts.append(b[lo:hi])
        return np.concatenate(parts) if parts else np.empty((0, self.grid.N))

    def slice(self, m: int) -> np.ndarray:
        return self.block(m // BLOCK)[m % BLOCK]

    def materialize(self) -> np.ndarray:
        return self.increments(0, self.grid.M)


def generate_noise(grid: GridSpec, seed: SeedSpec) -> NoiseGrid:
    return NoiseGrid(grid, seed)


class EnsembleNoise:
    """Blocks of increments for several replicas at once, shape (R, B, N)."""

    def __init__(self, sources: Sequence[NoiseGrid]):
        if not sources:
            raise ValueError("empty ensemble")
        self.sources = list(sources)
        self.grid = self.sources[0].grid

    @classmethod
    def from_seeds(cls, grid: GridSpec, master: int, replicas) -> "EnsembleNoise":
        return cls([NoiseGrid(grid, derive_seed(master, int(r))) for r in replicas])

    def block(self, j: int) -> np.ndarray:
        return np.stack([s.block(j) for s in self.sources])


def cosine_basis(N: int, n_modes: int) -> np.ndarray:
    """Matrix ``E[i, k] = e_k(x_i)`` with ``e_0 = 1``, ``e_k = sqrt(2) cos(k pi x)``."""
    x = (np.arange(N) + 0.5) / N
    k = np.arange(n_modes)
    E = np.sqrt(2.0) * np.cos(np.pi * np.outer(x, k))
    if n_modes:
        E[:, 0] = 1.0
    return E


def project_mode(noise: NoiseGrid, k: int) -> np.ndarray:
    """Increments ``dB^k(m) = sum_i e_k(x_i) dW(i, m)`` for every step m."""
    N = noise.grid.N
    if not 0 <= k < N:
        raise ValueError(f"mode {k} not resolvable on a {N}-cell grid")
    e = cosine_basis(N, k + 1)[:, k]
    return noise.materialize() @ e


def coarsen(noise: np.ndarray, space: int = 2, time: int = 4) -> np.ndarray:
    """Sum fine increments into coarse cells (a consistent white-noise coarsening)."""
    M, N = noise.shape[-2:]
    if M % time or N % space:
        raise ValueError("fine grid does not tile the coarse grid")
    lead = noise.shape[:-2]
    return noise.reshape(*lead, M // time, time, N // space, space).sum(axis=(-3, -1))
