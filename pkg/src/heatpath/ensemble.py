"""Batched replica runners.

Replicas are split into chunks of a fixed size (independent of the worker
count); each chunk advances all of its replicas in lock-step with numpy and
draws every replica's noise from that replica's own counter-based stream.
Chunks are reassembled in replica order, so outputs do not depend on how many
workers processed them.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coeffs import CoefficientPair
from .diagnostics import CoupledAccumulator, EnsembleMoments, k_stat
from .noise import BLOCK, EnsembleNoise, GridSpec
from .solver import PathBlowupError, SchemeConfig, Stepper, galerkin_projector

CHUNK = 256


def _chunks(replicas: Sequence[int], size: int) -> list[np.ndarray]:
    r = np.asarray(replicas, dtype=np.int64)
    return [r[i : i + size] for i in range(0, r.size, size)]


def _map(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _as_groups(u0, N: int) -> np.ndarray:
    a = np.asarray(u0, dtype=float)
    if a.ndim == 1:
        a = a[None]
    if a.ndim != 2 or a.shape[1] != N:
        raise ValueError(f"initial data must have shape (N,) or (G, N) with N={N}")
    if not np.all(np.isfinite(a)):
        raise ValueError("initial data contains non-finite samples")
    return a


# -- coupled ensembles -----------------------------------------------------------


@dataclass
class CoupledSummary:
    """Per-replica results; arrays have shape (G, R) for G initial-data groups."""

    replicas: np.ndarray
    d1_0: np.ndarray
    d1_T: np.ndarray
    sup_d1: np.ndarray
    drift_T: np.ndarray
    bracket_T: np.ndarray
    mart_T: np.ndarray
    b_l1_T: np.ndarray
    min_residual: np.ndarray
    n_below: np.ndarray
    n_d1_increase: np.ndarray
    n_d1_violation: np.ndarray
    max_d1_increase: np.ndarray
    u_T: np.ndarray
    v_T: np.ndarray
    steps: int
    record_steps: Optional[np.ndarray] = None
    series: dict = field(default_factory=dict)
    b_nonincreasing: bool = False
    master_seed: Optional[int] = None

    def moments(self, group: int = 0) -> EnsembleMoments:
        return EnsembleMoments(
            self.sup_d1[group],
            self.bracket_T[group],
            self.b_l1_T[group],
            float(self.d1_0[group, 0]),
            self.b_nonincreasing,
            self.master_seed,
        )

    @property
    def negative_fraction(self) -> np.ndarray:
        """Share of steps whose residual fell below the tolerance, per group."""
        return self.n_below.sum(axis=-1) / (self.steps * self.n_below.shape[-1])


@dataclass(frozen=True)
class _CoupledJob:
    pair: CoefficientPair
    grid: GridSpec
    scheme: SchemeConfig
    u0: np.ndarray
    v0: np.ndarray
    master: int
    replicas: np.ndarray
    record_steps: Optional[np.ndarray]
    record_keys: tuple
    residual_tol: float


_SERIES_KEYS = ("d1", "drift", "bracket", "mart", "b_l1", "residual", "kstat")


def _coupled_chunk(job: _CoupledJob) -> dict:
    pair, grid = job.pair, job.grid
    dt, dx = grid.dt, grid.dx
    R, G = job.replicas.size, job.u0.shape[0]
    U = np.broadcast_to(job.u0[:, None, :], (G, R, grid.N)).copy()
    V = np.broadcast_to(job.v0[:, None, :], (G, R, grid.N)).copy()
    acc = CoupledAccumulator(pair, grid, U, V, None, job.residual_tol)
    keys = job.record_keys
    rec_steps = job.record_steps
    rec = {k: np.zeros((G, R, rec_steps.size)) for k in keys} if rec_steps is not None else {}
    slot = 0

    def store(m, u, v):
        nonlocal slot
        if rec_steps is None or slot >= rec_steps.size or rec_steps[slot] != m:
            return
        for k in keys:
            if k == "kstat":
                rec[k][..., slot] = k_stat(u, v, pair, dx)
            elif k == "residual":
                rec[k][..., slot] = acc.d1_0 + acc.mart + acc.drift - acc.d1
            else:
                rec[k][..., slot] = getattr(acc, k)
        slot += 1

    store(0, U, V)
    step = Stepper(pair, grid, job.scheme)
    noise = EnsembleNoise.from_seeds(grid, job.master, job.replicas)
    for j in range(math.ceil(grid.M / BLOCK)):
        dW = noise.block(j)
        xi = dW / dx
        for k in range(dW.shape[1]):
            m = j * BLOCK + k
            bu, bv = pair.b(U), pair.b(V)
            su, sv = pair.sigma(U), pair.sigma(V)
            s = np.where(U - V >= 0, 1.0, -1.0)
            db = bu - bv
            ds = np.broadcast_to(su - sv, U.shape)
            terms = (
                dx * np.sum(s * db, axis=-1),
                dx * np.sum(ds * ds, axis=-1),
                np.sum(s * ds * dW[:, k, :], axis=-1),
                dx * np.sum(np.abs(db), axis=-1),
            )
            Un = step(U, xi[:, k, :], bu, su)
            Vn = step(V, xi[:, k, :], bv, sv)
            if not (np.all(np.isfinite(Un)) and np.all(np.isfinite(Vn))):
                raise PathBlowupError(m + 1)
            acc.update(m + 1, U, V, Un, Vn, None, terms=terms)
            U, V = Un, Vn
            store(m + 1, U, V)
    return {
        "d1_0": acc.d1_0,
        "d1_T": acc.d1,
        "sup_d1": acc.sup_d1,
        "drift_T": acc.drift,
        "bracket_T": acc.bracket,
        "mart_T": acc.mart,
        "b_l1_T": acc.b_l1,
        "min_residual": acc.min_residual,
        "n_below": acc.n_below,
        "n_d1_increase": acc.n_d1_increase,
        "n_d1_violation": acc.n_d1_violation,
        "max_d1_increase": acc.max_d1_increase,
        "u_T": U,
        "v_T": V,
        "series": rec,
    }


def run_coupled_ensemble(
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    u0,
    v0,
    master_seed: int,
    replicas: Sequence[int],
    record_steps=None,
    record_keys: Sequence[str] = ("d1", "drift", "bracket", "mart", "residual"),
    residual_tol: float = 0.0,
    workers: int = 1,
    chunk: int = CHUNK,
) -> CoupledSummary:
    """Coupled pairs (u, v) on shared noise for every replica.

    ``u0`` and ``v0`` are (N,) or (G, N); each group reuses the same replica
    noise, which is what makes level-to-level comparisons sharp.
    """
    scheme.validate(grid)
    u0g, v0g = _as_groups(u0, grid.N), _as_groups(v0, grid.N)
    if u0g.shape != v0g.shape:
        raise ValueError("u0 and v0 must have matching group counts")
    bad = set(record_keys) - set(_SERIES_KEYS)
    if bad:
        raise ValueError(f"unknown series {sorted(bad)}")
    steps = None if record_steps is None else np.asarray(record_steps, dtype=np.int64)
    jobs = [
        _CoupledJob(pair, grid, scheme, u0g, v0g, master_seed, c, steps, tuple(record_keys), residual_tol)
        for c in _chunks(replicas, chunk)
    ]
    parts = _map(_coupled_chunk, jobs, workers)
    cat = lambda k: np.concatenate([p[k] for p in parts], axis=1)
    series = {}
    if steps is not None:
        series = {k: np.concatenate([p["series"][k] for p in parts], axis=1) for k in record_keys}
    names = ("d1_0", "d1_T", "sup_d1", "drift_T", "bracket_T", "mart_T", "b_l1_T", "min_residual", "n_below", "n_d1_increase", "n_d1_violation", "max_d1_increase", "u_T", "v_T")
    return CoupledSummary(
        np.asarray(replicas, dtype=np.int64),
        *(cat(k) for k in names),
        steps=grid.M,
        record_steps=steps,
        series=series,
        b_nonincreasing=pair.b_nonincreasing,
        master_seed=master_seed,
    )


# -- single-path ensembles -----------------------------------------------------


@dataclass
class PathSummary:
    """Terminal states (G, R, N), recorded fields (G, R, S, N) and norm series."""

    replicas: np.ndarray
    terminal: np.ndarray
    record_steps: Optional[np.ndarray]
    fields: Optional[np.ndarray]
    l1: Optional[np.ndarray]
    l2: Optional[np.ndarray]
    sigma_l2_sq_integral: Optional[np.ndarray]
    sup_l1: np.ndarray


@dataclass(frozen=True)
class _PathJob:
    pair: CoefficientPair
    grid: GridSpec
    scheme: SchemeConfig
    u0: np.ndarray
    modes: tuple
    master: int
    replicas: np.ndarray
    record_steps: Optional[np.ndarray]
    norms: bool


def _path_chunk(job: _PathJob) -> dict:
    pair, grid = job.pair, job.grid
    dx, dt = grid.dx, grid.dt
    G, R = job.u0.shape[0], job.replicas.size
    U = np.broadcast_to(job.u0[:, None, :], (G, R, grid.N)).copy()
    projectors = [None if n is None else galerkin_projector(grid.N, n) for n in job.modes]
    rs = job.record_steps
    fields = np.zeros((G, R, rs.size, grid.N)) if rs is not None else None
    slot = 0
    if job.norms:
        l1 = np.zeros((G, R, grid.M + 1))
        l2 = np.zeros((G, R, grid.M + 1))
        sig = np.zeros((G, R, grid.M + 1))
    sup_l1 = dx * np.sum(np.abs(U), axis=-1)

    def note(m, u):
        nonlocal slot
        if job.norms:
            l1[..., m] = dx * np.sum(np.abs(u), axis=-1)
            l2[..., m] = np.sqrt(dx * np.sum(u * u, axis=-1))
        if rs is not None and slot < rs.size and rs[slot] == m:
            fields[:, :, slot] = u
            slot += 1

    note(0, U)
    step = Stepper(pair, grid, job.scheme)
    noise = EnsembleNoise.from_seeds(grid, job.master, job.replicas)
    for j in range(math.ceil(grid.M / BLOCK)):
        dW = noise.block(j)
        # forcing per group: (G, R, B, N); Galerkin products per replica block
        xi = np.stack([dW / dx if P is None else dW @ P for P in projectors])
        for k in range(dW.shape[1]):
            m = j * BLOCK + k
            su = np.broadcast_to(pair.sigma(U), U.shape)
            new = step(U, xi[:, :, k, :], None, su)
            if not np.all(np.isfinite(new)):
                raise PathBlowupError(m + 1)
            if job.norms:
                sig[..., m + 1] = sig[..., m] + dt * dx * np.sum(su * su, axis=-1)
            U = new
            sup_l1 = np.maximum(sup_l1, dx * np.sum(np.abs(U), axis=-1))
            note(m + 1, U)
    out = {"terminal": U, "fields": fields, "sup_l1": sup_l1}
    if job.norms:
        out.update(l1=l1, l2=l2, sigma_l2_sq_integral=sig)
    return out


def run_path_ensemble(
    pair: CoefficientPair,
    grid: GridSpec,
    scheme: SchemeConfig,
    u0,
    master_seed: int,
    replicas: Sequence[int],
    modes: Optional[Sequence[Optional[int]]] = None,
    record_steps=None,
    norms: bool = False,
    workers: int = 1,
    chunk: int = CHUNK,
) -> PathSummary:
    """Independent single paths for every replica.

    Group ``g`` starts from ``u0[g]`` and is driven by the full noise when
    ``modes[g]`` is None, or by its first ``modes[g]`` cosine modes otherwise.
    All groups of one replica share that replica's noise.
    """
    scheme.validate(grid)
    u0g = _as_groups(u0, grid.N)
    modes = tuple([None] * u0g.shape[0] if modes is None else modes)
    if len(modes) != u0g.shape[0]:
        if u0g.shape[0] == 1:
            u0g = np.repeat(u0g, len(modes), axis=0)
        else:
            raise ValueError("one mode entry per initial-data group is required")
    steps = None if record_steps is None else np.asarray(record_steps, dtype=np.int64)
    jobs = [
        _PathJob(pair, grid, scheme, u0g, modes, master_seed, c, steps, norms)
        for c in _chunks(replicas, chunk)
    ]
    parts = _map(_path_chunk, jobs, workers)
    cat = lambda k: None if parts[0].get(k) is None else np.concatenate([p[k] for p in parts], axis=1)
    return PathSummary(
        np.asarray(replicas, dtype=np.int64),
        cat("terminal"),
        steps,
        cat("fields"),
        cat("l1"),
        cat("l2"),
        cat("sigma_l2_sq_integral"),
        cat("sup_l1"),
    )
