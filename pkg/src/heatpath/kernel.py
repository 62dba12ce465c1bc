"""Neumann heat kernel on [0, 1].

The kernel is evaluated from its cosine eigenexpansion

    G_t(x, y) = 1 + 2 sum_{k>=1} exp(-k^2 pi^2 t) cos(k pi x) cos(k pi y),

truncated at ``KernelSpec.modes``. Below ``small_time`` the series converges
too slowly and the reflected-Gaussian (image) sum is used instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.fft import dct, idct

PI2 = np.pi**2


@dataclass(frozen=True)
class KernelSpec:
    modes: int = 256
    quadrature_points: int = 1024
    small_time: float = 1e-4

    def __post_init__(self):
        if self.modes < 1 or self.quadrature_points < 2:
            raise ValueError("modes and quadrature_points must be positive")

    def tail_bound(self, t):
        """Upper bound on the mass discarded by truncating the series at time t."""
        t = np.asarray(t, dtype=float)
        K = self.modes
        with np.errstate(divide="ignore", over="ignore"):
            out = 2.0 * np.exp(-K * K * PI2 * t) / -np.expm1(-(2 * K + 1) * PI2 * t)
        return float(out) if out.ndim == 0 else out


def _image_sum(t, x, y, n_images: int = 2):
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    out = np.zeros(x.shape)
    norm = 1.0 / np.sqrt(4 * np.pi * t)
    for n in range(-n_images, n_images + 1):
        out += np.exp(-((x - y + 2 * n) ** 2) / (4 * t)) + np.exp(-((x + y + 2 * n) ** 2) / (4 * t))
    return norm * out


def _series(spec: KernelSpec, t, x, y, chunk: int = 8192):
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    shape = x.shape
    xf, yf = x.ravel(), y.ravel()
    k = np.arange(1, spec.modes + 1)
    weights = 2.0 * np.exp(-k * k * PI2 * t)
    out = np.empty(xf.size)
    for s in range(0, xf.size, chunk):
        cx = np.cos(np.pi * np.outer(xf[s : s + chunk], k))
        cy = np.cos(np.pi * np.outer(yf[s : s + chunk], k))
        out[s : s + chunk] = 1.0 + (cx * cy) @ weights
    return out.reshape(shape)


def green_eval(spec: KernelSpec, t: float, x, y):
    """Kernel value at time ``t > 0``; broadcasts over ``x`` and ``y``."""
    if not t > 0:
        raise ValueError(f"kernel needs t > 0, got {t}")
    if t < spec.small_time:
        out = _image_sum(t, x, y)
    else:
        out = np.maximum(_series(spec, t, x, y), 0.0)
    return float(out) if out.ndim == 0 else out


def green_rows(spec: KernelSpec, taus, x: float, ys) -> np.ndarray:
    """Matrix ``G_{taus[m]}(x, ys[i])`` of shape (len(taus), len(ys))."""
    taus = np.asarray(taus, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(taus <= 0):
        raise ValueError("kernel needs positive times")
    out = np.empty((taus.size, ys.size))
    small = taus < spec.small_time
    if np.any(~small):
        k = np.arange(1, spec.modes + 1)
        w = 2.0 * np.exp(-np.outer(taus[~small], k * k) * PI2) * np.cos(k * np.pi * x)
        out[~small] = np.maximum(1.0 + w @ np.cos(np.pi * np.outer(k, ys)), 0.0)
    for m in np.flatnonzero(small):
        out[m] = _image_sum(taus[m], x, ys)
    return out


def mass(spec: KernelSpec, t: float, x) -> np.ndarray:
    """Composite Gauss-Legendre approximation of the integral of G_t(x, .) over [0, 1]."""
    nodes, weights = _composite_gl(spec.quadrature_points)
    x = np.atleast_1d(np.asarray(x, float))
    vals = green_eval(spec, t, x[:, None], nodes[None, :])
    return vals @ weights


def _composite_gl(n_points: int, order: int = 16):
    panels = max(1, n_points // order)
    g, w = leggauss(order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    h = np.diff(edges)
    nodes = (edges[:-1, None] + 0.5 * h[:, None] * (g[None, :] + 1)).ravel()
    weights = (0.5 * h[:, None] * w[None, :]).ravel()
    return nodes, weights


def chapman_kolmogorov_gap(spec: KernelSpec, s: float, t: float, x, y) -> np.ndarray:
    """``int G_s(x,z) G_t(z,y) dz - G_{s+t}(x,y)`` by quadrature in z."""
    nodes, weights = _composite_gl(spec.quadrature_points)
    x = np.atleast_1d(np.asarray(x, float))
    y = np.atleast_1d(np.asarray(y, float))
    left = green_eval(spec, s, x[:, None], nodes[None, :])
    right = green_eval(spec, t, nodes[:, None], y[None, :])
    direct = green_eval(spec, s + t, x[:, None], y[None, :])
    return (left * weights) @ right - direct


def bound_ratio(t, x, y, n_images: int | None = None):
    """``G_t(x,y) sqrt(t) exp(|x-y|^2/4t)`` from the image sum.

    The exponential weights are combined before exponentiation so that the
    ratio stays accurate when G itself underflows.
    """
    t = np.asarray(t, float)
    x, y = np.asarray(x, float), np.asarray(y, float)
    if n_images is None:
        n_images = int(np.ceil(4 * np.sqrt(np.max(t)))) + 2
    d2 = (x - y) ** 2
    acc = 0.0
    for n in range(-n_images, n_images + 1):
        acc = acc + np.exp((d2 - (x - y + 2 * n) ** 2) / (4 * t))
        acc = acc + np.exp((d2 - (x + y + 2 * n) ** 2) / (4 * t))
    return acc / np.sqrt(4 * np.pi)


@dataclass
class GaussianBoundReport:
    fitted_C_T: float
    nonnegativity_min: float
    T: float
    n_grid: int


def check_gaussian_bound(spec: KernelSpec, T: float, n_grid: int = 64) -> GaussianBoundReport:
    """Fit the constant of ``0 <= G_t <= C_T exp(-|x-y|^2/4t)/sqrt(t)`` on a grid.

    Times are ``T*j/n_grid`` for ``j = 1..n_grid``; space is an ``n_grid`` point
    uniform grid on [0, 1] in both variables.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    ts = T * np.arange(1, n_grid + 1) / n_grid
    xs = np.linspace(0.0, 1.0, n_grid)
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    fitted, lowest = 0.0, np.inf
    for t in ts:
        lowest = min(lowest, float(np.min(green_eval(spec, t, X, Y))))
        fitted = max(fitted, float(np.max(bound_ratio(t, X, Y))))
    return GaussianBoundReport(fitted, lowest, T, n_grid)


def semigroup_apply(spec: KernelSpec, f, t: float):
    """Apply the heat semigroup to a field sampled at cell midpoints.

    The cell-midpoint samples are expanded in the discrete cosine basis
    (orthonormal DCT-II), each mode is damped by ``exp(-k^2 pi^2 t)`` and the
    field is transformed back. Accepts a ``Field`` or an array whose last axis
    is space.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    values = getattr(f, "values", f)
    values = np.asarray(values, dtype=float)
    n = values.shape[-1]
    k = np.arange(n)
    coeffs = dct(values, type=2, norm="ortho", axis=-1) * np.exp(-k * k * PI2 * t)
    out = idct(coeffs, type=2, norm="ortho", axis=-1)
    if hasattr(f, "grid"):
        return type(f)(out, f.grid)
    return out


def stochastic_convolution(
    spec: KernelSpec, noise, integrand, t: float, x: float, drift=None
) -> float:
    """Discrete kernel convolution against the noise cells.

    Sums ``G_{t-s_m}(x, y_i) * integrand[m, i] * dW[m, i]`` over the cells with
    ``s_m < t``; with ``drift`` given, adds ``G_{t-s_m}(x, y_i) drift[m, i] dt dx``.
    ``integrand`` (and ``drift``) hold one row per time step up to ``t``.
    """
    grid = noise.grid
    m_t = t / grid.dt
    idx = int(round(m_t))
    if abs(m_t - idx) > 1e-9 * max(1.0, m_t) or idx < 0 or idx > grid.M:
        raise ValueError(f"t={t} is not on the time grid")
    if idx == 0:
        return 0.0
    integrand = _rows(integrand, idx, grid.N)
    G = convolution_rows(spec, grid, idx, float(x))
    dW = noise.increments(0, idx)
    total = float(np.sum(G * integrand * dW))
    if drift is not None:
        total += float(np.sum(G * _rows(drift, idx, grid.N))) * grid.dt * grid.dx
    return total


@lru_cache(maxsize=16)
def convolution_rows(spec: KernelSpec, grid, idx: int, x: float) -> np.ndarray:
    """Kernel weights ``G_{t - s_m}(x, y_i)`` for ``t = idx * dt`` and ``m < idx``.

    Cached because residual checks reuse one (grid, t, x) across many seeds.
    """
    taus = grid.dt * (idx - np.arange(idx))
    out = green_rows(spec, taus, x, grid.x)
    out.setflags(write=False)
    return out


def _rows(a, n_rows: int, n_cells: int) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim < 2:
        return np.broadcast_to(a, (n_rows, n_cells))
    return a[:n_rows]
