import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heatpath import diagnostics as dg
from heatpath.coeffs import CATALOG, ZERO, CoefficientPair, linear
from heatpath.ensemble import run_coupled_ensemble
from heatpath.kernel import KernelSpec, semigroup_apply
from heatpath.noise import GridSpec, derive_seed, generate_noise
from heatpath.solver import Field, SchemeConfig, simulate_coupled, simulate_path

HEAT = CoefficientPair(ZERO, ZERO, True)
DECAY = CoefficientPair(linear(-1.0), ZERO, True)
EXPLICIT = SchemeConfig()


def _coupled(pair, grid, u0, v0, seed=0):
    noise = generate_noise(grid, derive_seed(seed, 0))
    u, v = simulate_coupled(Field(u0, grid), Field(v0, grid), pair, grid, EXPLICIT, noise)
    return dg.coupled_series(u, v, pair, noise), u, v, noise


# -- norms ------------------------------------------------------------------------


@given(st.floats(-10, 10).filter(lambda c: c == 0 or abs(c) > 1e-100))
def test_lp_norm_of_constant(c):
    g = GridSpec(16, 0.01, 0.1)
    for p in (1, 2):
        assert dg.lp_norm(Field(np.full(16, c), g), p) == pytest.approx(abs(c), rel=1e-14, abs=1e-300)


def test_lp_norm_examples():
    g = GridSpec(256, 0.01, 0.1)
    assert dg.lp_norm(Field((g.x < 0.5).astype(float), g), 1) == 0.5
    assert dg.lp_norm(Field(np.cos(np.pi * g.x), g), 2) == pytest.approx(1 / math.sqrt(2), abs=1e-6)
    assert dg.lp_norm(np.ones(4), 1) == 1.0


# -- coupled series -----------------------------------------------------------------


def test_identical_paths_give_zero_series():
    g = GridSpec.from_cfl(16, 0.1, 0.25)
    d, *_ = _coupled(CATALOG["half-sine"], g, np.cos(np.pi * g.x), np.cos(np.pi * g.x))
    for s in (d.d1, d.drift, d.bracket, d.mart, d.b_l1, dg.inequality_residual(d)):
        assert np.all(s == 0)


def test_linear_drift_increment():
    g = GridSpec.from_cfl(16, 0.1, 0.25)
    d, *_ = _coupled(CoefficientPair(linear(-1.0), linear(0.0, 0.5), True), g, np.cos(np.pi * g.x), np.zeros(16))
    np.testing.assert_allclose(np.diff(d.drift), -g.dt * d.d1[:-1], rtol=1e-12, atol=1e-16)


def test_bracket_matches_cellwise_recomputation():
    g = GridSpec.from_cfl(16, 0.2, 0.25)
    pair = CATALOG["half-sine"]
    d, u, v, _ = _coupled(pair, g, np.cos(np.pi * g.x), np.zeros(16))
    U, V = u.full_history()[:-1], v.full_history()[:-1]
    total = 0.0
    for m in range(g.M):
        for i in range(g.N):
            total += g.dt * g.dx * (pair.sigma(U[m, i]) - pair.sigma(V[m, i])) ** 2
    assert d.bracket[-1] == pytest.approx(total, abs=1e-12)


def test_series_monotonicity_invariants():
    g = GridSpec.from_cfl(16, 0.3, 0.25)
    for seed in range(5):
        d, *_ = _coupled(CATALOG["sine-drift"], g, np.cos(np.pi * g.x), -np.ones(16), seed)
        assert np.all(np.diff(d.drift) <= 0)
        assert np.all(np.diff(d.bracket) >= 0)
        # non-increasing drift: the drift series is minus the integrated b-gap
        np.testing.assert_array_equal(d.drift, -d.b_l1)


def test_streaming_accumulator_matches_post_hoc_series():
    g = GridSpec.from_cfl(16, 0.2, 0.25)
    pair = CATALOG["half-sine"]
    u0, v0 = np.cos(np.pi * g.x), np.zeros(16)
    d, *_ = _coupled(pair, g, u0, v0, seed=3)
    keys = ("d1", "drift", "bracket", "mart", "b_l1", "residual")
    res = run_coupled_ensemble(pair, g, EXPLICIT, u0, v0, 3, [0], record_steps=np.arange(g.M + 1), record_keys=keys)
    # the post-hoc run above used replica 0 of master seed 3
    for key in ("d1", "drift", "bracket", "mart", "b_l1"):
        np.testing.assert_array_equal(res.series[key][0, 0], getattr(d, key))
    np.testing.assert_array_equal(res.series["residual"][0, 0], dg.inequality_residual(d))


def test_mismatched_grids_rejected():
    g1, g2 = GridSpec.from_cfl(8, 0.1, 0.25), GridSpec.from_cfl(16, 0.1, 0.25)
    n1 = generate_noise(g1, derive_seed(0, 0))
    u = simulate_path(Field(np.zeros(8), g1), HEAT, g1, EXPLICIT, n1)
    v = simulate_path(Field(np.zeros(16), g2), HEAT, g2, EXPLICIT, generate_noise(g2, derive_seed(0, 0)))
    with pytest.raises(ValueError):
        dg.coupled_series(u, v, HEAT, n1)


@pytest.mark.parametrize("seed", range(4))
def test_residual_nonnegative_without_noise(seed):
    g = GridSpec.from_cfl(32, 0.5, 0.5)
    rng = np.random.default_rng(seed)
    pair = CoefficientPair(CATALOG["sine-drift"].b, ZERO, True)
    d, *_ = _coupled(pair, g, rng.normal(size=32), rng.normal(size=32), seed)
    # exact up to rounding of the running sums
    assert dg.inequality_residual(d).min() >= -1e-13 * d.d1_0


def test_noise_free_contraction_counts_no_violations():
    g = GridSpec.from_cfl(32, 1.0, 0.5)
    res = run_coupled_ensemble(HEAT, g, EXPLICIT, np.cos(np.pi * g.x), np.zeros(32), 0, range(3))
    assert np.all(res.n_d1_violation == 0)
    assert np.all(res.max_d1_increase <= dg.D1_RTOL * res.d1_0)


# -- moments --------------------------------------------------------------------------


def test_moment_bound_trivial_cases():
    g = GridSpec.from_cfl(16, 0.2, 0.25)
    same = [_coupled(CATALOG["half-sine"], g, np.ones(16), np.ones(16), s)[0] for s in range(3)]
    assert dg.moment_bound(same, 0.5).lhs == 0.0
    heat = [_coupled(HEAT, g, np.cos(np.pi * g.x), np.zeros(16), s)[0] for s in range(3)]
    rep = dg.moment_bound(heat, 0.5)
    assert rep.lhs == pytest.approx(math.sqrt(heat[0].d1_0), rel=1e-12)
    assert rep.ratio == pytest.approx(1.0, rel=1e-12)


def test_moment_bound_validation():
    g = GridSpec.from_cfl(8, 0.1, 0.25)
    diags = [_coupled(CATALOG["perturbed-dissipative"], g, np.ones(8), np.zeros(8))[0]]
    for gamma in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            dg.moment_bound(diags, gamma)
    with pytest.raises(ValueError):
        dg.moment_bound(diags, 0.5, "iv")
    with pytest.raises(ValueError):
        dg.moment_bound(diags, 0.5, "v")


def test_median_of_means():
    x = np.arange(40.0)
    mean, se = dg.median_of_means(x, 20)
    blocks = x.reshape(20, 2).mean(axis=1)
    assert mean == np.median(blocks)
    assert se == pytest.approx(math.sqrt(math.pi / 2) * blocks.std(ddof=1) / math.sqrt(20))
    assert dg.median_of_means(np.array([1.0, 3.0]), 20)[0] == 2.0


def test_variant_iii_monotone_in_horizon():
    dt = 1 / 1024
    short, long_ = GridSpec(16, dt, 0.25), GridSpec(16, dt, 0.5)
    pair = CATALOG["half-sine"]
    u0, v0 = np.cos(np.pi * short.x), np.zeros(16)
    a = run_coupled_ensemble(pair, short, EXPLICIT, u0, v0, 2, range(40)).moments()
    b = run_coupled_ensemble(pair, long_, EXPLICIT, u0, v0, 2, range(40)).moments()
    assert np.all(dg.moment_values(b, 0.5) >= dg.moment_values(a, 0.5))
    assert dg.moment_bound(b, 0.5).lhs >= dg.moment_bound(a, 0.5).lhs


def test_bands_overlap():
    R = dg.MomentReport
    a = R(0.5, "iii", 1.0, 1.0, 1.0, 0.1, 0.1, 10)
    b = R(0.5, "iii", 1.5, 1.0, 1.5, 0.1, 0.1, 10)
    assert dg.bands_overlap([a, b], 3) and not dg.bands_overlap([a, b], 2)


# -- confluence and K statistics ----------------------------------------------------------


@given(st.lists(st.floats(0, 10), min_size=1, max_size=50))
def test_confluence_tail_non_increasing(d1):
    tail = dg.confluence_tail(d1)
    assert np.all(np.diff(tail) <= 0) and np.all(tail >= d1)


def test_confluence_tail_linear_decay():
    g = GridSpec.from_cfl(16, 0.5, 0.25)
    d, *_ = _coupled(DECAY, g, 2 + np.cos(np.pi * g.x), np.zeros(16))
    tail = dg.confluence_tail(d.d1)
    np.testing.assert_allclose(tail, (1 - g.dt) ** np.arange(g.M + 1) * tail[0], rtol=1e-12)


def test_k_stat_examples():
    g = GridSpec(16, 0.01, 0.1)
    rng = np.random.default_rng(1)
    u, w = Field(rng.normal(size=16), g), Field(rng.normal(size=16), g)
    assert dg.k_stat(u, u, CATALOG["half-sine"]) == 0.0
    assert dg.k_stat(u, w, DECAY) == pytest.approx((u - w).norm(1), rel=1e-14)
    pair = CATALOG["half-sine"]
    ds = g.dx * np.abs(pair.sigma(u.values) - pair.sigma(w.values)).sum()
    db = g.dx * np.abs(pair.b(u.values) - pair.b(w.values)).sum()
    assert dg.k_stat(u, w, pair) == pytest.approx(db + ds**2)


@settings(max_examples=50)
@given(st.integers(0, 2**32), st.sampled_from(["half-sine", "linear-drift", "bump", "linear-multiplicative"]))
def test_k_stat_injectivity(seed, name):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=32)
    w = u.copy()
    w[rng.integers(32)] += rng.choice([-1, 1]) * rng.uniform(1e-6, 1)
    assert (dg.k_stat(u, w, CATALOG[name]) == 0) == (np.max(np.abs(u - w)) == 0)
    assert dg.k_stat(u, u, CATALOG[name]) == 0


def test_select_subsequence_examples():
    t = np.linspace(0, 8, 801)
    rep = dg.select_subsequence(np.exp(-t), t, 5)
    assert np.all(np.diff(rep.values) < 0) and rep.values[-1] < math.exp(-4)
    assert np.all(np.diff(rep.times) > 0) and rep.integrable
    assert not dg.select_subsequence(np.ones_like(t), t, 5).integrable
    with pytest.raises(ValueError):
        dg.select_subsequence(-np.ones_like(t), t, 3)


def test_selected_k_values_non_increasing_in_median():
    g = GridSpec.from_cfl(16, 4.0, 0.45)
    steps = np.arange(0, g.M + 1, 4)
    res = run_coupled_ensemble(
        CATALOG["half-sine"], g, EXPLICIT, np.ones(16), -np.ones(16), 0, range(50), record_steps=steps, record_keys=("kstat",)
    )
    K = res.series["kstat"][0]
    picked = np.array([dg.select_subsequence(k, g.times[steps], 4).values for k in K])
    assert np.all(np.diff(np.median(picked, axis=0)) <= 0)


# -- weak and mild forms ---------------------------------------------------------------


@pytest.mark.parametrize("tag, k", [("1", 0), ("cos", 1), ("cos3", 3), (2, 2)])
def test_parse_test_function(tag, k):
    assert dg.parse_test_function(tag) == k


@pytest.mark.parametrize("tag", ["sin", "x**2", "cos(x)", -1])
def test_non_neumann_test_functions_rejected(tag):
    with pytest.raises(ValueError):
        dg.parse_test_function(tag)


def _heat_path(N, dt, T, u0fn, pair=HEAT, seed=0):
    g = GridSpec(N, dt, T)
    noise = generate_noise(g, derive_seed(seed, 0))
    return simulate_path(Field(u0fn(g.x), g), pair, g, EXPLICIT, noise), noise


def test_weak_residual_mass_is_conserved():
    path, noise = _heat_path(32, 1 / 8192, 0.1, lambda x: np.where(x < 0.4, 2.0, -1.0))
    assert np.max(np.abs(dg.weak_form_residual(path, noise, HEAT, "1"))) <= 1e-13


def test_weak_residual_cosine_refines():
    coarse, nc = _heat_path(16, 0.25 / 256, 0.2, lambda x: np.cos(np.pi * x) + np.cos(2 * np.pi * x))
    fine, nf = _heat_path(32, 0.25 / 1024, 0.2, lambda x: np.cos(np.pi * x) + np.cos(2 * np.pi * x))
    rc = np.max(np.abs(dg.weak_form_residual(coarse, nc, HEAT, "cos")))
    rf = np.max(np.abs(dg.weak_form_residual(fine, nf, HEAT, "cos")))
    assert rf / rc < 1


def test_mild_residual_basics():
    path, noise = _heat_path(32, 0.25 / 1024, 0.1, lambda x: np.where(x < 0.4, 2.0, -1.0))
    spec = KernelSpec()
    assert dg.mild_residual(path, noise, HEAT, spec, 0.0, 0.5) == 0.0
    t = path.grid.M * path.grid.dt
    c = path.grid.cell_of(0.5)
    fd_err = path.terminal.values[c] - semigroup_apply(spec, path.initial.values, t)[c]
    assert dg.mild_residual(path, noise, HEAT, spec, t, 0.5) == pytest.approx(fd_err, abs=1e-12)
    assert abs(fd_err) <= 10 * (path.grid.dx**2 + path.grid.dt)
    with pytest.raises(ValueError):
        dg.mild_residual(path, noise, HEAT, spec, t / 3 + 1e-7, 0.5)


# -- mollifier -------------------------------------------------------------------------


def test_phi_eps_values():
    eps = 0.3
    assert dg.phi_eps(2 * eps, eps) == pytest.approx(2 * eps)
    assert dg.phi_eps(0.0, eps) == eps / 2
    z = np.linspace(-2, 2, 100_001)
    f = dg.phi_eps(z, eps)
    assert np.all(np.abs(z) <= f) and np.all(f <= np.abs(z) + eps)
    assert np.all(np.abs(dg.phi_eps_prime(z, eps)) <= 1)
    second = dg.phi_eps_second(z, eps)
    assert np.all(second >= 0) and np.all(second <= 2 / eps)
    with pytest.raises(ValueError):
        dg.phi_eps(1.0, 0.0)


@given(st.floats(-3, 3), st.floats(0.01, 1))
def test_phi_eps_derivative_consistency(z, eps):
    h = 1e-6
    if abs(abs(z) - eps) > 1e-4:
        num = (dg.phi_eps(z + h, eps) - dg.phi_eps(z - h, eps)) / (2 * h)
        assert num == pytest.approx(dg.phi_eps_prime(z, eps), abs=1e-5)
