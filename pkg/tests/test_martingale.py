import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from heatpath.martingale import (
    c1_closed_form,
    c2_closed_form,
    hitting_prob,
    lemma_check,
    lemma_constants,
    simulate_stopped_bm,
)


@pytest.mark.parametrize("seed", range(5))
def test_stopped_path_shape(seed):
    p = simulate_stopped_bm(1.5, 1e-2, 50.0, seed)
    assert p.values[0] == 1.5
    assert p.values.min() >= 0
    if not p.censored:
        assert np.all(p.values[p.stop_index :] == 0)
        assert p.tau <= p.stop_index * p.dt
    # pathwise: sup M = m + S, bracket = elapsed time
    assert p.sup == pytest.approx(p.m + p.S)
    assert p.bracket == p.tau
    assert p.sup >= p.values.max()
    assert np.all(np.diff(p.running_max) >= 0)


def test_stopped_path_validation():
    with pytest.raises(ValueError):
        simulate_stopped_bm(0.0, 1e-2, 1.0, 0)


def test_censoring_fraction_matches_tail():
    rep = lemma_check(1 / 3, 1.0, 2000, 4, T_cap=1000.0)
    p = math.erf(1 / math.sqrt(2 * 1000))
    assert abs(rep.censored_fraction - p) <= 4 * math.sqrt(p * (1 - p) / 2000)


@pytest.mark.parametrize("x, exact", [(1.0, 0.5), (3.0, 0.25)])
def test_hitting_probability(x, exact):
    rep = hitting_prob(1.0, x, 20_000, 0, dt=1e-2)
    assert rep.exact == exact
    assert rep.lower <= exact <= rep.upper
    assert rep.estimate == pytest.approx(exact, abs=0.02)


def test_hitting_probability_at_zero():
    rep = hitting_prob(1.0, 0.0, 100, 0)
    assert rep.estimate == 1.0 and rep.covers_exact


def test_hitting_intervals_cover_twenty_pairs():
    # pre-committed seed; at 99% each, about one miss in five such batches is expected
    rng = np.random.default_rng(0)
    pairs = np.column_stack([rng.uniform(0.5, 1.5, 20), rng.uniform(0.2, 1.5, 20)])
    reps = [hitting_prob(m, x, 2000, 100 + i, dt=1e-2) for i, (m, x) in enumerate(pairs)]
    assert all(r.covers_exact for r in reps)


def test_lemma_constants_at_half():
    c1, c2 = lemma_constants(0.5)
    assert c1 == pytest.approx(math.pi / 2, abs=1e-8)
    assert c2 == pytest.approx(1.7201, abs=1e-4)


def test_c1_tends_to_one():
    vals = [lemma_constants(g)[0] for g in (0.2, 0.1, 0.05, 0.01)]
    assert np.all(np.diff(vals) < 0)
    assert vals[-1] == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.02, 0.98))
def test_constants_match_closed_forms(gamma):
    c1, c2 = lemma_constants(gamma)
    assert c1 == pytest.approx(c1_closed_form(gamma), abs=1e-6)
    assert c2 == pytest.approx(c2_closed_form(gamma), abs=1e-6)


def test_closed_forms():
    assert c1_closed_form(1 / 3) == pytest.approx((math.pi / 3) / math.sin(math.pi / 3))
    g = 0.25
    assert c2_closed_form(g) == pytest.approx(2 ** (-g / 2) * special.gamma((1 - g) / 2) / math.sqrt(math.pi))


@pytest.mark.parametrize("gamma", [0.0, 1.0, -0.5, 2.0])
def test_gamma_range(gamma):
    with pytest.raises(ValueError):
        lemma_constants(gamma)
    with pytest.raises(ValueError):
        lemma_check(gamma, 1.0, 10, 0)


def test_lemma_check_moments():
    rep = lemma_check(1 / 3, 1.0, 20_000, 1)
    c1, c2 = lemma_constants(1 / 3)
    assert rep.analytic_S == pytest.approx(c1) and rep.analytic_tau == pytest.approx(c2)
    assert rep.E_S_gamma == pytest.approx(c1, rel=0.1)
    assert rep.E_tau_gamma2 == pytest.approx(c2, rel=0.1)
    assert rep.bound == pytest.approx(1 + c1 + c2)
    assert rep.within_bound and rep.estimator == "mean"
    rec = rep.to_record()
    assert rec["within_bound"] is True and rec["total"] == pytest.approx(rep.total)


def test_lemma_check_m_scaling():
    g = 1 / 3
    one = lemma_check(g, 1.0, 4000, 2)
    two = lemma_check(g, 2.0, 4000, 2)
    for a, b, se in (
        (one.E_S_gamma, two.E_S_gamma, two.E_S_gamma_se),
        (one.E_sup_M_gamma, two.E_sup_M_gamma, two.E_sup_M_gamma_se),
        (one.E_tau_gamma2, two.E_tau_gamma2, two.E_tau_gamma2_se),
    ):
        assert abs(b - 2**g * a) <= 3 * se


def test_heavy_tail_warning():
    with pytest.warns(RuntimeWarning, match="median-of-means"):
        rep = lemma_check(0.6, 1.0, 400, 0, T_cap=20.0)
    assert rep.estimator == "median-of-means"
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        lemma_check(0.4, 1.0, 100, 0, T_cap=5.0)
