import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cpsls import sls, theory as TH


def mc_tv(p, q, n, seed=0, chunk=1_000_000):
    """Monte-Carlo TV: E_p[max(0, 1 - q(X)/p(X))] with its standard error."""
    rng = np.random.default_rng(seed)
    s1 = s2 = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        x = rng.gamma(p.shape, p.scale, m)
        r = np.maximum(0.0, 1.0 - stats.gamma.pdf(x, q.shape, scale=q.scale) / stats.gamma.pdf(x, p.shape, scale=p.scale))
        s1 += r.sum()
        s2 += (r * r).sum()
        done += m
    mean = s1 / n
    return mean, math.sqrt((s2 / n - mean ** 2) / n)


# ---------------------------------------------------------------- gamma / TV

def test_gamma_spec_validation_and_clip():
    with pytest.raises(ValueError):
        TH.GammaSpec(0.0, 1.0)
    with pytest.raises(ValueError):
        TH.GammaSpec(1.0, -1.0)
    assert TH.GammaSpec(0.01, 1.0).shape == TH.SHAPE_FLOOR


def test_gamma_pdf_matches_scipy():
    g = TH.GammaSpec(4.5, 2.0)
    x = np.linspace(0.01, 40, 50)
    np.testing.assert_allclose(g.pdf(x), stats.gamma.pdf(x, 4.5, scale=2.0), rtol=1e-12)
    assert g.ppf(0.3) == pytest.approx(stats.gamma.ppf(0.3, 4.5, scale=2.0), rel=1e-10)


def test_tv_identical_is_zero():
    g = TH.GammaSpec(5.0, 2.0)
    assert TH.tv_numeric(g, TH.GammaSpec(5.0, 2.0)) == 0.0


def test_tv_disjoint_is_one():
    assert TH.tv_numeric(TH.GammaSpec(5.0, 2.0), TH.GammaSpec(5.0, 2.0, loc=200.0)) == pytest.approx(1.0, abs=1e-6)


def test_tv_matches_monte_carlo():
    p, q = TH.GammaSpec(5.0, 2.0), TH.GammaSpec(4.5, 2.0)
    est, se = mc_tv(p, q, 10_000_000)
    assert abs(TH.tv_numeric(p, q) - est) <= 3 * se


@settings(max_examples=20, deadline=None)
@given(st.lists(st.tuples(st.floats(0.5, 8.0), st.floats(0.5, 4.0)), min_size=3, max_size=3))
def test_tv_symmetric_and_triangle(params):
    a, b, c = (TH.GammaSpec(s, t) for s, t in params)
    ab, ba = TH.tv_numeric(a, b), TH.tv_numeric(b, a)
    assert ab == pytest.approx(ba, abs=1e-5)
    assert ab <= TH.tv_numeric(a, c) + TH.tv_numeric(c, b) + 1e-5
    assert 0.0 <= ab <= 1.0


def test_mixture_scales_tv():
    base = TH.GammaSpec(3.0, 1.0)
    p, q = TH.GammaSpec(5.0, 2.0), TH.GammaSpec(4.0, 2.0)
    full = TH.tv_numeric(p, q)
    half = TH.tv_numeric(TH.Mixture(0.5, p, base), TH.Mixture(0.5, q, base))
    assert half == pytest.approx(0.5 * full, abs=2e-6)


# ---------------------------------------------------------------- Lipschitz

def test_lipschitz_constant_field():
    est = TH.lipschitz_estimate(lambda p: TH.GammaSpec(5.0, 2.0), 20)
    assert est.epsilon == 0.0 and est.n_pairs == 20


def test_lipschitz_disk_field_positive_and_reproducible():
    a = TH.lipschitz_estimate(TH.disk_gamma_field, 30, seed=4)
    b = TH.lipschitz_estimate(TH.disk_gamma_field, 30, seed=4)
    assert a.epsilon > 0 and a.epsilon == b.epsilon


def test_lipschitz_mixture_doubling():
    base = TH.GammaSpec(3.0, 1.0)
    full = TH.lipschitz_estimate(lambda p: TH.Mixture(1.0, TH.disk_gamma_field(p), base), 30, seed=1)
    half = TH.lipschitz_estimate(lambda p: TH.Mixture(0.5, TH.disk_gamma_field(p), base), 30, seed=1)
    assert full.epsilon == pytest.approx(2 * half.epsilon, rel=1e-3)


def test_lipschitz_needs_two_samples():
    with pytest.raises(ValueError):
        TH.lipschitz_estimate(TH.disk_gamma_field, 1)


# ---------------------------------------------------------------- gap bounds

def test_gap_exact_zero_when_tv_zero():
    rep = TH.gap_bounds([0.1, 0.5, 0.9], 0.5, 0.3, exact_tv=[0, 0, 0])
    assert rep.exact == 0.0


def test_gap_single_point():
    d, rho, eps = 0.7, 0.3, 0.2
    rep = TH.gap_bounds([d], rho, eps)
    w = rho ** d
    assert rep.tight == pytest.approx(w / (1 + w) * 2 * eps * d)
    assert rep.interpretable is None and rep.asymptotic is None


def test_gap_interpretable_hand():
    d = np.array([0.5, 1.0, 2.0])  # d_min = 0.5, d_max = 1.0
    rho, eps = 0.5, 0.1
    g = 1 - rho ** 0.5
    rep = TH.gap_bounds(d, rho, eps)
    assert rep.interpretable == pytest.approx(2 * eps * (0.5 / g + 1.0 * rho ** 0.5 / g ** 2))
    assert rep.asymptotic == pytest.approx(rep.interpretable * (1 - rho ** 1.0))


def test_gap_validation():
    with pytest.raises(ValueError):
        TH.gap_bounds([0.5, 0.1], 0.5, 0.1)
    with pytest.raises(ValueError):
        TH.gap_bounds([0.1], 1.0, 0.1)
    with pytest.raises(ValueError):
        TH.gap_bounds([0.1], 0.5, -0.1)
    assert TH.gap_bounds([0.2, 0.2], 0.5, 0.1).interpretable == math.inf


def random_gap_config(rng):
    n = int(rng.integers(2, 60))
    d = np.sort(rng.uniform(0.0, rng.uniform(0.5, 5.0), n))
    rho = float(rng.uniform(0.01, 0.999))
    eps = float(rng.uniform(0.0, 1.0))
    tv = np.minimum(eps * d * rng.uniform(size=n), 1.0)
    return d, rho, eps, tv


def test_gap_dominance_random():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        d, rho, eps, tv = random_gap_config(rng)
        rep = TH.gap_bounds(d, rho, eps, tv)
        assert rep.exact <= rep.tight + 1e-10
        assert rep.tight <= rep.interpretable + 1e-10
        assert rep.asymptotic <= rep.interpretable + 1e-10


def test_gap_dominance_disk_field():
    rng = np.random.default_rng(1)
    test = TH.disk_gamma_field(np.zeros(2))
    eps0 = TH.lipschitz_estimate(TH.disk_gamma_field, 50, seed=0).epsilon
    for _ in range(20):
        pts = TH.sample_unit_disk(rng, int(rng.integers(2, 16)))
        d = np.linalg.norm(pts, axis=1)
        order = np.argsort(d)
        d = d[order]
        tv = np.array([TH.tv_numeric(TH.disk_gamma_field(p), test) for p in pts[order]])
        # the field has a cusp at the origin, so a sampled epsilon can undershoot; use one valid here
        eps = max(eps0, float(np.max(tv / d)))
        rep = TH.gap_bounds(d, float(rng.uniform(0.05, 0.99)), eps, tv)
        assert rep.exact <= rep.tight + 1e-10 <= rep.interpretable + 2e-10


# ---------------------------------------------------------------- tube gap / totals

def tube(state, control):
    state = np.asarray(state, float)
    control = np.asarray(control, float)
    return sls.Tube(np.zeros_like(state), np.zeros_like(control), state, control)


def test_tube_gap_examples():
    assert TH.tube_gap(0.3, tube(np.zeros((3, 2)), np.zeros((2, 1)))) == 0.0
    assert TH.tube_gap(0.0, tube(np.ones((3, 2)), np.ones((2, 1)))) == 0.0
    # max axis length 0.5 (extent 0.25)
    assert TH.tube_gap(0.1, tube(np.full((3, 2), 0.25), np.zeros((2, 1)))) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        TH.tube_gap(-1.0, tube(np.zeros((1, 1)), np.zeros((0, 1))))


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 5), st.floats(0.0, 3.0))
def test_tube_gap_monotone(seed, idx, bump):
    rng = np.random.default_rng(seed)
    s, c = rng.uniform(0, 1, (3, 2)), rng.uniform(0, 1, (2, 1))
    base = TH.tube_gap(0.2, tube(s, c))
    s2 = s.copy()
    s2.flat[idx] += bump
    assert TH.tube_gap(0.2, tube(s2, c)) >= base


def test_total_miscoverage_examples():
    assert TH.total_miscoverage([0.1 / 15] * 15, [0.0] * 15, [0.0] * 15) == pytest.approx(0.1)
    assert TH.total_miscoverage([0.0] * 4, [0.0] * 4, [0.0] * 4) == 0.0
    assert TH.total_miscoverage([0.0] * 3, [0.01] * 3, [0.0] * 3) == pytest.approx(0.03)
    with pytest.raises(ValueError):
        TH.total_miscoverage([0.1], [0.0, 0.0], [0.0])
    assert TH.replanning_miscoverage([0.01, 0.02], [0, 0], [0.001, 0]) == pytest.approx(0.031)


@given(st.lists(st.tuples(*[st.floats(0, 1)] * 3), max_size=10),
       st.lists(st.tuples(*[st.floats(0, 1)] * 3), max_size=10))
def test_total_miscoverage_additive(a, b):
    f = lambda rows: TH.total_miscoverage(*(list(col) for col in zip(*rows))) if rows else 0.0
    assert f(a + b) == pytest.approx(f(a) + f(b), abs=1e-12)


# ---------------------------------------------------------------- toy study

def test_toy_experiment_small(tmp_path):
    path = tmp_path / "toy.csv"
    cells = TH.toy_experiment([16], [0.9, 0.1], trials=10, seed=3, epsilon=0.1, csv_path=path)
    assert [(c.rho, c.n) for c in cells] == [(0.9, 16), (0.1, 16)]
    for c in cells:
        assert 0.0 <= c.coverage <= 1.0
        assert c.barber_bound <= 0.9 and c.cpsls_bound <= 0.9
    rows = list(csv.DictReader(open(path)))
    assert len(rows) == 2 and set(rows[0]) == {"rho", "n", "coverage", "barber_bound", "cpsls_bound", "trials"}
    again = TH.toy_experiment([16], [0.9, 0.1], trials=10, seed=3, epsilon=0.1)
    assert [c.coverage for c in again] == [c.coverage for c in cells]


def test_toy_cell_sigma():
    assert TH.ToyCell(0.5, 32, 0.9, 0.8, 0.8, 100).sigma() == pytest.approx(0.03)


def test_weight_mass_sums_to_one():
    edges, rows = TH.weight_mass_table(32, [0.9, 0.1], bins=5, trials=10)
    assert edges.size == 6
    for _, mass in rows:
        assert mass.sum() == pytest.approx(1.0)
