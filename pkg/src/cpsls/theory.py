"""Computable forms of the coverage guarantees.

Covers total-variation numerics between score distributions, the coverage-gap
bounds for rho-weighted calibration, the tube gap, total miscoverage over a
horizon, and a toy study on the unit disk with gamma-distributed scores.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize, special

from cpsls import conformal

TAIL = 1e-10
SHAPE_FLOOR = 0.1
TV_ABS_TOL = 1e-6


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not reach the requested accuracy."""


@dataclass(frozen=True)
class GammaSpec:
    """Gamma(shape, scale) shifted by ``loc``; shape is clipped at 0.1."""

    shape: float
    scale: float
    loc: float = 0.0

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0):
            raise ValueError("gamma shape and scale must be positive")
        object.__setattr__(self, "shape", max(float(self.shape), SHAPE_FLOOR))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def lower(self):
        return self.loc

    def pdf(self, x):
        t = (np.asarray(x, dtype=float) - self.loc) / self.scale
        with np.errstate(divide="ignore", invalid="ignore"):
            logp = special.xlogy(self.shape - 1.0, t) - t - special.gammaln(self.shape) - math.log(self.scale)
            out = np.where(t > 0, np.exp(logp), 0.0)
        return out if out.ndim else float(out)

    def ppf(self, p):
        return self.loc + self.scale * float(special.gammaincinv(self.shape, p))

    def sample(self, rng, size=None):
        return self.loc + rng.gamma(self.shape, self.scale, size=size)


@dataclass(frozen=True)
class Mixture:
    """(1 - weight) * base + weight * part; TV between two mixtures sharing
    ``base`` and ``weight`` is ``weight`` times the TV of their parts."""

    weight: float
    part: object
    base: object

    @property
    def lower(self):
        return min(self.part.lower, self.base.lower)

    def pdf(self, x):
        return (1.0 - self.weight) * self.base.pdf(x) + self.weight * self.part.pdf(x)

    def ppf(self, p):
        # conservative: a quantile of the wider component bounds the mixture tail
        return max(self.part.ppf(p), self.base.ppf(p))


def _crossings(p, q, lo, hi, n=512):
    xs = np.linspace(lo, hi, n + 1)
    d = p.pdf(xs) - q.pdf(xs)
    out = []
    for a, b, da, db in zip(xs[:-1], xs[1:], d[:-1], d[1:]):
        if da == 0.0:
            out.append(a)
        elif da * db < 0:
            out.append(optimize.brentq(lambda t: p.pdf(t) - q.pdf(t), a, b, xtol=1e-12))
    return out


def tv_numeric(p, q, tol=TV_ABS_TOL):
    """0.5 * integral |p - q| by adaptive quadrature between density crossings.

    The upper limit is the (1 - 1e-10) quantile of the wider distribution.
    """
    if p == q:
        return 0.0
    lo = min(p.lower, q.lower)
    hi = max(p.ppf(1.0 - TAIL), q.ppf(1.0 - TAIL))
    pts = {lo, hi, p.lower, q.lower, *_crossings(p, q, lo, hi)}
    pts = sorted(t for t in pts if lo <= t <= hi)
    total, err = 0.0, 0.0
    f = lambda t: abs(p.pdf(t) - q.pdf(t))
    for a, b in zip(pts[:-1], pts[1:]):
        if b <= a:
            continue
        val, e, *_ = integrate.quad(f, a, b, epsabs=tol / 10, epsrel=1e-10, limit=200, full_output=1)
        total += val
        err += e
    if err > tol:
        raise QuadratureError(f"TV quadrature error {err:.2e} exceeds {tol:.0e}")
    return float(min(max(0.5 * total, 0.0), 1.0))


def disk_gamma_field(point, shape0=5.0, slope=1.0 / 3.0, power=0.8, scale=2.0):
    """Score distribution at a plane point: Gamma(5 - |p|^0.8 / 3, 2)."""
    r = float(np.hypot(point[0], point[1]))
    return GammaSpec(shape0 - slope * r ** power, scale)


@dataclass
class LipschitzEstimate:
    epsilon: float
    n_pairs: int


def sample_unit_disk(rng, n):
    r = np.sqrt(rng.uniform(size=n))
    a = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)


def lipschitz_estimate(field_fn, samples, seed=0):
    """Max of TV / distance over ``samples`` random pairs in the unit disk."""
    if samples < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    a = sample_unit_disk(rng, samples)
    b = sample_unit_disk(rng, samples)
    eps, used = 0.0, 0
    for pa, pb in zip(a, b):
        d = float(np.linalg.norm(pa - pb))
        if d == 0.0:
            continue
        eps = max(eps, tv_numeric(field_fn(pa), field_fn(pb)) / d)
        used += 1
    return LipschitzEstimate(eps, used)


@dataclass
class GapBoundReport:
    """Coverage-gap values; ``interpretable`` and ``asymptotic`` are None
    for a single calibration point and ``exact`` is None without TV values."""

    exact: float
    tight: float
    interpretable: float
    asymptotic: float
    distances: np.ndarray = field(repr=False)
    rho: float = 0.0
    epsilon: float = 0.0


def normalized_weights(distances, rho):
    w = rho ** np.asarray(distances, dtype=float)
    return w / (1.0 + w.sum())


def gap_bounds(distances, rho, epsilon, exact_tv=None):
    d = np.asarray(distances, dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("distances must be a nonempty 1-D array")
    if np.any(np.diff(d) < 0):
        raise ValueError("distances must be sorted ascending")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if epsilon < 0:
        raise ValueError("epsilon must be nonnegative")
    wt = normalized_weights(d, rho)
    tight = float(np.sum(wt * 2.0 * epsilon * d))
    exact = None
    if exact_tv is not None:
        tv = np.asarray(exact_tv, dtype=float)
        if tv.shape != d.shape:
            raise ValueError("exact_tv must match distances")
        exact = float(np.sum(2.0 * wt * tv))
    interp = asym = None
    if d.size >= 2:
        gaps = np.diff(d)
        d_min, d_max = float(gaps.min()), float(gaps.max())
        g = 1.0 - rho ** d_min
        if g <= 0.0:
            interp = math.inf
        else:
            interp = 2.0 * epsilon * (d[0] / g + d_max * rho ** d_min / g ** 2)
        asym = interp * (1.0 - rho ** d_max) if math.isfinite(interp) else math.inf
        if epsilon == 0.0:
            interp = asym = 0.0
    return GapBoundReport(exact, tight, interp, asym, d, rho, epsilon)


def tube_gap(epsilon_hat, tube, k=None):
    """2 * eps_hat * largest axis length of the tube (at step ``k`` if given)."""
    if epsilon_hat < 0:
        raise ValueError("epsilon_hat must be nonnegative")
    if epsilon_hat == 0:
        return 0.0
    return 2.0 * epsilon_hat * tube.max_axis_length(k)


def total_miscoverage(alpha, gap_terms, tube_gaps):
    """Sum over steps of sigma_k = alpha_k + gap_k + tube gap_k."""
    a, g, t = (np.asarray(x, dtype=float) for x in (alpha, gap_terms, tube_gaps))
    if not (a.shape == g.shape == t.shape):
        raise ValueError("alpha, gap_terms and tube_gaps must have equal lengths")
    return float(np.sum(a) + np.sum(g) + np.sum(t))


def replanning_miscoverage(first_alpha, first_gaps, first_tube_gaps):
    """Same sum taken over the first step of each replanned problem."""
    return total_miscoverage(first_alpha, first_gaps, first_tube_gaps)


# ---------------------------------------------------------------------------
# toy study on the unit disk
# ---------------------------------------------------------------------------

@dataclass
class ToyCell:
    rho: float
    n: int
    coverage: float
    barber_bound: float
    cpsls_bound: float
    trials: int

    def sigma(self):
        c = self.coverage
        return math.sqrt(max(c * (1.0 - c), 0.0) / self.trials)


class TvCache:
    """Memoised TV distance from each field distribution to the test one."""

    def __init__(self, test_spec):
        self.test = test_spec
        self._memo = {}

    def __call__(self, spec):
        key = (spec.shape, spec.scale, spec.loc)
        if key not in self._memo:
            self._memo[key] = tv_numeric(spec, self.test)
        return self._memo[key]


def toy_experiment(n_calib, rho_list, trials=100, seed=0, alpha=0.1, field_fn=disk_gamma_field,
                   epsilon=None, lipschitz_samples=200, csv_path=None):
    """Coverage at the origin for each (rho, n) cell.

    Calibration points are uniform on the unit disk and the same draws are
    reused across the rho grid for a given (n, trial).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if epsilon is None:
        epsilon = lipschitz_estimate(field_fn, lipschitz_samples, seed).epsilon
    test = field_fn(np.zeros(2))
    tv = TvCache(test)
    cells = []
    for n in n_calib:
        draws = []
        for t in range(trials):
            rng = np.random.default_rng([seed, n, t])
            pts = sample_unit_disk(rng, n)
            specs = [field_fn(p) for p in pts]
            scores = np.array([s.sample(rng) for s in specs])
            s_test = test.sample(rng)
            d = np.linalg.norm(pts, axis=1)
            order = np.argsort(d)
            tvs = np.array([tv(s) for s in specs])
            draws.append((d[order], scores[order], tvs[order], s_test))
        for rho in rho_list:
            hits, barber, ours = 0, [], []
            for d, scores, tvs, s_test in draws:
                w = rho ** d
                total = 1.0 + w.sum()
                q = conformal.weighted_quantile(scores, w / total, 1.0 / total, 1.0 - alpha)
                hits += s_test <= q
                rep = gap_bounds(d, rho, epsilon, tvs)
                barber.append(1.0 - alpha - rep.exact)
                ours.append(1.0 - alpha - rep.tight)
            cells.append(ToyCell(float(rho), int(n), hits / trials, float(np.mean(barber)),
                                 float(np.mean(ours)), trials))
    if csv_path is not None:
        write_toy_csv(csv_path, cells)
    return cells


def write_toy_csv(path, cells):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rho", "n", "coverage", "barber_bound", "cpsls_bound", "trials"])
        for c in cells:
            w.writerow([c.rho, c.n, c.coverage, c.barber_bound, c.cpsls_bound, c.trials])


def weight_mass_table(n, rho_list, bins=10, trials=100, seed=0):
    """Mean normalised weight per radius bin (last column is the test atom)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    rows = []
    for rho in rho_list:
        acc = np.zeros(bins + 1)
        for t in range(trials):
            rng = np.random.default_rng([seed, n, t])
            d = np.linalg.norm(sample_unit_disk(rng, n), axis=1)
            w = rho ** d
            total = 1.0 + w.sum()
            idx = np.clip(np.digitize(d, edges) - 1, 0, bins - 1)
            acc[:bins] += np.bincount(idx, weights=w / total, minlength=bins)
            acc[bins] += 1.0 / total
        rows.append((float(rho), acc / trials))
    return edges, rows
