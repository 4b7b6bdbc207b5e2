"""Sampling domains and closed-loop problem instances for every scenario tag."""

import math
from dataclasses import dataclass, field

import numpy as np

from cpsls import sls
from cpsls.dynamics import ALL_TAGS, DiscreteDynamics, ScenarioVariant
from cpsls.mpc import MpcConfig, Scenario

MIN_ACCEPT_RATE = 1e-3

G = 9.81
QUAD_HOVER = G * 1.0
QUAD_GOAL = (4.5, 2.5, 2.5)


class SamplingError(RuntimeError):
    pass


@dataclass
class SamplingSpec:
    """Uniform box (optionally a union of intervals per dimension) with
    rejection predicates. ``unions`` maps a column index of the stacked
    [x, u] vector to a list of (lo, hi) intervals that replace the box range.
    """

    lo: np.ndarray
    hi: np.ndarray
    n_x: int
    unions: dict = field(default_factory=dict)
    exclusions: list = field(default_factory=list)  # callables (X, U) -> bool mask to reject
    n_train: int = 10_000
    n_uncert: int = 10_000
    n_calib: int = 2_000
    seed: int = 0

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.lo.shape != self.hi.shape or np.any(self.hi < self.lo):
            raise ValueError("sampling intervals must be nonempty")
        for dim, ivs in self.unions.items():
            if not ivs or any(b <= a for a, b in ivs):
                raise ValueError(f"union intervals for column {dim} must be nonempty")
        if min(self.n_train, self.n_uncert, self.n_calib) <= 0:
            raise ValueError("split counts must be positive")

    @property
    def n_u(self):
        return self.lo.size - self.n_x

    def accepts(self, X, U):
        X = np.atleast_2d(X)
        U = np.atleast_2d(U)
        S = np.concatenate([X, U], axis=1)
        ok = np.all((S >= self.lo - 1e-12) & (S <= self.hi + 1e-12), axis=1)
        for dim, ivs in self.unions.items():
            ok &= np.any([(S[:, dim] >= a) & (S[:, dim] <= b) for a, b in ivs], axis=0)
        for ex in self.exclusions:
            ok &= ~ex(X, U)
        return ok


def _draw(spec, n, rng):
    S = rng.uniform(spec.lo, spec.hi, size=(n, spec.lo.size))
    for dim, ivs in spec.unions.items():
        widths = np.array([b - a for a, b in ivs])
        pick = rng.choice(len(ivs), size=n, p=widths / widths.sum())
        lo = np.array([a for a, _ in ivs])[pick]
        S[:, dim] = lo + rng.uniform(size=n) * widths[pick]
    return S[:, :spec.n_x], S[:, spec.n_x:]


def sample_points(spec, n, rng):
    """Rejection-sample exactly ``n`` accepted (x, u) rows."""
    xs, us = [], []
    have = drawn = 0
    batch = max(256, n)
    while have < n:
        X, U = _draw(spec, batch, rng)
        drawn += batch
        keep = spec.accepts(X, U)
        xs.append(X[keep])
        us.append(U[keep])
        have += int(keep.sum())
        if drawn >= 10 * batch and have / drawn < MIN_ACCEPT_RATE:
            raise SamplingError(f"acceptance rate {have / drawn:.2e} below {MIN_ACCEPT_RATE:g}; check the exclusions")
    return np.concatenate(xs)[:n], np.concatenate(us)[:n]


# ---------------------------------------------------------------------------
# per-tag sampling domains
# ---------------------------------------------------------------------------

CAR_BOX = ([0, -5, -math.pi, -10, -10, -10], [5, 5, math.pi, 10, 10, 10])


def _outside_disk(center, radius):
    c = np.asarray(center, dtype=float)

    def inside(X, U):
        return np.sum((X[:, :2] - c) ** 2, axis=1) <= radius ** 2
    inside.__name__ = f"disk{tuple(c)}r{radius}"
    return inside


def _inside_ball(center, radius):
    c = np.asarray(center, dtype=float)

    def inside(X, U):
        return np.sum((X[:, :3] - c) ** 2, axis=1) <= radius ** 2
    inside.__name__ = f"ball{tuple(c)}r{radius}"
    return inside


def quad_bounds():
    q4 = math.pi / 4
    lo = [0, 0, 0, -q4, -q4, -q4, -5, -5, -5, -2, -2, -2, 0.0, -0.1, -0.1, -0.1]
    hi = [5, 5, 5, q4, q4, q4, 5, 5, 5, 2, 2, 2, 2 * G, 0.1, 0.1, 0.1]
    return np.array(lo, float), np.array(hi, float)


# calibration sizes that differ from the desk default
CALIB_COUNTS = {"car-friction": 10_000}


def sampling_spec(tag, seed=0, **counts):
    """Training/calibration domain for a scenario tag."""
    if tag not in ALL_TAGS:
        raise ValueError(f"unknown scenario tag {tag!r}")
    if tag in CALIB_COUNTS:
        counts.setdefault("n_calib", CALIB_COUNTS[tag])
    if tag == "quad-fall":
        lo, hi = quad_bounds()
        return SamplingSpec(lo, hi, 12, exclusions=[_inside_ball((2.5, 2.5, 2.5), 1.0)],
                            seed=seed, **counts)
    lo, hi = CAR_BOX
    unions, excl = {}, []
    if tag == "car-ood-attract":
        unions = {1: [(-12.0, -6.0), (6.0, 12.0)]}
        lo = list(lo)
        hi = list(hi)
        lo[1], hi[1] = -12.0, 12.0
    elif tag == "car-friction":
        unions = {1: [(-5.0, -2.0), (2.0, 5.0)]}
    elif tag == "car-active-region":
        excl = [_outside_disk((2.5, 0.0), 1.0)]
    return SamplingSpec(lo, hi, 4, unions=unions, exclusions=excl, seed=seed, **counts)


# ---------------------------------------------------------------------------
# closed-loop instances
# ---------------------------------------------------------------------------

CAR_OBSTACLE = ((2.5, 0.0), 1.0)
CAR_POS_BOUNDS = ((-1.0, 6.0), (-5.0, 5.0))
CAR_U_BOUND = 10.0
QUAD_OBSTACLE = ((2.5, 2.5, 2.5), 0.8)
OOD_ROUTE = ((1.0, -1.4), (4.5, -1.4))


def car_constraints(obstacle=True):
    cons = [sls.sphere_obstacle(CAR_OBSTACLE[0], CAR_OBSTACLE[1], (0, 1), 2)] if obstacle else []
    for i, (lo, hi) in enumerate(CAR_POS_BOUNDS):
        cons += sls.box_constraints(lo, hi, i, 4, 2, on="x")
    return cons


def quad_constraints():
    cons = [sls.sphere_obstacle(QUAD_OBSTACLE[0], QUAD_OBSTACLE[1], (0, 1, 2), 4)]
    for i in range(3):
        cons += sls.box_constraints(-0.5, 5.5, i, 12, 4, on="x")
    # keep the Euler-rate kinematics away from the cos(theta) singularity
    for i in (4, 5):
        cons += sls.box_constraints(-math.pi / 3, math.pi / 3, i, 12, 4, on="x")
    return cons


def _heading(p0, p1):
    return math.atan2(p1[1] - p0[1], p1[0] - p0[0])


def start_goal(tag, seed):
    """Seeded start state and goal state for a closed-loop trial."""
    rng = np.random.default_rng([seed, 7919])
    if tag == "car-ood-attract":
        # fixed route along the obstacle; trials differ by calibration subset
        p0, p1 = OOD_ROUTE
    elif tag == "car-id":
        s = rng.choice([-1.0, 1.0])
        p0 = (0.5, s * rng.uniform(0.9, 1.4))
        p1 = (4.5, s * rng.uniform(0.7, 1.3))
    elif tag == "car-friction":
        # start and goal in opposite training bands, diagonal past the obstacle
        s = rng.choice([-1.0, 1.0])
        p0 = (rng.uniform(0.5, 1.5), s * rng.uniform(2.5, 4.0))
        p1 = (rng.uniform(3.5, 4.5), -s * rng.uniform(2.5, 4.0))
    elif tag == "car-active-region":
        p0 = (0.5, rng.uniform(-0.3, 0.3))
        p1 = (4.5, rng.uniform(-0.3, 0.3))
    elif tag == "quad-fall":
        x0 = np.zeros(12)
        x0[:3] = [rng.uniform(0.3, 0.8), rng.uniform(1.8, 3.2), rng.uniform(1.8, 3.2)]
        goal = np.zeros(12)
        goal[:3] = QUAD_GOAL
        return x0, goal
    else:
        raise ValueError(f"unknown scenario tag {tag!r}")
    x0 = np.array([p0[0], p0[1], _heading(p0, p1), 1.0])
    goal = np.array([p1[0], p1[1], 0.0, 0.0])
    return x0, goal


def quad_envelope(x):
    """True while the quadcopter is upright and near the workspace."""
    x = np.asarray(x)
    return bool(np.all(np.abs(x[4:6]) < np.pi / 2) and np.all(np.abs(x[:3] - 2.5) < 10.0))


def make_scenario(tag, seed, **variant_overrides):
    dyn = DiscreteDynamics.for_tag(tag, **variant_overrides)
    x0, goal = start_goal(tag, seed)
    if tag == "quad-fall":
        return Scenario(tag, dyn, x0, goal, quad_constraints(), [QUAD_OBSTACLE], pos_idx=(0, 1, 2),
                        envelope=quad_envelope)
    obstacle = tag != "car-active-region"
    return Scenario(tag, dyn, x0, goal, car_constraints(obstacle), [CAR_OBSTACLE] if obstacle else [],
                    pos_idx=(0, 1))


def default_mpc_config(tag, mode="cp-ellipsoid", goal=None, **overrides):
    """Cost weights and limits used for each scenario."""
    if tag == "quad-fall":
        I3, Z3 = np.eye(3), np.zeros((3, 3))
        kw = dict(
            n_x=12, n_u=4,
            Q_f=np.block([[I3, Z3, Z3, Z3], [Z3, Z3, Z3, Z3], [Z3, Z3, I3, Z3], [Z3, Z3, Z3, 0.2 * I3]]),
            Q=np.block([[Z3, Z3, Z3, Z3], [Z3, Z3, Z3, Z3], [Z3, Z3, 0.01 * I3, Z3], [Z3, Z3, Z3, Z3]]),
            Q_s=np.zeros((12, 12)),
            R=np.diag([0.01, 0.1, 0.1, 0.1]),
            rho=0.8, goal_idx=(0, 1, 2), goal_radius=0.3, max_steps=400,
            u_lo=[0.0, -0.1, -0.1, -0.1], u_hi=[2 * G, 0.1, 0.1, 0.1], u_ref=[QUAD_HOVER, 0.0, 0.0, 0.0],
        )
    else:
        kw = dict(
            n_x=4, n_u=2, Q_f=np.diag([1.0, 1.0, 0.0, 1.0]), Q=np.zeros((4, 4)),
            Q_s=0.1 * np.eye(4) if tag == "car-active-region" else np.zeros((4, 4)),
            R=np.diag([0.1, 0.1]), rho=0.97, goal_idx=(0, 1), goal_radius=0.3, max_steps=100,
            u_lo=-CAR_U_BOUND, u_hi=CAR_U_BOUND,
        )
    kw.update(mode=mode, goal=goal)
    kw.update(overrides)
    return MpcConfig(**kw)
