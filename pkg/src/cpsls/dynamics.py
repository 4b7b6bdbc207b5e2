"""Ground-truth vector fields for the car and quadcopter scenarios.

State layouts
-------------
car  : x = (p_x, p_y, theta, v),   u = (omega, a)
quad : x = (p_x, p_y, p_z, psi, theta, phi, vx, vy, vz, p, q, r),
       u = (thrust, tau_x, tau_y, tau_z)

All fields accept a single point (1-D arrays) or a batch (2-D arrays, one
point per row) and return the matching shape.
"""

from dataclasses import dataclass, field, replace

import numpy as np

CAR_TAGS = ("car-id", "car-ood-attract", "car-active-region", "car-friction")
QUAD_TAGS = ("quad-fall",)
ALL_TAGS = CAR_TAGS + QUAD_TAGS

CAR_DT = 0.1
QUAD_DT = 0.05

# guard for the attraction singularity at the obstacle centre
_D2_EPS = 1e-12
_COS_EPS = 1e-6


class SingularityError(ValueError):
    """Raised when the quadcopter Euler-rate kinematics hit cos(theta) ~ 0."""


@dataclass(frozen=True)
class StateControlPoint:
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        u = np.asarray(self.u, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("state/control contain non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "u", u)


@dataclass(frozen=True)
class ScenarioVariant:
    """Named dynamics variant plus its constants.

    ``attract_band`` is the |p_y| half-width where attraction is active for
    the band-gated variants; ``region_radius`` is the radius of the disk
    (car-active-region) or ball (quad-fall) where the OOD terms act.
    """

    tag: str
    k_attr: float = 0.0
    attract_band: float = 0.0
    obstacle_center: tuple = (2.5, 0.0)
    obstacle_radius: float = 1.0
    region_center: tuple = (2.5, 0.0)
    region_radius: float = 1.0
    # quadcopter constants
    g: float = -9.81
    mass: float = 1.0
    inertia: tuple = (0.5, 0.1, 0.3)

    @classmethod
    def from_tag(cls, tag, **overrides):
        if tag not in ALL_TAGS:
            raise ValueError(f"unknown scenario tag {tag!r}; expected one of {ALL_TAGS}")
        defaults = {
            "car-id": dict(),
            "car-ood-attract": dict(k_attr=-0.5, attract_band=6.0),
            "car-active-region": dict(k_attr=-0.5, region_center=(2.5, 0.0), region_radius=1.0),
            "car-friction": dict(k_attr=-1.5, attract_band=2.0),
            "quad-fall": dict(obstacle_center=(2.5, 2.5, 2.5), obstacle_radius=0.8,
                              region_center=(2.5, 2.5, 2.5), region_radius=1.0),
        }[tag]
        defaults.update(overrides)
        return cls(tag=tag, **defaults)

    @property
    def is_car(self):
        return self.tag in CAR_TAGS

    @property
    def n_x(self):
        return 4 if self.is_car else 12

    @property
    def n_u(self):
        return 2 if self.is_car else 4


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to vector field")


def _wrap(angle):
    return np.arctan2(np.sin(angle), np.cos(angle))


def _attraction(px, py, theta, k_attr, center, d2_offset=0.0):
    """Attractive steering rate; zero where d^2 underflows the guard."""
    d2 = (px - center[0]) ** 2 + (py - center[1]) ** 2
    theta_a = np.arctan2(py, px)
    dtheta = _wrap(theta_a - theta)
    denom = d2 + d2_offset
    safe = np.where(denom < _D2_EPS, 1.0, denom)
    return np.where(denom < _D2_EPS, 0.0, k_attr / safe * dtheta), d2


def car_field(x, u, variant):
    """Continuous-time car derivative (p_x', p_y', theta', v')."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    if not variant.is_car:
        raise ValueError(f"car_field called with non-car variant {variant.tag!r}")
    px, py, th, v = np.moveaxis(x, -1, 0)
    om, a = np.moveaxis(u, -1, 0)

    theta_dot = om
    v_dot = a
    tag = variant.tag
    if tag == "car-ood-attract":
        w_attr, _ = _attraction(px, py, th, variant.k_attr, variant.obstacle_center)
        theta_dot = theta_dot + w_attr * (np.abs(py) < variant.attract_band)
    elif tag == "car-active-region":
        w_attr, d2 = _attraction(px, py, th, variant.k_attr, variant.region_center, d2_offset=0.1)
        inside = d2 < variant.region_radius ** 2
        theta_dot = theta_dot + w_attr * inside
        v_dot = v_dot - (1.0 + np.cos(np.pi * np.sqrt(d2))) * inside
    elif tag == "car-friction":
        w_attr, _ = _attraction(px, py, th, variant.k_attr, variant.obstacle_center)
        band = np.abs(py) < variant.attract_band
        theta_dot = theta_dot + w_attr * band
        a_slip = 0.7 * np.exp(-2.0 * py ** 2)
        drag = 0.1 * np.cos(2.0 * np.pi / 5.0 * py) + 0.1 - a_slip * band
        v_dot = v_dot - np.sign(v) * drag

    out = np.stack([v * np.cos(th), v * np.sin(th), theta_dot, v_dot], axis=-1)
    return out


def fall_acceleration(pos, variant):
    """Extra downward acceleration inside the quadcopter fall region."""
    c = np.asarray(variant.region_center)
    d2 = np.sum((np.asarray(pos) - c) ** 2, axis=-1)
    inside = d2 < variant.region_radius ** 2
    return (0.1 + 0.1 * np.cos(2.0 * np.pi * d2 - np.pi)) * inside


def quad_field(x, u, variant=None):
    """Continuous-time 12-state quadcopter derivative."""
    if variant is None:
        variant = ScenarioVariant.from_tag("quad-fall")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    _check_finite(x, u)
    g, m = variant.g, variant.mass
    Ix, Iy, Iz = variant.inertia

    pos = x[..., 0:3]
    psi, th, phi = x[..., 3], x[..., 4], x[..., 5]
    vel = x[..., 6:9]
    p, q, r = x[..., 9], x[..., 10], x[..., 11]
    u1, u2, u3, u4 = u[..., 0], u[..., 1], u[..., 2], u[..., 3]

    cth = np.cos(th)
    if np.any(np.abs(cth) < _COS_EPS):
        raise SingularityError("cos(theta) vanishes; Euler-rate kinematics undefined")
    sphi, cphi = np.sin(phi), np.cos(phi)
    spsi, cpsi = np.sin(psi), np.cos(psi)
    sth, tth = np.sin(th), np.tan(th)

    psi_dot = q * sphi / cth + r * cphi / cth
    th_dot = q * cphi - r * sphi
    phi_dot = p + q * sphi * tth + r * cphi * tth
    ax = u1 / m * (sphi * spsi + cphi * cpsi * sth)
    ay = u1 / m * (cpsi * sphi - cphi * spsi * sth)
    az = g + u1 / m * (cphi * cth) - fall_acceleration(pos, variant)
    p_dot = (Iy - Iz) / Ix * q * r + u2 / Ix
    q_dot = (Iz - Ix) / Iy * p * r + u3 / Iy
    r_dot = (Ix - Iy) / Iz * p * q + u4 / Iz

    return np.concatenate(
        [vel, np.stack([psi_dot, th_dot, phi_dot, ax, ay, az, p_dot, q_dot, r_dot], axis=-1)],
        axis=-1,
    )


def vector_field(x, u, variant):
    if variant.is_car:
        return car_field(x, u, variant)
    return quad_field(x, u, variant)


@dataclass(frozen=True)
class DiscreteDynamics:
    """Forward-Euler discretisation of a scenario's vector field."""

    variant: ScenarioVariant
    dt: float = CAR_DT

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @classmethod
    def for_tag(cls, tag, dt=None, **overrides):
        variant = ScenarioVariant.from_tag(tag, **overrides)
        if dt is None:
            dt = CAR_DT if variant.is_car else QUAD_DT
        return cls(variant=variant, dt=dt)

    @property
    def n_x(self):
        return self.variant.n_x

    @property
    def n_u(self):
        return self.variant.n_u

    def step(self, x, u):
        x = np.asarray(x, dtype=float)
        return x + self.dt * vector_field(x, u, self.variant)

    predict = step

    def jacobian(self, x, u):
        """(A, B) of the discrete map; analytic for the base car, FD otherwise."""
        if self.variant.tag == "car-id":
            return car_id_jacobian(x, u, self.dt)
        return finite_difference_jacobian(self.step, x, u)


def euler_step(dyn, pt):
    """x + dt * field(x, u) for a :class:`StateControlPoint`."""
    return dyn.step(pt.x, pt.u)


def car_id_jacobian(x, u, dt):
    x = np.asarray(x, dtype=float)
    _, _, th, v = x
    A = np.eye(4)
    A[0, 2] = -v * np.sin(th) * dt
    A[0, 3] = np.cos(th) * dt
    A[1, 2] = v * np.cos(th) * dt
    A[1, 3] = np.sin(th) * dt
    B = np.zeros((4, 2))
    B[2, 0] = dt
    B[3, 1] = dt
    return A, B


def finite_difference_jacobian(fn, x, u, h=1e-6):
    """Central-difference (A, B) of ``fn(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n_x, n_u = x.size, u.size
    A = np.empty((n_x, n_x))
    B = np.empty((n_x, n_u))
    for i in range(n_x):
        e = np.zeros(n_x)
        e[i] = h
        A[:, i] = (fn(x + e, u) - fn(x - e, u)) / (2 * h)
    for i in range(n_u):
        e = np.zeros(n_u)
        e[i] = h
        B[:, i] = (fn(x, u + e) - fn(x, u - e)) / (2 * h)
    return A, B


@dataclass
class LinearDynamics:
    """x+ = A x + B u (+ c); used as an exact surrogate in tests and demos."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray = field(default=None)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.c is None:
            self.c = np.zeros(self.A.shape[0])

    @property
    def n_x(self):
        return self.A.shape[0]

    @property
    def n_u(self):
        return self.B.shape[1]

    def predict(self, x, u):
        return np.asarray(x) @ self.A.T + np.asarray(u) @ self.B.T + self.c

    step = predict

    def jacobian(self, x, u):
        return self.A.copy(), self.B.copy()


def with_dt(dyn, dt):
    return replace(dyn, dt=dt)
