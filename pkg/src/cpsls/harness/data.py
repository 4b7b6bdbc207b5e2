"""Labelled (x, u, x_next) datasets: generation and the binary/CSV formats."""

import struct
from dataclasses import dataclass

import numpy as np

from cpsls.dynamics import DiscreteDynamics
from cpsls.harness.scenarios import QUAD_HOVER, SamplingError, quad_bounds, sample_points

DATA_MAGIC = b"CPSLSDAT"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIIIQ")

SPLITS = ("train", "uncert", "calib")


@dataclass
class Dataset:
    X: np.ndarray
    U: np.ndarray
    Y: np.ndarray  # true next state

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.U = np.atleast_2d(np.asarray(self.U, dtype=float))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if not (len(self.X) == len(self.U) == len(self.Y)):
            raise ValueError("X, U, Y row counts differ")

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_x(self):
        return self.X.shape[1]

    @property
    def n_u(self):
        return self.U.shape[1]

    def head(self, n):
        return Dataset(self.X[:n], self.U[:n], self.Y[:n])


def save_dataset(path, ds, csv_path=None):
    rows = np.concatenate([ds.X, ds.U, ds.Y], axis=1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATA_MAGIC, DATA_VERSION, ds.n_x, ds.n_u, len(ds)))
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())
    if csv_path is not None:
        head = [f"x{i}" for i in range(ds.n_x)] + [f"u{i}" for i in range(ds.n_u)] + \
               [f"next{i}" for i in range(ds.n_x)]
        np.savetxt(csv_path, rows, delimiter=",", header=",".join(head), comments="", fmt="%.17g")


def load_dataset(path):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated dataset header")
        magic, version, n_x, n_u, count = _HEADER.unpack(head)
        if magic != DATA_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        if version != DATA_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    width = 2 * n_x + n_u
    if data.size != count * width:
        raise ValueError(f"{path}: expected {count * width} values, found {data.size}")
    rows = data.reshape(count, width).astype(float)
    return Dataset(rows[:, :n_x], rows[:, n_x:n_x + n_u], rows[:, n_x + n_u:])


def sample_dataset(spec, true_dyn, counts=None):
    """Train / uncertainty / calibration splits labelled by the true plant.

    Each split draws from its own RNG stream derived from ``spec.seed``.
    """
    counts = counts or {"train": spec.n_train, "uncert": spec.n_uncert, "calib": spec.n_calib}
    out = {}
    for i, name in enumerate(SPLITS):
        if name not in counts:
            continue
        rng = np.random.default_rng([spec.seed, i])
        X, U = sample_points(spec, counts[name], rng)
        out[name] = Dataset(X, U, true_dyn.step(X, U))
    return out


def quad_rollout_pairs(n, rng, spec, horizon=20, dyn=None):
    """State-control pairs from short randomized near-hover rollouts.

    Thrust is hover plus a damped vertical-velocity correction and noise,
    torques are PD attitude corrections plus noise; all clipped to the
    control box. Pairs leaving the state box or entering the excluded ball
    are dropped together with the rest of their rollout.
    """
    dyn = dyn or DiscreteDynamics.for_tag("quad-fall")
    lo, hi = quad_bounds()
    xs, us, ys = [], [], []
    have = tried = 0
    while have < n:
        X0, _ = sample_points(spec, 256, rng)
        x = X0.copy()
        alive = np.ones(len(x), dtype=bool)
        kz = rng.uniform(0.5, 2.0, size=len(x))
        for _ in range(horizon):
            thrust = QUAD_HOVER - kz * x[:, 8] + rng.normal(0.0, 2.0, len(x))
            tau = -0.2 * x[:, [5, 4, 3]] - 0.1 * x[:, 9:12] + rng.normal(0.0, 0.05, (len(x), 3))
            u = np.clip(np.column_stack([thrust, tau]), lo[12:], hi[12:])
            nxt = dyn.step(x, u)
            ok = alive & spec.accepts(x, u)
            xs.append(x[ok])
            us.append(u[ok])
            ys.append(nxt[ok])
            have += int(ok.sum())
            alive &= ok & spec.accepts(nxt, u)
            x = np.where(alive[:, None], nxt, x)
            if not alive.any():
                break
        tried += 256 * horizon
        if tried > 200 * max(n, 1000) and have < 1e-3 * tried:
            raise SamplingError("insufficient accepted quadcopter pairs")
    X = np.concatenate(xs)[:n]
    U = np.concatenate(us)[:n]
    Y = np.concatenate(ys)[:n]
    return Dataset(X, U, Y)


def quad_trajectory_data(spec, seed=None, counts=None, dyn=None):
    """Quadcopter splits from randomized rollouts (substitute for expert data)."""
    seed = spec.seed if seed is None else seed
    counts = counts or {"train": spec.n_train, "uncert": spec.n_uncert, "calib": spec.n_calib}
    out = {}
    for i, name in enumerate(SPLITS):
        if name in counts:
            out[name] = quad_rollout_pairs(counts[name], np.random.default_rng([seed, 100 + i]), spec, dyn=dyn)
    return out
