"""Weighted conformal calibration of one-step model error.

A calibration point contributes the residual r_i = f(x_i, u_i) - f_hat(x_i, u_i).
At a query (z, v) every residual is scored with the Mahalanobis norm under the
covariance model's Cholesky factor at (z, v), weighted by
rho ** ||(z, v) - (x_i, u_i)||, and the weighted quantile (with an extra atom
at +inf carrying the test weight) gives the ellipsoid radius.

``math.inf`` is the INFINITE quantile: the finite atoms do not reach the level.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from cpsls import _accel

INFINITE = math.inf

CALIB_MAGIC = b"CPSLSCAL"
CALIB_VERSION = 1


class InfiniteQuantileError(ValueError):
    """The calibrated radius is infinite, so no finite error ellipsoid exists."""


@dataclass(frozen=True)
class CalibPoint:
    x: np.ndarray
    u: np.ndarray
    residual: np.ndarray


class ErrorSet:
    """Append-only store of (x, u, residual) triples with decay base ``rho``.

    Arrays grow geometrically so online appends are amortised O(1).
    """

    def __init__(self, states, controls, residuals, rho=0.97):
        states = np.atleast_2d(np.asarray(states, dtype=float))
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        residuals = np.atleast_2d(np.asarray(residuals, dtype=float))
        if not (states.shape[0] == controls.shape[0] == residuals.shape[0]):
            raise ValueError("states, controls and residuals must have the same row count")
        if states.shape[1] != residuals.shape[1]:
            raise ValueError("residual width must equal state width")
        if not 0.0 < rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")
        for a in (states, controls, residuals):
            if not np.all(np.isfinite(a)):
                raise ValueError("calibration data contain non-finite entries")
        self.rho = float(rho)
        self.n_x = states.shape[1]
        self.n_u = controls.shape[1]
        n = states.shape[0]
        cap = max(16, n)
        self._pts = np.empty((cap, self.n_x + self.n_u))
        self._res = np.empty((cap, self.n_x))
        self._pts[:n, : self.n_x] = states
        self._pts[:n, self.n_x:] = controls
        self._res[:n] = residuals
        self._n = n
        self.n_offline = n

    @classmethod
    def empty(cls, n_x, n_u, rho=0.97):
        return cls(np.zeros((0, n_x)), np.zeros((0, n_u)), np.zeros((0, n_x)), rho)

    @classmethod
    def from_model(cls, states, controls, next_states, model, rho=0.97):
        residuals = np.asarray(next_states, dtype=float) - model.predict(states, controls)
        return cls(states, controls, residuals, rho)

    def __len__(self):
        return self._n

    def __getitem__(self, i):
        if not -self._n <= i < self._n:
            raise IndexError(i)
        i %= self._n
        return CalibPoint(self._pts[i, : self.n_x].copy(), self._pts[i, self.n_x:].copy(), self._res[i].copy())

    @property
    def points(self):
        """Stacked (x, u) rows, shape (N, n_x + n_u); a view, do not mutate."""
        return self._pts[: self._n]

    @property
    def states(self):
        return self._pts[: self._n, : self.n_x]

    @property
    def controls(self):
        return self._pts[: self._n, self.n_x:]

    @property
    def residuals(self):
        return self._res[: self._n]

    def append(self, x, u, residual):
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        r = np.asarray(residual, dtype=float)
        if self._n == self._pts.shape[0]:
            cap = 2 * self._pts.shape[0]
            pts = np.empty((cap, self._pts.shape[1]))
            res = np.empty((cap, self.n_x))
            pts[: self._n] = self._pts[: self._n]
            res[: self._n] = self._res[: self._n]
            self._pts, self._res = pts, res
        self._pts[self._n, : self.n_x] = x
        self._pts[self._n, self.n_x:] = u
        self._res[self._n] = r
        self._n += 1

    def copy(self):
        out = ErrorSet(self.states, self.controls, self.residuals, self.rho)
        out.n_offline = self.n_offline
        return out

    def nearest(self, query, k):
        """Sub-set of the ``k`` points closest to ``query`` (in (x, u) space)."""
        if k >= self._n:
            return self
        d2 = np.sum((self.points - query) ** 2, axis=1)
        idx = np.argpartition(d2, k)[:k]
        sub = ErrorSet(self.states[idx], self.controls[idx], self.residuals[idx], self.rho)
        return sub


def score(L, residual):
    """||L^{-1} r||_2, i.e. sqrt(r^T Sigma^{-1} r) for Sigma = L L^T."""
    L = np.asarray(L, dtype=float)
    r = np.asarray(residual, dtype=float)
    if r.ndim == 1:
        y = solve_triangular(L, r, lower=True, check_finite=False)
        return float(np.sqrt(y @ y))
    return _accel.mahalanobis_scores(L, r)


def weights(error_set, z, v):
    """Normalised (w_1..w_n) and w_test for a query (z, v)."""
    if len(error_set) == 0:
        raise ValueError("error set is empty")
    q = np.concatenate([np.asarray(z, dtype=float), np.asarray(v, dtype=float)])
    w = _accel.rho_weights(error_set.points, q, error_set.rho)
    total = 1.0 + w.sum()
    return w / total, 1.0 / total


def weighted_quantile(scores, w, test_weight, level):
    """Smallest score whose cumulative weight reaches ``level``.

    The +inf atom holds ``test_weight``; INFINITE is returned when only it
    can reach the level.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    scores = np.asarray(scores, dtype=float)
    w = np.asarray(w, dtype=float)
    total = w.sum() + test_weight
    if abs(total - 1.0) > 1e-10:
        raise ValueError(f"weights must sum to 1 (got {total!r})")
    return _accel.weighted_quantile(scores, w, test_weight, level)


def _check_alpha(alpha_k):
    if not 0.0 < alpha_k < 1.0:
        raise ValueError("alpha_k must lie in (0, 1)")


def calibrate(error_set, L, z, v, alpha_k, nearest=None):
    """Calibrated radius q_{1-alpha_k}(z, v) (may be INFINITE)."""
    _check_alpha(alpha_k)
    if len(error_set) == 0:
        return INFINITE
    query = np.concatenate([np.asarray(z, dtype=float), np.asarray(v, dtype=float)])
    es = error_set.nearest(query, nearest) if nearest else error_set
    return float(
        _accel.calibrate_batch(
            np.asarray(L, dtype=float)[None], query[None], es.points, es.residuals,
            es.rho, np.array([1.0 - alpha_k]),
        )[0]
    )


def calibrate_horizon(error_set, Ls, zs, vs, alpha_k, nearest=None):
    """Vectorised :func:`calibrate` over K queries; returns shape (K,)."""
    _check_alpha(alpha_k)
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    vs = np.atleast_2d(np.asarray(vs, dtype=float))
    K = zs.shape[0]
    if len(error_set) == 0:
        return np.full(K, INFINITE)
    queries = np.concatenate([zs, vs], axis=1)
    levels = np.full(K, 1.0 - alpha_k)
    Ls = np.asarray(Ls, dtype=float)
    if nearest:
        return np.array([
            calibrate(error_set, Ls[k], zs[k], vs[k], alpha_k, nearest) for k in range(K)
        ])
    return _accel.calibrate_batch(Ls, queries, error_set.points, error_set.residuals,
                                  error_set.rho, levels)


def ball_variant(error_set, z, v, alpha_k, nearest=None):
    """Calibrated radius with Sigma fixed to the identity (plain 2-norm score)."""
    return calibrate(error_set, np.eye(error_set.n_x), z, v, alpha_k, nearest)


def v_matrix(q, L):
    """Disturbance-shaping matrix q L; the error set is {q L xi : ||xi|| <= 1}."""
    if not math.isfinite(q):
        raise InfiniteQuantileError("calibrated radius is infinite; fall back before building V")
    if q < 0:
        raise ValueError("calibrated radius must be nonnegative")
    return q * np.asarray(L, dtype=float)


def max_finite_score(error_set, L):
    if len(error_set) == 0:
        return 0.0
    return float(np.max(score(L, error_set.residuals)))


@dataclass
class EllipsoidErrorSet:
    center: np.ndarray
    L: np.ndarray
    q: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.L = np.asarray(self.L, dtype=float)
        if not (math.isfinite(self.q) and self.q >= 0):
            raise ValueError("ellipsoid radius must be finite and nonnegative")


def contains(ell, y):
    """(inside, margin): margin = score - q, negative strictly inside."""
    s = score(ell.L, np.asarray(y, dtype=float) - ell.center)
    margin = s - ell.q
    return bool(s <= ell.q), float(margin)


def online_update(error_set, x, u, next_true, model):
    """Append (x, u, x_next - f_hat(x, u)); mutates and returns ``error_set``."""
    residual = np.asarray(next_true, dtype=float) - model.predict(np.asarray(x, dtype=float),
                                                                  np.asarray(u, dtype=float))
    error_set.append(x, u, residual)
    return error_set


# ---------------------------------------------------------------------------
# columnar calibration file
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIQ")


def save_error_set(path, error_set):
    """Header (magic, version, n_x, n_u, count) then little-endian f64 rows (x, u, r)."""
    rows = np.concatenate([error_set.points, error_set.residuals], axis=1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CALIB_MAGIC, CALIB_VERSION, error_set.n_x, error_set.n_u, rows.shape[0]))
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def load_error_set(path, rho=0.97, expect_n_x=None, expect_n_u=None):
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError("truncated calibration file header")
        magic, version, n_x, n_u, count = _HEADER.unpack(head)
        if magic != CALIB_MAGIC:
            raise ValueError("not a calibration file")
        if version != CALIB_VERSION:
            raise ValueError(f"unsupported calibration file version {version}")
        if expect_n_x is not None and n_x != expect_n_x:
            raise ValueError(f"calibration n_x {n_x} != expected {expect_n_x}")
        if expect_n_u is not None and n_u != expect_n_u:
            raise ValueError(f"calibration n_u {n_u} != expected {expect_n_u}")
        width = 2 * n_x + n_u
        buf = fh.read()
    data = np.frombuffer(buf, dtype="<f8")
    if data.size != count * width:
        raise ValueError(f"calibration file holds {data.size} values, header promises {count * width}")
    rows = data.reshape(count, width).astype(float)
    return ErrorSet(rows[:, :n_x], rows[:, n_x:n_x + n_u], rows[:, n_x + n_u:], rho)
