"""Hot numeric kernels for conformal calibration.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics. The numba path is used when numba imports
cleanly and ``CPSLS_DISABLE_NUMBA`` is unset (or ``0``). Set
``CPSLS_DISABLE_NUMBA=1`` to force the numpy path.
"""

import math
import os

import numpy as np
from scipy.linalg import solve_triangular

# absolute slack used when comparing cumulative weight to the target level
LEVEL_TOL = 1e-12


def _env_disabled():
    return os.environ.get("CPSLS_DISABLE_NUMBA", "0").strip().lower() in ("1", "true", "yes", "on")


try:
    import numba as nb
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# numpy reference path
# ---------------------------------------------------------------------------

def mahalanobis_scores_np(L, residuals):
    """||L^{-1} r||_2 for every row r of ``residuals``."""
    if residuals.shape[0] == 0:
        return np.zeros(0)
    y = solve_triangular(L, residuals.T, lower=True, check_finite=False)
    return np.sqrt(np.einsum("ij,ij->j", y, y))


def rho_weights_np(points, query, rho):
    d = np.sqrt(np.sum((points - query) ** 2, axis=1))
    return rho ** d


def weighted_quantile_np(scores, weights, test_weight, level):
    if scores.shape[0] == 0:
        return math.inf
    order = np.argsort(scores, kind="mergesort")
    cum = np.cumsum(weights[order])
    hit = np.nonzero(cum >= level - LEVEL_TOL)[0]
    if hit.size == 0:
        return math.inf
    return float(scores[order[hit[0]]])


def calibrate_batch_np(Ls, queries, points, residuals, rho, levels):
    """Calibrated radius at each query (one Cholesky factor per query)."""
    out = np.empty(queries.shape[0])
    for k in range(queries.shape[0]):
        s = mahalanobis_scores_np(Ls[k], residuals)
        w = rho_weights_np(points, queries[k], rho)
        total = 1.0 + w.sum()
        out[k] = weighted_quantile_np(s, w / total, 1.0 / total, levels[k])
    return out


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @nb.njit(cache=True)
    def mahalanobis_scores_nb(L, residuals):
        n = L.shape[0]
        N = residuals.shape[0]
        out = np.empty(N)
        y = np.empty(n)
        for i in range(N):
            acc = 0.0
            for r in range(n):
                s = residuals[i, r]
                for c in range(r):
                    s -= L[r, c] * y[c]
                y[r] = s / L[r, r]
                acc += y[r] * y[r]
            out[i] = math.sqrt(acc)
        return out

    @nb.njit(cache=True)
    def rho_weights_nb(points, query, rho):
        N, d = points.shape
        out = np.empty(N)
        lr = math.log(rho)
        for i in range(N):
            acc = 0.0
            for j in range(d):
                t = points[i, j] - query[j]
                acc += t * t
            out[i] = math.exp(lr * math.sqrt(acc))
        return out

    @nb.njit(cache=True)
    def weighted_quantile_nb(scores, weights, test_weight, level):
        N = scores.shape[0]
        if N == 0:
            return math.inf
        order = np.argsort(scores, kind="mergesort")
        cum = 0.0
        for i in range(N):
            cum += weights[order[i]]
            if cum >= level - LEVEL_TOL:
                return scores[order[i]]
        return math.inf

    @nb.njit(cache=True)
    def calibrate_batch_nb(Ls, queries, points, residuals, rho, levels):
        K = queries.shape[0]
        out = np.empty(K)
        for k in range(K):
            s = mahalanobis_scores_nb(Ls[k], residuals)
            w = rho_weights_nb(points, queries[k], rho)
            total = 1.0 + w.sum()
            out[k] = weighted_quantile_nb(s, w / total, 1.0 / total, levels[k])
        return out


def _pick(nb_fn_name, np_fn):
    if USE_NUMBA:
        return globals()[nb_fn_name]
    return np_fn


def _as_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def mahalanobis_scores(L, residuals):
    fn = _pick("mahalanobis_scores_nb", mahalanobis_scores_np)
    return fn(_as_f64(L), _as_f64(residuals))


def rho_weights(points, query, rho):
    fn = _pick("rho_weights_nb", rho_weights_np)
    return fn(_as_f64(points), _as_f64(query), float(rho))


def weighted_quantile(scores, weights, test_weight, level):
    fn = _pick("weighted_quantile_nb", weighted_quantile_np)
    return float(fn(_as_f64(scores), _as_f64(weights), float(test_weight), float(level)))


def calibrate_batch(Ls, queries, points, residuals, rho, levels):
    fn = _pick("calibrate_batch_nb", calibrate_batch_np)
    return fn(_as_f64(Ls), _as_f64(queries), _as_f64(points), _as_f64(residuals),
              float(rho), _as_f64(levels))


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if USE_NUMBA else "numpy"
