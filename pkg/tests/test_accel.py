import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpsls import _accel

needs_numba = pytest.mark.skipif(not _accel.HAS_NUMBA, reason="numba not installed")


def random_batch(rng, K, N, n, d):
    A = rng.normal(size=(K, n, n))
    Ls = np.linalg.cholesky(A @ A.transpose(0, 2, 1) + 0.5 * np.eye(n))
    return (Ls, rng.normal(size=(K, d)), rng.normal(size=(N, d)), rng.normal(size=(N, n)),
            float(rng.uniform(0.05, 1.0)), rng.uniform(0.5, 0.99, K))


@needs_numba
@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 6), st.integers(0, 80), st.integers(1, 5))
def test_numba_matches_numpy(seed, K, N, n):
    args = random_batch(np.random.default_rng(seed), K, N, n, n + 2)
    a = _accel.calibrate_batch_np(*args)
    b = _accel.calibrate_batch_nb(*args)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    np.testing.assert_array_equal(np.isinf(a), np.isinf(b))


@needs_numba
def test_kernel_parts_match():
    rng = np.random.default_rng(0)
    Ls, Q, P, R, rho, _ = random_batch(rng, 1, 50, 3, 4)
    np.testing.assert_allclose(_accel.mahalanobis_scores_nb(Ls[0], R), _accel.mahalanobis_scores_np(Ls[0], R),
                               rtol=1e-12)
    np.testing.assert_allclose(_accel.rho_weights_nb(P, Q[0], rho), _accel.rho_weights_np(P, Q[0], rho),
                               rtol=1e-12)
    s, w = rng.uniform(size=20), rng.uniform(size=20) / 25
    for level in (0.1, 0.5, 0.79, 0.99):
        assert _accel.weighted_quantile_nb(s, w, 0.2, level) == _accel.weighted_quantile_np(s, w, 0.2, level)


def test_env_flag_selects_numpy():
    env = dict(os.environ, CPSLS_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from cpsls import _accel; print(_accel.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
