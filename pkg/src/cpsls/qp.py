"""Dense strictly-convex QP via the Goldfarb-Idnani dual active-set method.

    minimise   0.5 x^T H x + g^T x
    subject to C x <= d

The dual method starts from the unconstrained minimiser and adds violated
constraints one at a time, so it needs no feasible starting point and
detects infeasibility when a violated constraint cannot be satisfied.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


@dataclass
class QPResult:
    x: np.ndarray
    status: str
    active: list = field(default_factory=list)
    multipliers: np.ndarray = None
    iterations: int = 0

    @property
    def ok(self):
        return self.status == OPTIMAL


def solve_qp(H, g, C=None, d=None, max_iter=500, tol=1e-9):
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.size
    fac = cho_factor(H, lower=True)
    x = -cho_solve(fac, g)
    if C is None or len(C) == 0:
        return QPResult(x, OPTIMAL, [], np.zeros(0), 0)

    # constraints in the a_i^T x >= b_i form
    Aall = -np.asarray(C, dtype=float).reshape(-1, n)
    b = -np.asarray(d, dtype=float).ravel()
    HinvAT = cho_solve(fac, Aall.T)  # n x m
    scale = np.maximum(np.linalg.norm(Aall, axis=1), 1.0)

    active = []
    u = np.zeros(0)
    it = 0
    while True:
        s = (Aall @ x - b) / scale
        if active:
            s[active] = np.inf
        p = int(np.argmin(s))
        if s[p] >= -tol:
            return QPResult(x, OPTIMAL, active, u, it)
        u_p = 0.0
        while True:
            it += 1
            if it > max_iter:
                return QPResult(x, MAX_ITER, active, u, it)
            n_p = Aall[p]
            if active:
                N = Aall[active]
                M = N @ HinvAT[:, active]
                r = np.linalg.solve(M, N @ HinvAT[:, p])
                z = HinvAT[:, p] - HinvAT[:, active] @ r
            else:
                r = np.zeros(0)
                z = HinvAT[:, p]

            t1, k_drop = np.inf, None
            for j in range(len(active)):
                if r[j] > 1e-12:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, k_drop = ratio, j
            zn = float(z @ n_p)
            slack = float(n_p @ x - b[p])
            if zn > 1e-12 * max(1.0, float(n_p @ n_p)):
                t2 = -slack / zn
            else:
                t2 = np.inf

            t = min(t1, t2)
            if not np.isfinite(t):
                return QPResult(x, INFEASIBLE, active, u, it)
            if not np.isfinite(t2):
                # partial step in dual space only
                u = u - t * r
                u_p += t
                active.pop(k_drop)
                u = np.delete(u, k_drop)
                continue
            x = x + t * z
            u = u - t * r
            u_p += t
            if t2 <= t1:
                active.append(p)
                u = np.append(u, u_p)
                break
            active.pop(k_drop)
            u = np.delete(u, k_drop)
