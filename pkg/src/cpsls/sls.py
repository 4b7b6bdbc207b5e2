"""System-level synthesis for the linearised error dynamics.

Index convention (0-based): states z_0..z_{T-1}, controls v_0..v_{T-2},
disturbances xi_0..xi_{T-2}; xi_j first enters x_{j+1}. Responses are stored
densely as ``Phi_x[k, j]`` (n_x x n_x) and ``Phi_u[k, j]`` (n_u x n_x), zero
unless j < k. ``Phi_u[T-1]`` is zero since there is no control at the last
step.
"""

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from cpsls.qp import INFEASIBLE, MAX_ITER, OPTIMAL, solve_qp

# response feasibility tolerance used by the rollout guard
RESPONSE_TOL = 1e-8


class RiccatiError(np.linalg.LinAlgError):
    pass


class InfeasibleResponseError(ValueError):
    pass


@dataclass
class LtvModel:
    A: np.ndarray  # (T-1, n_x, n_x)
    B: np.ndarray  # (T-1, n_x, n_u)
    E: np.ndarray  # (T-1, n_x, n_x)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        self.E = np.asarray(self.E, dtype=float)
        if not (self.A.shape[0] == self.B.shape[0] == self.E.shape[0]):
            raise ValueError("A, B, E must cover the same number of steps")
        if self.A.shape[1:] != (self.n_x, self.n_x) or self.E.shape[1:] != (self.n_x, self.n_x):
            raise ValueError("A and E blocks must be n_x x n_x")
        if self.B.shape[1] != self.n_x:
            raise ValueError("B blocks must have n_x rows")

    @property
    def T(self):
        return self.A.shape[0] + 1

    @property
    def n_x(self):
        return self.A.shape[1]

    @property
    def n_u(self):
        return self.B.shape[2]


@dataclass
class SystemResponse:
    Phi_x: np.ndarray  # (T, T-1, n_x, n_x)
    Phi_u: np.ndarray  # (T, T-1, n_u, n_x)
    K: np.ndarray = None  # feedback gains (T-1, n_u, n_x) when synthesised by Riccati

    @property
    def T(self):
        return self.Phi_x.shape[0]

    @classmethod
    def zeros(cls, T, n_x, n_u):
        return cls(np.zeros((T, T - 1, n_x, n_x)), np.zeros((T, T - 1, n_u, n_x)))

    def residual(self, ltv):
        """Max-abs violation of the closed-loop response identities."""
        T = self.T
        worst = 0.0
        for j in range(T - 1):
            worst = max(worst, float(np.max(np.abs(self.Phi_x[j + 1, j] - ltv.E[j]))))
            for k in range(j + 1, T - 1):
                lhs = self.Phi_x[k + 1, j]
                rhs = ltv.A[k] @ self.Phi_x[k, j] + ltv.B[k] @ self.Phi_u[k, j]
                worst = max(worst, float(np.max(np.abs(lhs - rhs))))
            # causality: nothing before the disturbance enters
            for k in range(0, j + 1):
                worst = max(worst, float(np.max(np.abs(self.Phi_x[k, j]))))
                worst = max(worst, float(np.max(np.abs(self.Phi_u[k, j]))))
        return worst

    def is_zero(self):
        return not (np.any(self.Phi_x) or np.any(self.Phi_u))

    def to_dict(self):
        return {
            "Phi_x": self.Phi_x.tolist(),
            "Phi_u": self.Phi_u.tolist(),
            "K": None if self.K is None else self.K.tolist(),
        }


@dataclass
class Tube:
    """Per-step support-function extents around the nominal trajectory."""

    z: np.ndarray
    v: np.ndarray
    state: np.ndarray  # (T, n_x)
    control: np.ndarray  # (T-1, n_u)

    def axis_lengths(self):
        return 2.0 * self.state, 2.0 * self.control

    def max_axis_length(self, k=None):
        sx, su = self.axis_lengths()
        if k is None:
            return float(max(sx.max(initial=0.0), su.max(initial=0.0)))
        m = float(sx[k].max(initial=0.0))
        if k < su.shape[0]:
            m = max(m, float(su[k].max(initial=0.0)))
        return m

    def log_volume(self, floor=1e-12):
        """Summed per-step log of the state-extent box volume (steps 1..T-1)."""
        return float(np.sum(np.log(np.maximum(self.state[1:], floor))))

    def to_dict(self):
        return {"z": self.z.tolist(), "v": self.v.tolist(),
                "state": self.state.tolist(), "control": self.control.tolist()}


def dump_debug(path, resp, tube):
    with open(path, "w") as fh:
        json.dump({"response": resp.to_dict(), "tube": tube.to_dict()}, fh)


# ---------------------------------------------------------------------------
# constraints
# ---------------------------------------------------------------------------

@dataclass
class ConstraintSpec:
    """Scalar constraint g(x, u) + b <= 0 with gradient oracle."""

    g: callable
    grad: callable  # (x, u) -> (g_x, g_u)
    b: float = 0.0
    name: str = ""
    state_only: bool = True
    g_lin: float = 0.0  # linearisation-error overbound; fixed at zero


def halfspace(a_x, a_u, b, name=""):
    """g = a_x . x + a_u . u, constraint g + b <= 0."""
    a_x = np.asarray(a_x, dtype=float)
    a_u = np.asarray(a_u, dtype=float)
    return ConstraintSpec(
        g=lambda x, u: float(a_x @ x + a_u @ u),
        grad=lambda x, u: (a_x, a_u),
        b=float(b),
        name=name,
        state_only=not np.any(a_u),
    )


def box_constraints(lo, hi, index, n_x, n_u, on="x", prefix=""):
    """lo <= w[index] <= hi as two halfspaces (w is x or u)."""
    out = []
    n = n_x if on == "x" else n_u
    e = np.zeros(n)
    e[index] = 1.0
    zero_other = np.zeros(n_u if on == "x" else n_x)
    ax, au = (e, zero_other) if on == "x" else (zero_other, e)
    if hi is not None and np.isfinite(hi):
        out.append(halfspace(ax, au, -hi, name=f"{prefix}{on}{index}<={hi}"))
    if lo is not None and np.isfinite(lo):
        out.append(halfspace(-ax, -au, lo, name=f"{prefix}{on}{index}>={lo}"))
    return out


def sphere_obstacle(center, radius, pos_index, n_u):
    """Keep the position block outside a ball: g = radius - ||p - c||."""
    c = np.asarray(center, dtype=float)
    idx = np.asarray(pos_index)

    def g(x, u):
        return float(radius - np.linalg.norm(x[idx] - c))

    def grad(x, u):
        d = x[idx] - c
        nrm = np.linalg.norm(d)
        gx = np.zeros(x.shape[-1])
        if nrm < 1e-9:
            direction = np.zeros_like(d)
            direction[0] = 1.0
        else:
            direction = d / nrm
        gx[idx] = -direction
        return gx, np.zeros(n_u)

    return ConstraintSpec(g=g, grad=grad, b=0.0, name="obstacle", state_only=True)


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------

def linearize(model, z, v):
    """(A, B) Jacobians of the one-step map at (z, v)."""
    return model.jacobian(np.asarray(z, dtype=float), np.asarray(v, dtype=float))


def linearize_trajectory(model, zs, vs):
    A, B = [], []
    for k in range(vs.shape[0]):
        a, b = linearize(model, zs[k], vs[k])
        A.append(a)
        B.append(b)
    return np.array(A), np.array(B)


def _check_response(ltv, resp):
    scale = max(1.0, float(np.max(np.abs(resp.Phi_x), initial=0.0)))
    res = resp.residual(ltv)
    if res > RESPONSE_TOL * scale:
        raise InfeasibleResponseError(f"system response violates the SLS identities (residual {res:.3g})")


def closed_loop_rollout(ltv, resp, nominal, xi, check=True):
    """x_k = z_k + sum_j Phi_x[k,j] xi_j and u_k = v_k + sum_j Phi_u[k,j] xi_j.

    ``xi`` has shape (..., T-1, n_x); returns (x (..., T, n_x), u (..., T-1, n_u)).
    """
    if check:
        _check_response(ltv, resp)
    z, v = nominal
    xi = np.asarray(xi, dtype=float)
    x = z + np.einsum("kjab,...jb->...ka", resp.Phi_x, xi)
    u = v + np.einsum("kjab,...jb->...ka", resp.Phi_u[:-1], xi)
    return x, u


def simulate_ltv(ltv, x0, u_fn, xi):
    """Direct forward simulation of x+ = A x + B u + E xi (oracle for rollouts)."""
    T = ltv.T
    xi = np.asarray(xi, dtype=float)
    x = np.empty(xi.shape[:-2] + (T, ltv.n_x))
    u = np.empty(xi.shape[:-2] + (T - 1, ltv.n_u))
    x[..., 0, :] = x0
    for k in range(T - 1):
        u[..., k, :] = u_fn(k, x[..., : k + 1, :], u[..., :k, :])
        x[..., k + 1, :] = (
            x[..., k, :] @ ltv.A[k].T + u[..., k, :] @ ltv.B[k].T + xi[..., k, :] @ ltv.E[k].T
        )
    return x, u


def tube_extents(resp, nominal):
    """Row-norm sums: the support of the Minkowski sum of Phi blocks along +-e_i."""
    z, v = nominal
    sx = np.sum(np.linalg.norm(resp.Phi_x, axis=-1), axis=1)
    su = np.sum(np.linalg.norm(resp.Phi_u[:-1], axis=-1), axis=1)
    return Tube(z=np.asarray(z, dtype=float), v=np.asarray(v, dtype=float), state=sx, control=su)


def tightening_margin(gx, gu, resp, k):
    rows = np.einsum("a,jab->jb", gx, resp.Phi_x[k]) + np.einsum("a,jab->jb", gu, resp.Phi_u[k])
    return float(np.sum(np.linalg.norm(rows, axis=-1)))


def _uv_at(v, k, n_u):
    if k < v.shape[0]:
        return v[k]
    return np.zeros(n_u)


def tighten(c, resp, z, v, k):
    """Left-hand side of the tightened constraint at step k (enforce <= 0)."""
    z = np.asarray(z, dtype=float)
    v = np.asarray(v, dtype=float)
    uk = _uv_at(v, k, v.shape[-1])
    gx, gu = c.grad(z[k], uk)
    return tightening_margin(np.asarray(gx), np.asarray(gu), resp, k) + c.g(z[k], uk) + c.b + c.g_lin


def riccati_gains(ltv, P, Q, R):
    """Backward time-varying LQR recursion; returns gains K_k with u = K_k x."""
    T = ltv.T
    Pk = np.asarray(P, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    K = np.zeros((T - 1, ltv.n_u, ltv.n_x))
    for k in range(T - 2, -1, -1):
        A, B = ltv.A[k], ltv.B[k]
        S = R + B.T @ Pk @ B
        S = 0.5 * (S + S.T)
        try:
            fac = cho_factor(S, lower=True)
        except np.linalg.LinAlgError as exc:
            raise RiccatiError(f"R + B^T P B lost positive definiteness at step {k}") from exc
        K[k] = -cho_solve(fac, B.T @ Pk @ A)
        Pk = Q + A.T @ Pk @ (A + B @ K[k])
        Pk = 0.5 * (Pk + Pk.T)
        if not np.all(np.isfinite(Pk)):
            raise RiccatiError(f"Riccati iterate diverged at step {k}")
    return K


def riccati_phi(ltv, weights):
    """System response of the LQR-feedback closed loop for the tube cost.

    ``weights = (P, Q, R)`` are the quadratic-form weights (P = P_sqrt^T P_sqrt, ...).
    """
    P, Q, R = weights
    T, n_x, n_u = ltv.T, ltv.n_x, ltv.n_u
    K = riccati_gains(ltv, P, Q, R)
    resp = SystemResponse.zeros(T, n_x, n_u)
    for j in range(T - 1):
        resp.Phi_x[j + 1, j] = ltv.E[j]
        for k in range(j + 1, T - 1):
            resp.Phi_u[k, j] = K[k] @ resp.Phi_x[k, j]
            resp.Phi_x[k + 1, j] = ltv.A[k] @ resp.Phi_x[k, j] + ltv.B[k] @ resp.Phi_u[k, j]
    resp.K = K
    return resp


def constant_response(ltv, V, weights):
    """Riccati response with E_k = V for every k (fixed-ball variant)."""
    E = np.broadcast_to(np.asarray(V, dtype=float), ltv.E.shape).copy()
    return riccati_phi(LtvModel(ltv.A, ltv.B, E), weights)


# ---------------------------------------------------------------------------
# convex subproblem
# ---------------------------------------------------------------------------

@dataclass
class SubproblemResult:
    dz: np.ndarray
    dv: np.ndarray
    status: str
    predicted_cost: float = np.nan
    iterations: int = 0


def condense(ltv, e0, defects):
    """dz = Gam dv + gam for dz_0 = e0, dz_{k+1} = A_k dz_k + B_k dv_k + defect_k."""
    T, n_x, n_u = ltv.T, ltv.n_x, ltv.n_u
    m = (T - 1) * n_u
    Gam = np.zeros((T, n_x, m))
    gam = np.zeros((T, n_x))
    gam[0] = e0
    for k in range(T - 1):
        Gam[k + 1] = ltv.A[k] @ Gam[k]
        Gam[k + 1][:, k * n_u:(k + 1) * n_u] += ltv.B[k]
        gam[k + 1] = ltv.A[k] @ gam[k] + defects[k]
    return Gam, gam


def scp_subproblem(current, ltv, resp, constraints, cost, x0, defects=None,
                   trust_radius=1.0, max_iter=500, slack_penalty=None):
    """One convexified step for the nominal trajectory with the response frozen.

    ``cost`` must provide ``quadratic(z, v) -> (grad, hess)`` over the stacked
    vector [z.ravel(), v.ravel()]. Tightening margins are evaluated at the
    current nominal; each constraint enters as its first-order model.

    With ``slack_penalty`` set, the constraints of each step share one
    nonnegative slack charged linearly in the objective (elastic mode), so
    only the trust region can make the QP infeasible.
    """
    z, v = (np.asarray(a, dtype=float) for a in current)
    T, n_x, n_u = ltv.T, ltv.n_x, ltv.n_u
    if defects is None:
        defects = np.zeros((T - 1, n_x))
    e0 = np.asarray(x0, dtype=float) - z[0]
    Gam, gam = condense(ltv, e0, defects)
    m = (T - 1) * n_u

    # w = [z; v] stacked; dw = M dv + m0
    M = np.concatenate([Gam.reshape(T * n_x, m), np.eye(m)], axis=0)
    m0 = np.concatenate([gam.ravel(), np.zeros(m)])
    grad, hess = cost.quadratic(z, v)
    H = M.T @ hess @ M
    H = 0.5 * (H + H.T) + 1e-9 * np.eye(m)
    g = M.T @ (hess @ m0 + grad)

    n_s = T if slack_penalty is not None else 0
    rows, rhs, slack_of = [], [], []
    for c in constraints:
        for k in range(T):
            if c.state_only and k == 0:
                continue  # z_0 is the measured state
            if not c.state_only and k == T - 1:
                continue
            uk = _uv_at(v, k, n_u)
            gx, gu = (np.asarray(a, dtype=float) for a in c.grad(z[k], uk))
            lhs0 = tightening_margin(gx, gu, resp, k) + c.g(z[k], uk) + c.b + c.g_lin
            a = gx @ Gam[k]
            if k < T - 1:
                a = a.copy()
                a[k * n_u:(k + 1) * n_u] += gu
            rows.append(a)
            rhs.append(-lhs0 - gx @ gam[k])
            slack_of.append(k if n_s else -1)
    if trust_radius is not None and np.isfinite(trust_radius):
        I = np.eye(m)
        Gz = Gam[1:].reshape(-1, m)
        gz = gam[1:].ravel()
        for block, b in ((I, np.full(m, trust_radius)), (-I, np.full(m, trust_radius)),
                         (Gz, trust_radius - gz), (-Gz, trust_radius + gz)):
            rows.extend(block)
            rhs.extend(b)
            slack_of.extend([-1] * len(b))

    if n_s:
        H = np.block([[H, np.zeros((m, n_s))], [np.zeros((n_s, m)), 1e-6 * np.eye(n_s)]])
        g = np.concatenate([g, np.full(n_s, float(slack_penalty))])
        C = np.zeros((len(rows) + n_s, m + n_s))
        if rows:
            C[: len(rows), :m] = np.array(rows)
        for i, k in enumerate(slack_of):
            if k >= 0:
                C[i, m + k] = -1.0
        C[len(rows):, m:] = -np.eye(n_s)
        d = np.concatenate([np.array(rhs, dtype=float), np.zeros(n_s)])
    else:
        C = np.array(rows) if rows else None
        d = np.array(rhs) if rhs else None
    res = solve_qp(H, g, C, d, max_iter=max_iter)
    dv = res.x[:m]
    H, g = H[:m, :m], g[:m]
    dz = (Gam @ dv) + gam
    if res.status != OPTIMAL:
        return SubproblemResult(dz, dv.reshape(T - 1, n_u), res.status, iterations=res.iterations)
    pred = float(0.5 * dv @ H @ dv + g @ dv)
    return SubproblemResult(dz, dv.reshape(T - 1, n_u), OPTIMAL, pred, res.iterations)


__all__ = [
    "LtvModel", "SystemResponse", "Tube", "ConstraintSpec", "SubproblemResult",
    "halfspace", "box_constraints", "sphere_obstacle", "linearize", "linearize_trajectory",
    "closed_loop_rollout", "simulate_ltv", "tube_extents", "tighten", "tightening_margin",
    "riccati_gains", "riccati_phi", "constant_response", "condense", "scp_subproblem",
    "RiccatiError", "InfeasibleResponseError", "OPTIMAL", "INFEASIBLE", "MAX_ITER",
]
