"""Receding-horizon planner: conformal calibration, SLS tubes and one SCP
iteration per control step, plus the vanilla and fixed-ball baselines."""

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from cpsls import conformal, sls
from cpsls.dynamics import SingularityError
from cpsls.models import IdentityCovariance

log = logging.getLogger(__name__)

MODES = ("cp-ellipsoid", "cp-ball", "vmpc")

# plan / run statuses
OPTIMAL = sls.OPTIMAL
INFEASIBLE = sls.INFEASIBLE
MAX_ITER = sls.MAX_ITER
NUMERICAL = "numerical"
GOAL = "goal"
TIMEOUT = "timeout"
COLLISION = "collision"
CRASH = "crash"


@dataclass
class ActiveConfig:
    enabled: bool = False
    n_reps: int = 800
    G: float = 200.0
    beta: float = 3.0
    weight: float = 1000.0
    pos_idx: tuple = (0, 1)
    goal_idx: tuple = (0, 1, 3)  # goal kernel uses (p_x, p_y, v)
    seed: int = 0


@dataclass
class MpcConfig:
    n_x: int
    n_u: int
    T: int = 15
    alpha_k: float = 0.1 / 15
    mode: str = "cp-ellipsoid"
    Q_f: np.ndarray = None
    Q_s: np.ndarray = None
    Q: np.ndarray = None
    R: np.ndarray = None
    # square roots of the tube-volume weights
    P_tube_sqrt: np.ndarray = None
    Q_tube_sqrt: np.ndarray = None
    R_tube_sqrt: np.ndarray = None
    rho: float = 0.97
    goal: np.ndarray = None
    goal_idx: tuple = (0, 1)
    goal_radius: float = 0.1
    max_steps: int = 150
    stop_at_goal: bool = True
    warmup_iters: int = 5
    trust_radius: float = 1.0
    trust_halvings: int = 4
    penalty: float = 1e4
    u_lo: np.ndarray = None
    u_hi: np.ndarray = None
    u_ref: np.ndarray = None  # control the R term is measured from (e.g. hover thrust)
    nearest: int = None
    active: ActiveConfig = field(default_factory=ActiveConfig)

    def __post_init__(self):
        n_x, n_u = self.n_x, self.n_u
        if self.T < 2:
            raise ValueError("horizon T must be at least 2 (one control step)")
        if not 0.0 < self.alpha_k < 1.0:
            raise ValueError("alpha_k must lie in (0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.rho <= 1.0:
            raise ValueError("rho must lie in (0, 1]")

        def mat(a, n, default):
            a = default if a is None else np.asarray(a, dtype=float)
            return np.diag(a) if a.ndim == 1 else a

        self.Q_f = mat(self.Q_f, n_x, np.eye(n_x))
        self.Q_s = mat(self.Q_s, n_x, np.zeros((n_x, n_x)))
        self.Q = mat(self.Q, n_x, np.zeros((n_x, n_x)))
        self.R = mat(self.R, n_u, 0.1 * np.eye(n_u))
        self.P_tube_sqrt = mat(self.P_tube_sqrt, n_x, 1e6 * np.eye(n_x))
        self.Q_tube_sqrt = mat(self.Q_tube_sqrt, n_x, 1e6 * np.eye(n_x))
        self.R_tube_sqrt = mat(self.R_tube_sqrt, n_u, 1e6 * np.eye(n_u))
        for name in ("Q_f", "Q_s", "Q"):
            M = getattr(self, name)
            if M.shape != (n_x, n_x) or np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                raise ValueError(f"{name} must be a PSD {n_x}x{n_x} matrix")
        if self.R.shape != (n_u, n_u) or np.min(np.linalg.eigvalsh(0.5 * (self.R + self.R.T))) <= 0:
            raise ValueError(f"R must be a PD {n_u}x{n_u} matrix")
        self.goal = np.zeros(n_x) if self.goal is None else np.asarray(self.goal, dtype=float)
        self.u_lo = None if self.u_lo is None else np.broadcast_to(np.asarray(self.u_lo, float), (n_u,)).copy()
        self.u_hi = None if self.u_hi is None else np.broadcast_to(np.asarray(self.u_hi, float), (n_u,)).copy()
        self.u_ref = np.zeros(n_u) if self.u_ref is None else np.broadcast_to(np.asarray(self.u_ref, float), (n_u,)).copy()
        if isinstance(self.active, dict):
            self.active = ActiveConfig(**self.active)

    def tube_weights(self):
        """Quadratic-form weights (P, Q, R), rescaled so the largest entry is O(1)."""
        s = max(np.max(np.abs(M)) for M in (self.P_tube_sqrt, self.Q_tube_sqrt, self.R_tube_sqrt))
        P, Q, R = (M / s for M in (self.P_tube_sqrt, self.Q_tube_sqrt, self.R_tube_sqrt))
        return P.T @ P, Q.T @ Q, R.T @ R


@dataclass
class PlannerModels:
    dynamics: object  # predict(x, u), jacobian(x, u)
    covariance: object = None  # cholesky(z, v); None means identity

    def cholesky(self, z, v):
        if self.covariance is None:
            return IdentityCovariance(np.asarray(z).shape[-1]).cholesky(z, v)
        return self.covariance.cholesky(z, v)


@dataclass
class Scenario:
    """Closed-loop problem instance: true plant, start, goal and constraints."""

    name: str
    true_dyn: object
    x0: np.ndarray
    goal: np.ndarray
    constraints: list = field(default_factory=list)
    obstacles: list = field(default_factory=list)  # (center, radius)
    pos_idx: tuple = (0, 1)
    envelope: object = None  # optional x -> bool, False once the plant has diverged


@dataclass
class Plan:
    z: np.ndarray
    v: np.ndarray
    response: sls.SystemResponse = None
    tube: sls.Tube = None
    status: str = OPTIMAL
    q: np.ndarray = None
    degraded: bool = False
    cost: float = np.nan

    def to_dict(self):
        return {
            "z": self.z.tolist(), "v": self.v.tolist(), "status": self.status,
            "q": None if self.q is None else [None if not math.isfinite(a) else a for a in self.q],
            "degraded": self.degraded,
            "tube": None if self.tube is None else self.tube.to_dict(),
        }


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    status: str = TIMEOUT
    scenario: str = ""
    mode: str = ""
    seed: int = 0
    plans: list = field(default_factory=list)  # log-volume proxy per plan

    def __len__(self):
        return len(self.records)

    def column(self, key):
        return np.array([r[key] for r in self.records], dtype=float)

    def to_jsonl(self, path=None, wall_time=True):
        lines = []
        for r in self.records:
            rec = dict(r)
            if not wall_time:
                rec.pop("wall_ms", None)
            lines.append(json.dumps(rec, sort_keys=True))
        lines.append(json.dumps({"summary": {"status": self.status, "scenario": self.scenario,
                                             "mode": self.mode, "seed": self.seed,
                                             "steps": len(self.records)}}, sort_keys=True))
        text = "\n".join(lines) + "\n"
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------

def _stack(z, v):
    return np.concatenate([np.asarray(z, float).ravel(), np.asarray(v, float).ravel()])


def lqr_quadratic(cfg, T=None):
    """(H, h, c) with J(w) = 0.5 w^T H w + h^T w + c for the tracking cost."""
    T = T or cfg.T
    n_x, n_u = cfg.n_x, cfg.n_u
    N = T * n_x + (T - 1) * n_u
    H = np.zeros((N, N))
    zi = lambda k: slice(k * n_x, (k + 1) * n_x)
    vi = lambda k: slice(T * n_x + k * n_u, T * n_x + (k + 1) * n_u)
    for k in range(T - 1):
        H[zi(k), zi(k)] += 2 * cfg.Q
        H[zi(k), zi(k)] += 2 * cfg.Q_s
        H[zi(k + 1), zi(k + 1)] += 2 * cfg.Q_s
        H[zi(k), zi(k + 1)] -= 2 * cfg.Q_s
        H[zi(k + 1), zi(k)] -= 2 * cfg.Q_s
        H[vi(k), vi(k)] += 2 * cfg.R
    H[zi(T - 1), zi(T - 1)] += 2 * cfg.Q_f
    h = np.zeros(N)
    h[zi(T - 1)] = -2 * cfg.Q_f @ cfg.goal
    c = float(cfg.goal @ cfg.Q_f @ cfg.goal)
    for k in range(T - 1):
        h[vi(k)] = -2 * cfg.R @ cfg.u_ref
    c += (T - 1) * float(cfg.u_ref @ cfg.R @ cfg.u_ref)
    return H, h, c


def lqr_cost(z, v, cfg):
    """Stage cost over k < T-1 plus the terminal goal cost."""
    z = np.asarray(z, float)
    v = np.asarray(v, float)
    J = 0.0
    for k in range(z.shape[0] - 1):
        dz = z[k + 1] - z[k]
        du = v[k] - cfg.u_ref
        J += z[k] @ cfg.Q @ z[k] + dz @ cfg.Q_s @ dz + du @ cfg.R @ du
    e = z[-1] - cfg.goal
    return float(J + e @ cfg.Q_f @ e)


def tube_cost(resp, sqrt_weights):
    """Weighted squared-Frobenius tube size; terminal step uses P."""
    Ps, Qs, Rs = sqrt_weights
    T = resp.T
    J = 0.0
    for j in range(T - 1):
        J += np.sum((Ps @ resp.Phi_x[T - 1, j]) ** 2)
        for k in range(T - 1):
            J += np.sum((Qs @ resp.Phi_x[k, j]) ** 2) + np.sum((Rs @ resp.Phi_u[k, j]) ** 2)
    return float(J)


def kmeans_representatives(points, n_reps, seed=0, iters=50):
    """Lloyd iterations from a seeded sample of distinct points."""
    pts = np.asarray(points, dtype=float)
    if pts.shape[0] == 0:
        raise ValueError("no points to cluster")
    distinct = np.unique(pts, axis=0)
    if n_reps >= distinct.shape[0]:
        return distinct
    rng = np.random.default_rng(seed)
    C = distinct[rng.choice(distinct.shape[0], n_reps, replace=False)].copy()
    for _ in range(iters):
        d2 = np.sum(pts ** 2, 1)[:, None] - 2 * pts @ C.T + np.sum(C ** 2, 1)[None]
        lab = np.argmin(d2, axis=1)
        sums = np.zeros_like(C)
        np.add.at(sums, lab, pts)
        cnt = np.bincount(lab, minlength=C.shape[0])
        newC = np.where(cnt[:, None] > 0, sums / np.maximum(cnt, 1)[:, None], C)
        if np.allclose(newC, C, atol=1e-12, rtol=0):
            break
        C = newC
    return C


def _active_terms(z, centroids, goal, ac):
    """Per-step kernel sum S_k and its gradient w.r.t. z_k (full state)."""
    z = np.asarray(z, float)
    P = z[:, list(ac.pos_idx)]
    Lc = centroids.shape[0]
    norm = Lc + ac.G
    gsel = list(ac.goal_idx)
    dg = z[:, gsel] - np.asarray(goal, float)[gsel]
    kg = np.exp(-ac.beta * np.sum(dg ** 2, axis=1))
    diff = P[:, None, :] - centroids[None]
    kc = np.exp(-ac.beta * np.sum(diff ** 2, axis=2))
    S = (ac.G * kg + kc.sum(axis=1)) / norm
    grad = np.zeros_like(z)
    grad[:, gsel] += (ac.G * kg)[:, None] * (-2 * ac.beta) * dg / norm
    grad[:, list(ac.pos_idx)] += np.einsum("kj,kjd->kd", kc, -2 * ac.beta * diff) / norm
    return S, grad


def active_cost(z, v, centroids, goal, cfg):
    """Unweighted sum over nominal states of exp(-normalised kernel mass)."""
    S, _ = _active_terms(z, np.asarray(centroids, float), goal, cfg.active if hasattr(cfg, "active") else cfg)
    return float(np.sum(np.exp(-S)))


class PlanCost:
    """Tracking cost plus the optional weighted active-uncertainty term."""

    def __init__(self, cfg, centroids=None):
        self.cfg = cfg
        self.H, self.h, self.c = lqr_quadratic(cfg)
        self.centroids = None if centroids is None else np.asarray(centroids, float)

    @property
    def use_active(self):
        return self.cfg.active.enabled and self.centroids is not None

    def value(self, z, v):
        w = _stack(z, v)
        J = 0.5 * w @ self.H @ w + self.h @ w + self.c
        if self.use_active:
            J += self.cfg.active.weight * active_cost(z, v, self.centroids, self.cfg.goal, self.cfg)
        return float(J)

    def quadratic(self, z, v):
        w = _stack(z, v)
        grad = self.H @ w + self.h
        hess = self.H.copy()
        if self.use_active:
            ac = self.cfg.active
            S, dS = _active_terms(z, self.centroids, self.cfg.goal, ac)
            r = np.exp(-0.5 * S)
            n_x = self.cfg.n_x
            for k in range(len(S)):
                sl = slice(k * n_x, (k + 1) * n_x)
                jr = -0.5 * r[k] * dS[k]
                grad[sl] += ac.weight * 2 * r[k] * jr
                hess[sl, sl] += ac.weight * 2 * np.outer(jr, jr)
        return grad, hess


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def rollout(model, x0, v):
    z = np.empty((v.shape[0] + 1, np.asarray(x0).size))
    z[0] = x0
    for k in range(v.shape[0]):
        z[k + 1] = model.predict(z[k], v[k])
    return z


def initial_plan(x0, cfg, models):
    """Rollout under the learned model holding the centre of the control box
    (zero where a side is unbounded)."""
    lo = np.zeros(cfg.n_u) if cfg.u_lo is None else np.where(np.isfinite(cfg.u_lo), cfg.u_lo, 0.0)
    hi = np.zeros(cfg.n_u) if cfg.u_hi is None else np.where(np.isfinite(cfg.u_hi), cfg.u_hi, 0.0)
    v = np.tile(0.5 * (lo + hi), (cfg.T - 1, 1))
    return Plan(z=rollout(models.dynamics, np.asarray(x0, float), v), v=v)


def shift_plan(plan, x0, models):
    """Drop the first step, repeat the last control and re-roll from x0."""
    v = np.concatenate([plan.v[1:], plan.v[-1:]], axis=0)
    return Plan(z=rollout(models.dynamics, np.asarray(x0, float), v), v=v, response=plan.response,
                tube=plan.tube, status=plan.status, q=plan.q, degraded=plan.degraded)


def control_constraints(cfg):
    out = []
    for i in range(cfg.n_u):
        lo = None if cfg.u_lo is None else cfg.u_lo[i]
        hi = None if cfg.u_hi is None else cfg.u_hi[i]
        out += sls.box_constraints(lo, hi, i, cfg.n_x, cfg.n_u, on="u")
    return out


def disturbance_matrices(cfg, models, error_set, z, v):
    """Per-step E_k for the configured mode; returns (E, q, degraded)."""
    n_x, T = cfg.n_x, cfg.T
    if cfg.mode == "vmpc":
        return np.zeros((T - 1, n_x, n_x)), np.zeros(T - 1), False
    degraded = False
    if cfg.mode == "cp-ball":
        q = conformal.ball_variant(error_set, z[0], v[0], cfg.alpha_k, cfg.nearest)
        if not math.isfinite(q):
            q = conformal.max_finite_score(error_set, np.eye(n_x))
            degraded = True
        V = conformal.v_matrix(q, np.eye(n_x))
        return np.broadcast_to(V, (T - 1, n_x, n_x)).copy(), np.full(T - 1, q), degraded
    Ls = np.asarray(models.cholesky(z[:-1], v))
    q = conformal.calibrate_horizon(error_set, Ls, z[:-1], v, cfg.alpha_k, cfg.nearest)
    E = np.empty((T - 1, n_x, n_x))
    for k in range(T - 1):
        if not math.isfinite(q[k]):
            q[k] = conformal.max_finite_score(error_set, Ls[k])
            degraded = True
        E[k] = conformal.v_matrix(q[k], Ls[k])
    return E, q, degraded


def _violation(constraints, resp, z, v):
    """Sum over steps of the worst tightened-constraint violation."""
    T = z.shape[0]
    worst = np.zeros(T)
    for c in constraints:
        for k in range(1 if c.state_only else 0, T if c.state_only else T - 1):
            worst[k] = max(worst[k], sls.tighten(c, resp, z, v, k))
    return float(worst.sum())


def solve_plan(x0, prev, cfg, models, error_set, constraints=(), cost=None, iters=1):
    """One (or ``iters``) Riccati/QP alternations from the shifted plan ``prev``."""
    cost = cost or PlanCost(cfg)
    constraints = list(constraints) + control_constraints(cfg)
    x0 = np.asarray(x0, float)
    plan = prev
    z, v = plan.z.copy(), plan.v.copy()
    z[0] = x0
    weights = cfg.tube_weights()
    for _ in range(iters):
        A, B = sls.linearize_trajectory(models.dynamics, z, v)
        E, q, degraded = disturbance_matrices(cfg, models, error_set, z, v)
        ltv = sls.LtvModel(A, B, E)
        if cfg.mode == "vmpc":
            resp = sls.SystemResponse.zeros(cfg.T, cfg.n_x, cfg.n_u)
        else:
            try:
                resp = sls.riccati_phi(ltv, weights)
            except np.linalg.LinAlgError as exc:
                log.warning("Riccati failed: %s", exc)
                return Plan(z, v, plan.response, plan.tube, NUMERICAL, q, degraded)
        defects = rollout_defects(models.dynamics, z, v)
        merit0 = cost.value(z, v) + cfg.penalty * _violation(constraints, resp, z, v)
        radius = cfg.trust_radius
        best = None
        status = OPTIMAL
        for _ in range(cfg.trust_halvings + 1):
            sub = sls.scp_subproblem((z, v), ltv, resp, constraints, cost, x0, defects, radius,
                                     slack_penalty=cfg.penalty)
            if sub.status != OPTIMAL:
                status = sub.status
                break
            v_new = v + sub.dv
            z_new = rollout(models.dynamics, x0, v_new)
            if not np.all(np.isfinite(z_new)):
                radius *= 0.5
                continue
            merit = cost.value(z_new, v_new) + cfg.penalty * _violation(constraints, resp, z_new, v_new)
            if merit <= merit0 + 1e-9 * max(1.0, abs(merit0)):
                best = (z_new, v_new)
                break
            radius *= 0.5
        if status != OPTIMAL:
            tube = sls.tube_extents(resp, (z, v))
            return Plan(z, v, resp, tube, status, q, degraded, cost.value(z, v))
        if best is not None:
            z, v = best
        tube = sls.tube_extents(resp, (z, v))
        plan = Plan(z, v, resp, tube, OPTIMAL, q, degraded, cost.value(z, v))
    return plan


def rollout_defects(model, z, v):
    return np.array([model.predict(z[k], v[k]) - z[k + 1] for k in range(v.shape[0])])


def _obstacle_distance(x, scenario):
    if not scenario.obstacles:
        return math.inf
    p = np.asarray(x)[list(scenario.pos_idx)]
    return min(float(np.linalg.norm(p - np.asarray(c))) for c, _ in scenario.obstacles)


def _collides(x, scenario):
    p = np.asarray(x)[list(scenario.pos_idx)]
    return any(np.linalg.norm(p - np.asarray(c)) < r for c, r in scenario.obstacles)


def at_goal(x, goal, cfg):
    idx = list(cfg.goal_idx)
    return float(np.linalg.norm(np.asarray(x)[idx] - np.asarray(goal)[idx])) <= cfg.goal_radius


def step_margin(cfg, models, error_set, x, u, x_next):
    """Signed ellipsoid margin of the realised one-step error (<= 0 is covered)."""
    L = np.eye(cfg.n_x) if cfg.mode == "cp-ball" else np.asarray(models.cholesky(x, u))
    q = conformal.calibrate(error_set, L, x, u, cfg.alpha_k, cfg.nearest)
    s = conformal.score(L, np.asarray(x_next) - models.dynamics.predict(x, u))
    return s - q, q


def run_mpc(scenario, cfg, models, error_set, seed=0, centroids=None):
    """Closed-loop run on the true plant; ``error_set`` is augmented in place."""
    x = np.asarray(scenario.x0, dtype=float)
    runlog = RunLog(scenario=scenario.name, mode=cfg.mode, seed=seed)
    if cfg.active.enabled and centroids is None:
        pts = error_set.states[: error_set.n_offline][:, list(cfg.active.pos_idx)]
        centroids = kmeans_representatives(pts, cfg.active.n_reps, cfg.active.seed)
    cost = PlanCost(cfg, centroids)
    if at_goal(x, scenario.goal, cfg):
        runlog.status = GOAL
        return runlog

    plan = initial_plan(x, cfg, models)
    t0 = time.perf_counter()
    plan = solve_plan(x, plan, cfg, models, error_set, scenario.constraints, cost, iters=cfg.warmup_iters)
    warm_ms = (time.perf_counter() - t0) * 1e3
    log.debug("warm-up %.1f ms, status %s", warm_ms, plan.status)

    for t in range(cfg.max_steps):
        t0 = time.perf_counter()
        if t > 0:
            plan = shift_plan(plan, x, models)
            plan = solve_plan(x, plan, cfg, models, error_set, scenario.constraints, cost)
        wall = (time.perf_counter() - t0) * 1e3 + (warm_ms if t == 0 else 0.0)
        u = plan.v[0].copy()
        if cfg.u_lo is not None:
            u = np.maximum(u, cfg.u_lo)
        if cfg.u_hi is not None:
            u = np.minimum(u, cfg.u_hi)
        try:
            x_next = np.asarray(scenario.true_dyn.step(x, u), dtype=float)
        except (SingularityError, ValueError) as exc:
            log.warning("true plant failed: %s", exc)
            runlog.status = CRASH
            break
        if not np.all(np.isfinite(x_next)) or (scenario.envelope is not None
                                                and not scenario.envelope(x_next)):
            runlog.status = CRASH
            break
        margin, q = step_margin(cfg, models, error_set, x, u, x_next)
        pred_err = float(np.linalg.norm(x_next - models.dynamics.predict(x, u)))
        conformal.online_update(error_set, x, u, x_next, models.dynamics)
        logvol = plan.tube.log_volume() if plan.tube is not None and cfg.mode != "vmpc" else float("nan")
        runlog.plans.append(logvol)
        rec = {
            "t": t,
            "x": x.tolist(),
            "u": u.tolist(),
            "x_next": x_next.tolist(),
            "wall_ms": wall,
            "pred_err": pred_err,
            "margin": margin if math.isfinite(margin) else None,
            "q": q if math.isfinite(q) else None,
            "obstacle_dist": min(_obstacle_distance(x, scenario), _obstacle_distance(x_next, scenario)),
            "log_volume": logvol,
            "plan_status": plan.status,
            "degraded": bool(plan.degraded),
        }
        runlog.records.append(rec)
        x = x_next
        if _collides(x, scenario):
            runlog.status = COLLISION
            break
        if cfg.stop_at_goal and at_goal(x, scenario.goal, cfg):
            runlog.status = GOAL
            break
    else:
        runlog.status = GOAL if at_goal(x, scenario.goal, cfg) and not cfg.stop_at_goal else TIMEOUT
    return runlog


__all__ = [
    "MODES", "ActiveConfig", "MpcConfig", "PlannerModels", "Scenario", "Plan", "RunLog",
    "lqr_quadratic", "lqr_cost", "tube_cost", "kmeans_representatives", "active_cost", "PlanCost",
    "rollout", "initial_plan", "shift_plan", "solve_plan", "disturbance_matrices", "run_mpc",
    "step_margin", "at_goal",
]
