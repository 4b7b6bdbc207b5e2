"""Model training, error-set construction, closed-loop trials and metrics."""

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from cpsls import conformal, models as M, mpc
from cpsls.dynamics import DiscreteDynamics
from cpsls.harness import data as D
from cpsls.harness.scenarios import default_mpc_config, make_scenario, sampling_spec

log = logging.getLogger(__name__)

# desk-scale training settings
DYN_TRAIN = dict(lr=3e-3, lr_final=1e-5, epochs=300, batch_size=64)
COV_TRAIN = dict(lr=1e-3, lr_final=1e-5, epochs=100, batch_size=64)
# blend of the covariance model with the identity, per family
COV_TAU = {"car": 1.0, "quad": 0.5}


def _family(tag):
    return "quad" if tag.startswith("quad") else "car"


def train_models(splits, hidden=None, seed=0, dyn_cfg=None, cov_cfg=None, tag="car-id", restarts=3):
    """Fit f_hat on the train split and the covariance model on the
    uncertainty split residuals. Returns :class:`mpc.PlannerModels`.

    The dynamics network is trained from ``restarts`` seeds and the one with
    the lowest held-out error on the uncertainty split is kept.
    """
    hidden = hidden or M.DESK_HIDDEN[_family(tag)]
    tr = splits["train"]
    held = splits.get("uncert", tr)
    best = None
    for r in range(max(1, restarts)):
        p = M.MlpParams.init(tr.n_x + tr.n_u, hidden, tr.n_x, seed=seed + 10 * r)
        p = M.train(p, (tr.X, tr.U, tr.Y - tr.X), "mse",
                    M.TrainConfig(seed=seed + 10 * r, **(dyn_cfg or DYN_TRAIN)))
        val = M.dataset_loss(p, (held.X, held.U, held.Y - held.X))
        log.info("dynamics restart %d: held-out mse %.3g", r, val)
        if best is None or val < best[0]:
            best = (val, p)
    f_hat = M.LearnedDynamics(best[1])

    cov = None
    if "uncert" in splits:
        un = splits["uncert"]
        R = un.Y - f_hat.predict(un.X, un.U)
        cov_p = M.MlpParams.init(un.n_x + un.n_u, hidden, M.n_tril(un.n_x), seed=seed + 1, out_scale=0.01)
        cov_p = M.init_cov_bias(cov_p, R)
        cov_p = M.train(cov_p, (un.X, un.U, R), "mgnll", M.TrainConfig(seed=seed + 1, **(cov_cfg or COV_TRAIN)))
        cov = M.CovarianceModel(cov_p, tau=COV_TAU[_family(tag)])
    return mpc.PlannerModels(f_hat, cov)


def save_models(out_dir, models, **meta):
    os.makedirs(out_dir, exist_ok=True)
    M.save_params(os.path.join(out_dir, "dynamics.json"), models.dynamics.params, **meta)
    if models.covariance is not None:
        M.save_params(os.path.join(out_dir, "covariance.json"), models.covariance.params,
                      tau=models.covariance.tau, **meta)


def load_models(out_dir):
    dyn_p, _ = M.load_params(os.path.join(out_dir, "dynamics.json"))
    cov = None
    cov_path = os.path.join(out_dir, "covariance.json")
    if os.path.exists(cov_path):
        cov_p, meta = M.load_params(cov_path, expect_in=dyn_p.n_in, expect_out=M.n_tril(dyn_p.n_out))
        cov = M.CovarianceModel(cov_p, tau=float(meta.get("tau", 1.0)))
    return mpc.PlannerModels(M.LearnedDynamics(dyn_p), cov)


def build_error_set(calib, models, rho):
    return conformal.ErrorSet.from_model(calib.X, calib.U, calib.Y, models.dynamics, rho)


def generate_splits(tag, seed=0, counts=None, variant=None):
    """Train/uncertainty/calibration datasets for ``tag``."""
    spec = sampling_spec(tag, seed=seed, **(counts or {}))
    dyn = DiscreteDynamics.for_tag(tag, **(variant or {}))
    if tag == "quad-fall":
        return D.quad_trajectory_data(spec, dyn=dyn)
    return D.sample_dataset(spec, dyn)


def prepare(tag, seed=0, counts=None, hidden=None, variant=None):
    """Sample data for ``tag``, train both models and build the error set."""
    splits = generate_splits(tag, seed, counts, variant)
    models = train_models(splits, hidden=hidden, seed=seed, tag=tag)
    rho = default_mpc_config(tag).rho
    return models, build_error_set(splits["calib"], models, rho), splits


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsSummary:
    """Table-style aggregates; per-trial lists have one entry per trial."""

    wall_ms_mean: float = math.nan
    wall_ms_std: float = math.nan
    pred_err_mean: float = math.nan
    pred_err_std: float = math.nan
    min_obstacle_dist: float = math.nan  # mean over trials of each trial's minimum
    coverage: float = math.nan
    success: list = field(default_factory=list)
    trial_min_dist: list = field(default_factory=list)
    trial_coverage: list = field(default_factory=list)
    collisions: int = 0
    n_steps: int = 0

    @property
    def n_trials(self):
        return len(self.success)

    @property
    def n_success(self):
        return int(sum(self.success))

    def row(self):
        return {
            "trials": self.n_trials, "success": self.n_success, "collisions": self.collisions,
            "wall_ms_mean": self.wall_ms_mean, "wall_ms_std": self.wall_ms_std,
            "pred_err_mean": self.pred_err_mean, "pred_err_std": self.pred_err_std,
            "min_obstacle_dist": self.min_obstacle_dist, "coverage": self.coverage,
        }


def _margins(records):
    return np.array([r["margin"] if r["margin"] is not None else math.inf for r in records])


def compute_metrics(runlog, scenario=None):
    """Metrics for a single run: coverage counts steps with margin <= 0."""
    recs = runlog.records
    if not recs:
        raise ValueError("run log is empty")
    wall = np.array([r["wall_ms"] for r in recs])
    err = np.array([r["pred_err"] for r in recs])
    dist = min(r["obstacle_dist"] for r in recs)
    cov = float(np.mean(_margins(recs) <= 0.0))
    collided = runlog.status == mpc.COLLISION
    if scenario is not None and scenario.obstacles:
        collided |= any(r < 0 for r in _clearances(runlog, scenario))
    ok = runlog.status == mpc.GOAL and not collided
    return MetricsSummary(
        wall_ms_mean=float(wall.mean()), wall_ms_std=float(wall.std()),
        pred_err_mean=float(err.mean()), pred_err_std=float(err.std()),
        min_obstacle_dist=float(dist), coverage=cov, success=[bool(ok)],
        trial_min_dist=[float(dist)], trial_coverage=[cov], collisions=int(collided), n_steps=len(recs),
    )


def _clearances(runlog, scenario):
    pos = list(scenario.pos_idx)
    for r in runlog.records:
        for key in ("x", "x_next"):
            p = np.asarray(r[key])[pos]
            for c, rad in scenario.obstacles:
                yield float(np.linalg.norm(p - np.asarray(c)) - rad)


def merge_metrics(parts, logs=None):
    """Pool per-trial summaries; step-level statistics are pooled over steps."""
    out = MetricsSummary()
    for p in parts:
        out.success += p.success
        out.trial_min_dist += p.trial_min_dist
        out.trial_coverage += p.trial_coverage
        out.collisions += p.collisions
        out.n_steps += p.n_steps
    logs = [lg for lg in (logs or []) if lg.records]
    if logs:
        wall = np.concatenate([lg.column("wall_ms") for lg in logs])
        err = np.concatenate([lg.column("pred_err") for lg in logs])
        margins = np.concatenate([_margins(lg.records) for lg in logs])
        out.wall_ms_mean, out.wall_ms_std = float(wall.mean()), float(wall.std())
        out.pred_err_mean, out.pred_err_std = float(err.mean()), float(err.std())
        out.coverage = float(np.mean(margins <= 0.0))
    dists = [d for d in out.trial_min_dist if not math.isnan(d)]
    if dists:
        out.min_obstacle_dist = float(np.mean(dists))
    return out


def sustained_coverage_step(runlog, tail=20):
    """First step from which every later margin is <= 0, or None.

    Returns None unless the run ends with at least ``tail`` covered steps.
    """
    m = _margins(runlog.records) <= 0.0
    if m.size < tail or not m[-tail:].all():
        return None
    bad = np.flatnonzero(~m)
    return int(bad[-1] + 1) if bad.size else 0


# ---------------------------------------------------------------------------
# trials
# ---------------------------------------------------------------------------

def run_trials(tag, mode, seeds, models, error_set, cfg_overrides=None, centroids=None, variant=None):
    """One closed-loop run per seed; each starts from a fresh copy of ``error_set``."""
    logs, parts = [], []
    for seed in seeds:
        scn = make_scenario(tag, seed, **(variant or {}))
        cfg = default_mpc_config(tag, mode, scn.goal, **(cfg_overrides or {}))
        es = error_set.copy()
        runlog = mpc.run_mpc(scn, cfg, models, es, seed=seed, centroids=centroids)
        log.info("%s %s seed %d: %s after %d steps", tag, mode, seed, runlog.status, len(runlog))
        logs.append(runlog)
        if runlog.records:
            parts.append(compute_metrics(runlog, scn))
        else:
            parts.append(MetricsSummary(success=[runlog.status == mpc.GOAL], trial_min_dist=[math.nan],
                                        trial_coverage=[math.nan]))
    return logs, merge_metrics(parts, logs)


def ood_adaptation(models, pool, sizes=(2250, 4250), seeds=range(10), rho=0.97, steps=60, tail=20):
    """Calibration-size study on the OOD car.

    For each seed a random permutation of ``pool`` gives nested calibration
    subsets of every size in ``sizes``. Returns {size: [RunLog]} and
    {size: [first step of sustained coverage or None]}.
    """
    logs = {n: [] for n in sizes}
    onset = {n: [] for n in sizes}
    for seed in seeds:
        perm = np.random.default_rng([seed, 31]).permutation(len(pool))
        for n in sizes:
            if n > len(pool):
                raise ValueError(f"calibration pool has {len(pool)} points, {n} requested")
            idx = perm[:n]
            es = build_error_set(D.Dataset(pool.X[idx], pool.U[idx], pool.Y[idx]), models, rho)
            scn = make_scenario("car-ood-attract", seed)
            cfg = default_mpc_config("car-ood-attract", "cp-ellipsoid", scn.goal, rho=rho,
                                     stop_at_goal=False, max_steps=steps)
            runlog = mpc.run_mpc(scn, cfg, models, es, seed=seed)
            logs[n].append(runlog)
            onset[n].append(sustained_coverage_step(runlog, tail))
    return logs, onset


@dataclass
class ExperimentConfig:
    scenario: str = "car-id"
    modes: tuple = ("cp-ellipsoid",)
    trials: int = 10
    seed: int = 0
    out_dir: str = "runs"
    model_dir: str = None  # trained models; trained on the fly when None
    calib_path: str = None  # calibration file; built from fresh data when None
    counts: dict = field(default_factory=dict)
    mpc: dict = field(default_factory=dict)  # MpcConfig overrides
    variant: dict = field(default_factory=dict)  # dynamics constants, including dt
    hidden: int = None

    def __post_init__(self):
        for m in self.modes:
            if m not in mpc.MODES:
                raise ValueError(f"unknown mode {m!r}")
        if self.trials < 0:
            raise ValueError("trial count must be nonnegative")

    def check_paths(self):
        for p in (self.model_dir, self.calib_path):
            if p is not None and not os.path.exists(p):
                raise FileNotFoundError(f"missing artifact: {p}")


def _write_plot_data(path, logs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "t", "margin", "q", "log_volume", "pred_err", "obstacle_dist"])
        for lg in logs:
            for r in lg.records:
                w.writerow([lg.seed, r["t"], r["margin"], r["q"], r["log_volume"], r["pred_err"], r["obstacle_dist"]])


def run_experiment(cfg):
    """Run every mode over ``cfg.trials`` seeds and write summary, logs and plot data.

    Returns {mode: (logs, MetricsSummary)}.
    """
    cfg.check_paths()
    os.makedirs(cfg.out_dir, exist_ok=True)
    results = {}
    if cfg.trials > 0:
        if cfg.model_dir is not None:
            models = load_models(cfg.model_dir)
            error_set = None
        else:
            models, error_set, _ = prepare(cfg.scenario, cfg.seed, cfg.counts, cfg.hidden, cfg.variant)
        rho = cfg.mpc.get("rho", default_mpc_config(cfg.scenario).rho)
        if cfg.calib_path is not None:
            error_set = conformal.load_error_set(cfg.calib_path, rho=rho)
        if error_set is None:
            raise FileNotFoundError("a calibration file is required alongside pretrained models")
        seeds = [cfg.seed + i for i in range(cfg.trials)]
        for mode in cfg.modes:
            logs, summary = run_trials(cfg.scenario, mode, seeds, models, error_set, cfg.mpc,
                                       variant=cfg.variant)
            results[mode] = (logs, summary)
            for lg in logs:
                lg.to_jsonl(os.path.join(cfg.out_dir, f"{cfg.scenario}_{mode}_seed{lg.seed}.jsonl"))
            _write_plot_data(os.path.join(cfg.out_dir, f"{cfg.scenario}_{mode}_series.csv"), logs)

    with open(os.path.join(cfg.out_dir, "summary.csv"), "w", newline="") as fh:
        cols = ["scenario", "mode"] + list(MetricsSummary().row())
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for mode, (_, s) in results.items():
            w.writerow({"scenario": cfg.scenario, "mode": mode, **s.row()})
    with open(os.path.join(cfg.out_dir, "summary.json"), "w") as fh:
        json.dump({m: asdict(s) for m, (_, s) in results.items()}, fh, indent=1, default=float)
    return results


def any_failed(results):
    """True when some trial ended infeasible, numerically failed or timed out."""
    bad = {mpc.TIMEOUT, mpc.INFEASIBLE, mpc.NUMERICAL, mpc.CRASH}
    return any(lg.status in bad for logs, _ in results.values() for lg in logs)
