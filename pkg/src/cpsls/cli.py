"""Command-line entry point.

Exit codes: 0 success, 2 an infeasible/timed-out/crashed trial, 3 bad config.
"""

import argparse
import glob
import json
import logging
import os
import sys

from cpsls import conformal, theory
from cpsls.harness import data as D
from cpsls.harness import experiment as E
from cpsls.harness.config import ConfigError, experiment_config, load_config, validate
from cpsls.harness.scenarios import default_mpc_config

EXIT_OK = 0
EXIT_FAILED_TRIAL = 2
EXIT_BAD_CONFIG = 3

log = logging.getLogger("cpsls")


def _common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario")
    p.add_argument("--mode", action="append", help="planner mode (repeatable)")
    p.add_argument("--out-dir")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="cpsls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="sample train/uncert/calib splits")
    _common(p)
    p.add_argument("--csv", action="store_true", help="also write CSV mirrors")

    p = sub.add_parser("train", help="fit dynamics and covariance models")
    _common(p)
    p.add_argument("--data-dir")

    p = sub.add_parser("calibrate", help="build a calibration file from the calib split")
    _common(p)
    p.add_argument("--data-dir")
    p.add_argument("--model-dir")
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float, help="per-step miscoverage; reports the radius at the data mean")

    p = sub.add_parser("run", help="closed-loop trials and summary tables")
    _common(p)
    p.add_argument("--trials", type=int)
    p.add_argument("--model-dir")
    p.add_argument("--calib")
    p.add_argument("--rho", type=float)
    p.add_argument("--alpha", type=float, help="per-step miscoverage alpha_k")

    p = sub.add_parser("theory-toy", help="coverage vs rho on the unit disk")
    _common(p)
    p.add_argument("--n", type=int, nargs="+", default=[32, 128])
    p.add_argument("--rho", type=float, nargs="+", default=[0.999, 0.9, 0.5, 0.1])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--alpha", type=float, default=0.1)

    p = sub.add_parser("report", help="print summary tables found under --out-dir")
    _common(p)
    return parser


def _settings(args):
    d = load_config(args.config) if args.config else validate({})
    over = {"seed": args.seed, "scenario": args.scenario, "out_dir": args.out_dir}
    if args.mode:
        over["modes"] = args.mode
    for key in ("trials", "model_dir", "data_dir"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "calib", None) is not None:
        over["calib_path"] = args.calib
    d.update({k: v for k, v in over.items() if v is not None})
    d = validate(d)
    mpc = dict(d.get("mpc") or {})
    if getattr(args, "rho", None) is not None and args.cmd != "theory-toy":
        mpc["rho"] = args.rho
    if getattr(args, "alpha", None) is not None and args.cmd == "run":
        mpc["alpha_k"] = args.alpha
    d["mpc"] = mpc
    d.setdefault("scenario", "car-id")
    d.setdefault("seed", 0)
    d.setdefault("out_dir", "runs")
    return d


def cmd_gen_data(args, d):
    out = d.get("data_dir") or d["out_dir"]
    os.makedirs(out, exist_ok=True)
    splits = E.generate_splits(d["scenario"], d["seed"], d.get("counts"), d.get("variant"))
    for name, ds in splits.items():
        path = os.path.join(out, f"{name}.bin")
        D.save_dataset(path, ds, os.path.join(out, f"{name}.csv") if args.csv else None)
        print(f"{name}: {len(ds.X)} rows -> {path}")
    return EXIT_OK


def _load_splits(d):
    src = d.get("data_dir") or d["out_dir"]
    return {n: D.load_dataset(os.path.join(src, f"{n}.bin")) for n in D.SPLITS
            if os.path.exists(os.path.join(src, f"{n}.bin"))}


def cmd_train(args, d):
    splits = _load_splits(d)
    if "train" not in splits:
        raise FileNotFoundError("no train.bin in the data directory; run gen-data first")
    models = E.train_models(splits, hidden=d.get("hidden"), seed=d["seed"], tag=d["scenario"])
    out = d.get("model_dir") or os.path.join(d["out_dir"], "models")
    E.save_models(out, models, scenario=d["scenario"], seed=d["seed"])
    print(f"models -> {out}")
    return EXIT_OK


def cmd_calibrate(args, d):
    splits = _load_splits(d)
    if "calib" not in splits:
        raise FileNotFoundError("no calib.bin in the data directory; run gen-data first")
    models = E.load_models(d.get("model_dir") or os.path.join(d["out_dir"], "models"))
    rho = d["mpc"].get("rho", default_mpc_config(d["scenario"]).rho)
    es = E.build_error_set(splits["calib"], models, rho)
    path = os.path.join(d["out_dir"], "error_set.bin")
    os.makedirs(d["out_dir"], exist_ok=True)
    conformal.save_error_set(path, es)
    print(f"{len(es)} calibration points (rho={rho}) -> {path}")
    if args.alpha is not None:
        c = splits["calib"]
        z, v = c.X.mean(axis=0), c.U.mean(axis=0)
        L = models.covariance.cholesky(z, v) if models.covariance is not None else None
        q = conformal.ball_variant(es, z, v, args.alpha) if L is None else conformal.calibrate(es, L, z, v, args.alpha)
        print(f"radius at the data mean for alpha={args.alpha}: {q}")
    return EXIT_OK


def cmd_run(args, d):
    cfg = experiment_config(d)
    results = E.run_experiment(cfg)
    for mode, (_, s) in results.items():
        print(f"{cfg.scenario} {mode}: {s.n_success}/{s.n_trials} success, "
              f"collisions {s.collisions}, min dist {s.min_obstacle_dist:.3f}, coverage {s.coverage:.4f}")
    return EXIT_FAILED_TRIAL if E.any_failed(results) else EXIT_OK


def cmd_theory_toy(args, d):
    os.makedirs(d["out_dir"], exist_ok=True)
    path = os.path.join(d["out_dir"], "toy_coverage.csv")
    cells = theory.toy_experiment(args.n, args.rho, args.trials, d["seed"], args.alpha, csv_path=path)
    for c in cells:
        print(f"rho={c.rho:<6} n={c.n:<5} coverage={c.coverage:.3f} "
              f"barber={c.barber_bound:.4f} cpsls={c.cpsls_bound:.4f}")
    print(f"-> {path}")
    return EXIT_OK


def cmd_report(args, d):
    found = sorted(glob.glob(os.path.join(d["out_dir"], "**", "summary.json"), recursive=True))
    if not found:
        print(f"no summary.json under {d['out_dir']}")
        return EXIT_OK
    for path in found:
        with open(path) as fh:
            summ = json.load(fh)
        print(path)
        for mode, s in summ.items():
            n = len(s["success"])
            print(f"  {mode:<13} success {sum(s['success'])}/{n}  collisions {s['collisions']}  "
                  f"min dist {s['min_obstacle_dist']:.3f}  coverage {s['coverage']:.4f}  "
                  f"step {s['wall_ms_mean']:.1f}+-{s['wall_ms_std']:.1f} ms  "
                  f"pred err {s['pred_err_mean']:.4f}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "calibrate": cmd_calibrate, "run": cmd_run,
            "theory-toy": cmd_theory_toy, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        d = _settings(args)
        return COMMANDS[args.cmd](args, d)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG


if __name__ == "__main__":
    sys.exit(main())
