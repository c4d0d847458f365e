"""Command line entry point: ``stabshift <verb> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import contexts as ctx
from .config import load_config, write_config
from .errors import ConfigError, NumericalError, ParseError
from .experiment import (
    ExperimentConfig,
    build_training_set,
    run_experiment,
    run_method,
    simulate_system,
    stability_scores,
)
from .dynamics import label_stable
from .ingest import batch_protocol, export_trajectory_csv, ingest_trajectory_csv
from .report import curves_from_results, emit_report, read_results
from .surrogate import SequenceData, SurrogateModel, train

OUT_ENV = "STABSHIFT_OUT"


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUT_ENV) or "stabshift-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "system", None):
        over["system"] = args.system
        if cfg.family is not None and (args.system, cfg.family) not in ctx.SHIFT_TABLE:
            over["family"] = None
    return replace(cfg, **over) if over else cfg


def _observed(system: str, trajs) -> np.ndarray:
    return trajs.states[..., :1] if system == "spring" else trajs.states[..., :3]


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    if args.regime == "baseline":
        X = ctx.sample_baseline(cfg.system, args.n, cfg.seed)
    else:
        setting = ctx.ShiftSetting(cfg.system, cfg.shift_family, args.regime, args.delta)
        X = ctx.sample_shifted(setting, args.n, cfg.seed)
    trajs = simulate_system(cfg.system, X, cfg.grid)
    eta = stability_scores(cfg.system, trajs)
    stable = np.asarray(label_stable(eta, cfg.stability))
    np.savetxt(out / "contexts.csv", X, delimiter=",", header=",".join(f"x{j + 1}" for j in range(X.shape[1])),
               comments="")
    feats = np.concatenate([np.broadcast_to(X[:, None, :], (len(X), trajs.grid.n_steps, X.shape[1])),
                            _observed(cfg.system, trajs)], axis=2)
    export_trajectory_csv(out / "trajectories.csv", out / "manifest.csv", feats, stable, [args.split] * len(X),
                          times=trajs.grid.times)
    print(f"simulated {len(X)} {cfg.system} trajectories, {int((~stable).sum())} unstable -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    ts = build_training_set(cfg.system, cfg, cfg.seed)
    tc = replace(cfg.train, seed=cfg.seed, tau=cfg.train.tau or cfg.stability.tau)
    model, rec = train(ts.sequences(cfg.time_stride), tc)
    model.save(out / "model.json")
    rec.write_csv(out / "training_log.csv")
    write_config(cfg, out / "config.ini")
    print(f"trained on {len(ts)} trajectories in {rec.wall_clock:.1f}s; final loss {rec.total[-1]:.5f} -> {out}")
    return 0


def cmd_test(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    model = SurrogateModel.load(args.model) if args.model else None
    ss = np.random.SeedSequence(cfg.seed)
    s_hold, s_test, s_perm = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    holdout = ctx.sample_baseline(cfg.system, cfg.n_holdout, s_hold)
    setting = ctx.ShiftSetting(cfg.system, cfg.shift_family, args.regime, args.delta)
    test = ctx.sample_shifted(setting, cfg.n_test, s_test)
    res = run_method(args.method, model, holdout, test, cfg.alpha, s_perm, cfg.n_perm)
    with open(out / "test_result.json", "w") as fh:
        fh.write(res.to_json() + "\n")
    print(res.to_json())
    return 0


def cmd_experiment(args) -> int:
    cfg = _config(args)
    if args.runs is not None:
        cfg = replace(cfg, runs=args.runs)
    out = _out_dir(args)
    progress = None if args.quiet else (lambda r, rows: print(f"run {r + 1}/{cfg.runs} done", file=sys.stderr))
    result = run_experiment(cfg, progress)
    write_config(cfg, out / "config.ini")
    emit_report(result.curves, result.rows, out, cfg.system, cfg.type1_delta, cfg.type2_delta)
    for c in result.curves:
        rates = " ".join(f"{d:g}:{r:.2f}" for d, r in zip(c.deltas, c.rates))
        print(f"{c.method:<18} {c.regime:<11} {rates}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    ds = ingest_trajectory_csv(args.data, args.manifest)
    tr, ho, te = (ds.split_index(s) for s in ("train", "holdout", "test"))
    summary = {
        "trajectories": len(ds.traj_ids),
        "features": ds.feature_names,
        "splits": {"train": len(tr), "holdout": len(ho), "test": len(te)},
        "stable_fraction": float(ds.labels.mean()),
        "mean": [float(v) for v in ds.mean],
        "std": [float(v) for v in ds.std],
    }
    if args.protocol:
        if len(ho) == 0 or len(te) == 0:
            raise ConfigError("the batch protocol needs holdout and test splits")
        states = ds.standardize(ds.stacked(tr))
        K = states.shape[1]
        step_w = None
        if args.mode == "half":
            step_w = (np.arange(K) >= K // 2).astype(float)
        data = SequenceData(ds.contexts_std[tr], states, None, ds.labels[tr], step_w)
        model, _ = train(data, replace(cfg.train, seed=cfg.seed))
        fn = lambda a, b, seed: run_method("l2t", model, a, b, cfg.alpha, seed, cfg.n_perm)
        res = batch_protocol(fn, ds.contexts_std[ho], ds.contexts_std[te], args.batch_size, args.repetitions,
                             cfg.seed, "l2t")
        summary["protocol"] = {"method": "l2t", "rejection_rate": res.rejection_rate, "std_error": res.std_error,
                               "repetitions": res.repetitions, "batch_size": res.batch_size}
        with open(out / "results.jsonl", "w") as fh:
            for r in res.results:
                fh.write(r.to_json() + "\n")
    (out / "ingest_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_report(args) -> int:
    out = _out_dir(args)
    rows = read_results(args.results)
    curves = curves_from_results(rows)
    emit_report(curves, rows, out, args.dataset, args.type1_delta, args.type2_delta)
    print(f"wrote report for {len(rows)} results -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--config", default=None, help="INI config file")
    common.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./stabshift-out)")

    p = argparse.ArgumentParser(prog="stabshift", description="Stability-aware distribution shift detection.")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate trajectories and export them as CSV")
    s.add_argument("--system", choices=("spring", "pendulum"))
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--regime", default="baseline", choices=("baseline", "null", "boundary", "alternative"))
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--split", default="train", choices=("train", "holdout", "test"))
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="train a surrogate on a 90:10 baseline training set")
    s.add_argument("--system", choices=("spring", "pendulum"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("test", parents=[common], help="one deployment-time test against a shifted sample")
    s.add_argument("--system", choices=("spring", "pendulum"))
    s.add_argument("--model", default=None, help="checkpoint written by 'train'")
    s.add_argument("--method", default="l2t", choices=("l2t", "context_mmd", "recon_only", "uniform_only"))
    s.add_argument("--regime", default="null", choices=("null", "boundary", "alternative"))
    s.add_argument("--delta", type=float, default=0.0)
    s.set_defaults(func=cmd_test)

    s = sub.add_parser("experiment", parents=[common], help="full rejection-rate experiment with reports")
    s.add_argument("--system", choices=("spring", "pendulum"))
    s.add_argument("--runs", type=int, default=None)
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("ingest", parents=[common], help="ingest an external trajectory dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--protocol", action="store_true", help="train on the train split and run the batch protocol")
    s.add_argument("--mode", default="full", choices=("full", "half"))
    s.add_argument("--batch-size", type=int, default=512)
    s.add_argument("--repetitions", type=int, default=200)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("report", parents=[common], help="rebuild curves and summary from results.jsonl")
    s.add_argument("--results", required=True)
    s.add_argument("--dataset", default="")
    s.add_argument("--type1-delta", type=float, default=1.0)
    s.add_argument("--type2-delta", type=float, default=0.5)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
