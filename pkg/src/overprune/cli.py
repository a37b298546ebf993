"""Command line entry point: ``overprune {train,bench,synthetic,prune-report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .bench import read_config, run_benchmark, run_single, run_synthetic_suite
from .data import Scaler, TeacherSpec, apply_scaler, load_csv, prepare_split
from .diagnostics import PruneThresholds, unit_report
from .numerics import RngState
from .posterior import Family, Prior, VariationalPosterior
from .training import TrainConfig

log = logging.getLogger("overprune")


def save_snapshot(q: VariationalPosterior, path, prior: Prior, scaler: Scaler | None = None) -> None:
    d = q.to_dict()
    d["prior_std"] = prior.std
    if scaler is not None:
        d["scaler"] = {
            "x_mean": scaler.x_mean.tolist(),
            "x_std": scaler.x_std.tolist(),
            "y_mean": scaler.y_mean,
            "y_std": scaler.y_std,
        }
    Path(path).write_text(json.dumps(d))


def load_snapshot(path) -> tuple[VariationalPosterior, Prior, Scaler | None]:
    d = json.loads(Path(path).read_text())
    s = d.get("scaler")
    scaler = None
    if s is not None:
        scaler = Scaler(np.asarray(s["x_mean"]), np.asarray(s["x_std"]), s["y_mean"], s["y_std"])
    return VariationalPosterior.from_dict(d), Prior(d.get("prior_std", 1.0)), scaler


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_train(args) -> dict:
    family = Family.parse(args.family)
    data = load_csv(args.data, args.target)
    train_data, test_data = prepare_split(data, args.test_fraction, args.seed)
    config = TrainConfig(seed=args.seed, iterations=args.iterations, trace_every=args.trace_every)
    hp = {"prior_std": args.prior_std, "weight_std": args.weight_std, "bias_std": args.bias_std}
    if args.learning_rate is not None:
        hp["learning_rate"] = args.learning_rate
    res = run_single(family, train_data, test_data, hp, config, RngState(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    prior = Prior(args.prior_std)
    save_snapshot(res.posterior, out / "posterior.json", prior, train_data.scaler)
    res.trace.write_csv(out / "trace.csv")
    summary = {"family": family.value, "dataset": data.name, "n": data.n, "d": data.d,
               "test_ll": res.test_ll, "hyperparams": hp, "seed": args.seed}
    if not family.is_point:
        report = unit_report(res.posterior, train_data.X, prior, rng=RngState(args.seed).split("report"))
        report.write_json(out / "pruning_report.json")
        summary["pruned_count"] = report.pruned_count
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def cmd_bench(args) -> dict:
    config = read_config(args.config)
    table = run_benchmark(config, args.out)
    return {"rows": [{"dataset": r.dataset, "family": r.family, "mean_ll": r.mean_ll, "sem": r.sem}
                     for r in table.rows]}


def cmd_synthetic(args) -> dict:
    spec = TeacherSpec(noise_std=args.noise_std)
    config = TrainConfig(iterations=args.iterations, trace_every=max(args.iterations or 5000, 1),
                         eval_mc_samples=10)
    res = run_synthetic_suite(_int_list(args.n_list), list(range(args.seeds)), spec, config, args.out)
    return {"mean_pruned": {str(k): v for k, v in res.mean_counts.items()}}


def cmd_prune_report(args) -> dict:
    q, prior, scaler = load_snapshot(args.posterior)
    data = load_csv(args.data, args.target)
    if scaler is not None:
        data = apply_scaler(scaler, data)
    thresholds = PruneThresholds(args.out_mean_max or 0.1 * prior.std, args.incoming_kl_max)
    report = unit_report(q, data.X, prior, args.n_samples, thresholds, RngState(args.seed))
    report.write_json(args.out)
    return {"pruned_count": report.pruned_count, "hidden_units": q.shape.hidden_units}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overprune", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one family on one train/test split")
    p.add_argument("--family", required=True, choices=[f.value.lower() for f in Family])
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, default=-1, help="target column index (default: last)")
    p.add_argument("--prior-std", type=float, default=1.0)
    p.add_argument("--weight-std", type=float, default=0.1, help="WN posterior weight std")
    p.add_argument("--bias-std", type=float, default=0.1, help="WN posterior bias std")
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--trace-every", type=int, default=50)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", help="grid search plus multi-split benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synthetic", help="teacher-network pruning suite")
    p.add_argument("--n-list", default="5,25,100")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", default="synthetic_out")
    p.set_defaults(func=cmd_synthetic)

    p = sub.add_parser("prune-report", help="per-unit pruning report for a saved posterior")
    p.add_argument("--posterior", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--target", type=int, default=-1)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=25)
    p.add_argument("--out-mean-max", type=float, default=None)
    p.add_argument("--incoming-kl-max", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prune_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # reported as a machine-readable record
        json.dump({"error": type(exc).__name__, "message": str(exc), "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(result, sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
