"""Grid search, multi-split benchmarks and the synthetic pruning suite."""

from __future__ import annotations

import configparser
import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    Dataset,
    TeacherSpec,
    generate_teacher,
    init_at_truth,
    load_csv,
    prepare_split,
    sample_prior_params,
    write_teacher,
)
from .diagnostics import (
    PruneThresholds,
    mean_predictive_ll,
    sample_functions,
    unit_report,
    write_function_samples,
)
from .network import NetworkShape
from .numerics import RngState
from .posterior import Family, Prior, VariationalPosterior
from .training import NonFiniteLoss, TrainConfig, TrainingTrace, train

log = logging.getLogger(__name__)


class AllRunsDiverged(RuntimeError):
    pass


@dataclass
class HyperGrid:
    prior_std: list[float] = field(default_factory=lambda: [0.3, 1.0, 3.0, 10.0])
    weight_std: list[float] = field(default_factory=lambda: [0.01, 0.03, 0.1, 0.3])
    bias_std: list[float] = field(default_factory=lambda: [0.01, 0.03, 0.1, 0.3])
    learning_rate: list[float] = field(default_factory=lambda: [0.001, 0.005, 0.01])

    def points(self, family) -> list[dict]:
        family = Family.parse(family)
        if family is Family.ES:
            pts = [{"learning_rate": lr} for lr in self.learning_rate]
        elif family is Family.WN:
            pts = [
                {"prior_std": s, "weight_std": w, "bias_std": b}
                for s, w, b in itertools.product(self.prior_std, self.weight_std, self.bias_std)
            ]
        else:
            pts = [{"prior_std": s} for s in self.prior_std]
        if not pts:
            raise ValueError(f"empty hyperparameter grid for {family.value}")
        return pts


@dataclass
class BenchmarkConfig:
    datasets: list[tuple[str, str]] = field(default_factory=list)  # (name, path)
    target_column: int = -1
    families: list[Family] = field(default_factory=lambda: [Family.WN, Family.MF, Family.FC])
    n_splits: int = 20
    test_fraction: float = 0.1
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: HyperGrid = field(default_factory=HyperGrid)
    base_seed: int = 0
    hidden_units: int = 50
    test_mc_samples: int = 1000
    n_report_samples: int = 25

    def __post_init__(self):
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        self.families = [Family.parse(f) for f in self.families]


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.replace(" ", "").split(",") if v]


def read_config(path) -> BenchmarkConfig:
    """Parse a ``key = value`` file; list values are comma separated.

    Dataset entries are ``name:path`` (or just ``path``); relative paths are
    resolved against the config file's directory.
    """
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read_string("[bench]\n" + path.read_text())
    sec = cp["bench"]
    known = {
        "datasets", "target", "families", "n_splits", "test_fraction", "seed", "hidden_units",
        "prior_std_grid", "weight_std_grid", "bias_std_grid", "es_lr_grid", "iterations",
        "learning_rate", "beta1", "beta2", "epsilon", "trace_every", "eval_mc_samples",
        "trace_mc", "n_mc", "sigma_init", "test_mc_samples", "n_report_samples",
    }
    unknown = set(sec) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")

    datasets = []
    for entry in sec.get("datasets", "").split(","):
        entry = entry.strip()
        if not entry:
            continue
        name, _, p = entry.rpartition(":") if ":" in entry else ("", "", entry)
        p = Path(p)
        if not p.is_absolute():
            p = path.parent / p
        datasets.append((name or p.stem, str(p)))

    tc = {}
    for key, conv in (("iterations", int), ("learning_rate", float), ("beta1", float), ("beta2", float),
                      ("epsilon", float), ("trace_every", int), ("eval_mc_samples", int),
                      ("trace_mc", int), ("n_mc", int), ("sigma_init", float)):
        if key in sec:
            tc[key] = conv(sec[key])
    grid = HyperGrid()
    for key, attr in (("prior_std_grid", "prior_std"), ("weight_std_grid", "weight_std"),
                      ("bias_std_grid", "bias_std"), ("es_lr_grid", "learning_rate")):
        if key in sec:
            setattr(grid, attr, _floats(sec[key]))

    cfg = BenchmarkConfig(
        datasets=datasets,
        target_column=sec.getint("target", -1),
        n_splits=sec.getint("n_splits", 20),
        test_fraction=sec.getfloat("test_fraction", 0.1),
        train=TrainConfig(**tc),
        grid=grid,
        base_seed=sec.getint("seed", 0),
        hidden_units=sec.getint("hidden_units", 50),
        test_mc_samples=sec.getint("test_mc_samples", 1000),
        n_report_samples=sec.getint("n_report_samples", 25),
    )
    if "families" in sec:
        cfg.families = [Family.parse(f.strip()) for f in sec["families"].split(",") if f.strip()]
    return cfg


def split_seed(base_seed: int, split_index: int) -> int:
    return int(RngState(base_seed).split("split", split_index).generator.integers(2**31))


@dataclass
class RunResult:
    test_ll: float
    posterior: VariationalPosterior
    trace: TrainingTrace


def run_single(family, train_data: Dataset, test_data: Dataset, hp: dict, config: TrainConfig,
               rng: RngState, test_mc_samples: int = 1000, hidden_units: int = 50) -> RunResult:
    """Train one family with hyperparameters ``hp`` and score the test split."""
    family = Family.parse(family)
    if "learning_rate" in hp:
        config = replace(config, learning_rate=hp["learning_rate"])
    prior = Prior(hp.get("prior_std", 1.0))
    q, trace = train(
        family,
        train_data,
        NetworkShape(train_data.d, hidden_units),
        prior,
        config,
        rng,
        test_data,
        weight_std=hp.get("weight_std", 0.1),
        bias_std=hp.get("bias_std", 0.1),
    )
    ll = mean_predictive_ll(q, test_data, test_mc_samples, rng.split("test-eval"))
    if not math.isfinite(ll):
        raise NonFiniteLoss(len(trace), trace, "(test log-likelihood)")
    return RunResult(ll, q, trace)


def _tie_key(item):
    (idx, hp), ll = item
    return (ll, hp.get("prior_std", 0.0), -idx)


def grid_search(family, dataset: Dataset, grid: HyperGrid, config: BenchmarkConfig):
    """Pick the grid point with the best held-out log-likelihood on split 0.

    Exact ties go to the larger prior std. Returns (chosen point, list of
    (point, score or None for diverged runs)).
    """
    family = Family.parse(family)
    points = grid.points(family)
    train_data, test_data = prepare_split(dataset, config.test_fraction, split_seed(config.base_seed, 0))
    scores = []
    for gi, hp in enumerate(points):
        rng = RngState(config.base_seed).split(family.value, 0).split("grid", gi)
        try:
            res = run_single(family, train_data, test_data, hp, config.train, rng,
                             config.test_mc_samples, config.hidden_units)
            scores.append((hp, res.test_ll))
        except (NonFiniteLoss, FloatingPointError) as exc:
            log.warning("%s grid point %s diverged: %s", family.value, hp, exc)
            scores.append((hp, None))
    finite = [((i, hp), ll) for i, (hp, ll) in enumerate(scores) if ll is not None]
    if not finite:
        raise AllRunsDiverged(f"every {family.value} grid point diverged")
    (_, best), _ = max(finite, key=_tie_key)
    return best, scores


@dataclass
class ResultRow:
    dataset: str
    family: str
    n: int
    d: int
    mean_ll: float
    sem: float
    sem_defined: bool
    per_split: list[float]
    failed_splits: list[int]
    hyperparams: dict
    grid_scores: list = field(default_factory=list)
    pruned_counts: list[int] = field(default_factory=list)


@dataclass
class ResultsTable:
    rows: list[ResultRow] = field(default_factory=list)

    def get(self, dataset: str, family) -> ResultRow:
        fam = Family.parse(family).value
        for r in self.rows:
            if r.dataset == dataset and r.family == fam:
                return r
        raise KeyError((dataset, fam))

    def write_csv(self, path) -> None:
        cols = ["dataset", "family", "mean_ll", "sem", "prior_std", "weight_std", "bias_std",
                "learning_rate", "n_splits", "n_failed", "n", "d"]
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                hp = r.hyperparams
                w.writerow([
                    r.dataset, r.family, repr(r.mean_ll), repr(r.sem),
                    *(repr(hp[k]) if k in hp else "" for k in ("prior_std", "weight_std", "bias_std", "learning_rate")),
                    len(r.per_split), len(r.failed_splits), r.n, r.d,
                ])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps({"rows": [asdict(r) for r in self.rows]}, indent=2))


def aggregate(values) -> tuple[float, float, bool]:
    """Mean and standard error of the mean (sample std / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, False
    if v.size == 1:
        return float(v[0]), 0.0, False
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)), True


def run_family(name: str, dataset: Dataset, family: Family, config: BenchmarkConfig, out_dir: Path | None = None) -> ResultRow:
    hp, scores = grid_search(family, dataset, config.grid, config)
    log.info("%s %s: chose %s", name, family.value, hp)
    per_split, failed, pruned = [], [], []
    for k in range(config.n_splits):
        train_data, test_data = prepare_split(dataset, config.test_fraction, split_seed(config.base_seed, k))
        rng = RngState(config.base_seed).split(family.value, k).split("final")
        try:
            res = run_single(family, train_data, test_data, hp, config.train, rng,
                             config.test_mc_samples, config.hidden_units)
        except (NonFiniteLoss, FloatingPointError) as exc:
            log.warning("%s %s split %d failed: %s", name, family.value, k, exc)
            failed.append(k)
            continue
        per_split.append(res.test_ll)
        if not family.is_point:
            prior = Prior(hp.get("prior_std", 1.0))
            report = unit_report(res.posterior, train_data.X, prior, config.n_report_samples,
                                 PruneThresholds.for_prior(prior), rng.split("report"))
            pruned.append(report.pruned_count)
        if out_dir is not None:
            stem = f"{name}_{family.value.lower()}_split{k}"
            res.trace.write_csv(out_dir / "traces" / f"{stem}.csv")
            if not family.is_point:
                report.write_json(out_dir / "reports" / f"{stem}.json")
    mean, sem, sem_defined = aggregate(per_split)
    return ResultRow(
        dataset=name, family=family.value, n=dataset.n, d=dataset.d, mean_ll=mean, sem=sem,
        sem_defined=sem_defined, per_split=per_split, failed_splits=failed, hyperparams=hp,
        grid_scores=[[h, s] for h, s in scores], pruned_counts=pruned,
    )


def run_benchmark(config: BenchmarkConfig, out_dir=None) -> ResultsTable:
    """Tune on split 0, then train and score every split; write outputs to ``out_dir``."""
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "traces").mkdir(parents=True, exist_ok=True)
        (out_dir / "reports").mkdir(parents=True, exist_ok=True)
    table = ResultsTable()
    for name, path in config.datasets:
        dataset = load_csv(path, config.target_column, name=name)
        for family in config.families:
            table.rows.append(run_family(name, dataset, family, config, out_dir))
    if out_dir is not None:
        table.write_csv(out_dir / "results.csv")
        table.write_json(out_dir / "results.json")
    return table


@dataclass
class SyntheticResult:
    ns: list[int]
    seeds: list[int]
    counts: np.ndarray  # (len(ns), len(seeds))
    reports: dict = field(default_factory=dict)  # (n, seed) -> PruningReport
    functions: dict = field(default_factory=dict)  # (n, seed) -> (x_grid, table)

    @property
    def mean_counts(self) -> dict[int, float]:
        return {n: float(self.counts[i].mean()) for i, n in enumerate(self.ns)}

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "seed", "pruned"])
            for i, n in enumerate(self.ns):
                for j, s in enumerate(self.seeds):
                    w.writerow([n, s, int(self.counts[i, j])])


def run_synthetic_suite(
    ns,
    seeds,
    spec: TeacherSpec | None = None,
    config: TrainConfig | None = None,
    out_dir=None,
    n_functions: int = 20,
    grid_points: int = 201,
    thresholds: PruneThresholds | None = None,
) -> SyntheticResult:
    """Truth-initialized MF on teacher data for every (N, seed); count pruned units.

    The teacher weights depend on the seed only, so each seed compares the
    same function at different N. The noise level is held at its true value.
    """
    ns, seeds = list(ns), list(seeds)
    if not ns or not seeds:
        raise ValueError("ns and seeds must be non-empty")
    spec = spec or TeacherSpec()
    config = replace(config or TrainConfig(), fix_noise=True)
    thresholds = thresholds or PruneThresholds.for_prior(spec.prior)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    x_grid = np.linspace(spec.input_low, spec.input_high, grid_points)
    result = SyntheticResult(ns, seeds, np.zeros((len(ns), len(seeds)), dtype=int))
    for j, seed in enumerate(seeds):
        base = RngState(seed)
        teacher_spec = spec
        if spec.true_params is None:
            theta = sample_prior_params(spec.shape, spec.prior, base.split("teacher"), spec.noise_std)
            teacher_spec = replace(spec, true_params=theta)
        for i, n in enumerate(ns):
            data, theta = generate_teacher(teacher_spec, n, base.split("data", n))
            run_rng = base.split("fit", n)
            q, _ = train(Family.MF, data, spec.shape, spec.prior, config, run_rng,
                         init=init_at_truth(theta, config.sigma_init))
            report = unit_report(q, data.X, spec.prior, 25, thresholds, run_rng.split("report"))
            table = sample_functions(q, x_grid, n_functions, run_rng.split("functions"))
            result.counts[i, j] = report.pruned_count
            result.reports[(n, seed)] = report
            result.functions[(n, seed)] = (x_grid, table)
            if out_dir is not None:
                stem = f"n{n}_seed{seed}"
                write_teacher(data, teacher_spec, theta, out_dir / f"data_{stem}.csv")
                write_function_samples(x_grid, table, out_dir / f"functions_{stem}.csv")
                report.write_json(out_dir / f"report_{stem}.json")
    if out_dir is not None:
        result.write_csv(out_dir / "pruned_counts.csv")
        (out_dir / "pruned_means.json").write_text(
            json.dumps({str(n): m for n, m in result.mean_counts.items()}, indent=2)
        )
    return result
