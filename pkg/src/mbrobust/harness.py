"""Config-driven experiment runner: train, evaluate, benchmark, compare, report.

Records are appended to ``records.jsonl`` as each (method, corruption, seed)
run finishes, so an interrupted experiment resumes where it stopped. Reports
are derived from the records alone and never contain wall-clock values, so
two runs of the same config produce byte-identical report files.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .classifier import AdadeltaState, ArchConfig, PassCounter, init_classifier, predict_proba
from .data import Benchmark, SyntheticSpec, generate_synthetic, group_tests, load_manifest, load_rows, \
    scan_cure_tsr
from .metrics import (
    DegenerateVarianceError,
    PredictionRecords,
    RankTable,
    accuracy,
    ece,
    mean_std,
    mrr,
    welch_ttest,
)
from .nuisance import KINDS
from .strategies import (
    BASELINES,
    MODEL_BASED,
    NuisanceSpec,
    StrategyConfig,
    expected_passes,
    parse_method_name,
    rng_streams,
    train,
    train_step,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
RECORDS_FILE = "records.jsonl"
METRICS = ("accuracy", "ece")
SEVERITY_CSV_HEADER = ("method", "corruption", "severity", "seed_count", "acc_mean", "acc_std", "ece_mean",
                       "ece_std")
WELCH_CSV_HEADER = ("corruption", "method_1", "method_2", "metric", "severity", "n_1", "n_2", "mu_1", "mu_2",
                    "ci_low", "ci_high", "p_value", "t_statistic", "dof", "status")


class ConfigError(ValueError):
    pass


class InsufficientSeedsError(ValueError):
    pass


def fmt(x) -> str:
    """Fixed float formatting for report files; None and NaN become empty cells."""
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    return f"{x:.6f}"


# config


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synthetic"  # synthetic | manifest | cure_tsr
    synthetic: dict = field(default_factory=dict)
    train_manifest: str | None = None
    test_manifest: str | None = None
    train_root: str | None = None
    test_root: str | None = None
    n_classes: int = 14


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce an experiment; see ``EXAMPLE_CONFIG`` for the YAML form."""

    version: int = CONFIG_VERSION
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    methods: tuple = ("Vanilla", "AT", "AugMix", "MDA", "MRT", "MAT", "MDAT", "MRAT")
    corruptions: tuple = ("snow", "rain")
    train_severities: tuple = (2, 5)
    eval_severities: tuple = (0, 1, 2, 3, 4, 5)
    seeds: tuple = (0, 1, 2, 3, 4)
    epochs: int = 20
    batch_size: int = 64
    arch: dict = field(default_factory=lambda: {"conv1_channels": 8, "conv2_channels": 16, "hidden": 64})
    strategy: dict = field(default_factory=dict)
    nuisance: dict = field(default_factory=lambda: {"dim": 16, "seed": 0})
    optimizer: dict = field(default_factory=lambda: {"lr": 1.0, "rho": 0.9, "eps": 1e-6})
    ece: dict = field(default_factory=lambda: {"n_bins": 15, "binning": "equal_mass"})
    comparisons: tuple = ()
    output_dir: str = "runs/experiment"
    parallel_seeds: int = 1

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version!r}; expected {CONFIG_VERSION}")
        if len(self.seeds) < 1:
            raise ConfigError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"duplicate seeds in {list(self.seeds)}")
        for name in self.methods:
            try:
                parse_method_name(name)
            except ValueError as e:
                raise ConfigError(str(e)) from None
        for kind in self.corruptions:
            if kind not in KINDS:
                raise ConfigError(f"unknown corruption {kind!r}; expected one of {KINDS}")
        for s in tuple(self.train_severities) + tuple(self.eval_severities):
            if not 0 <= int(s) <= 5:
                raise ConfigError(f"severity {s} outside 0..5")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.dataset.source not in ("synthetic", "manifest", "cure_tsr"):
            raise ConfigError(f"dataset.source must be synthetic, manifest or cure_tsr, got {self.dataset.source!r}")
        unknown = set(self.strategy) - {f.name for f in fields(StrategyConfig)}
        if unknown:
            raise ConfigError(f"unknown strategy keys {sorted(unknown)}")
        if self.parallel_seeds < 1:
            raise ConfigError("parallel_seeds must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc or {})
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        ds = doc.pop("dataset", {}) or {}
        if isinstance(ds, str):
            ds = {"source": ds}
        ds_known = {f.name for f in fields(DatasetConfig)}
        if set(ds) - ds_known:
            raise ConfigError(f"unknown dataset keys {sorted(set(ds) - ds_known)}")
        seeds = doc.get("seeds", (0, 1, 2, 3, 4))
        if isinstance(seeds, int):
            seeds = tuple(range(seeds))
        for key in ("methods", "corruptions", "train_severities", "eval_severities"):
            if key in doc:
                doc[key] = tuple(doc[key])
        doc["seeds"] = tuple(int(s) for s in seeds)
        doc["comparisons"] = tuple(dict(c) for c in doc.get("comparisons", ()))
        return cls(dataset=DatasetConfig(**ds), **doc)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        """Hash of everything that affects results (not output location or parallelism)."""
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("parallel_seeds")
        d.pop("comparisons")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def arch_config(self, n_classes: int) -> ArchConfig:
        return ArchConfig(n_classes=n_classes, **self.arch)

    def nuisance_spec(self, kind: str) -> NuisanceSpec:
        units = self.nuisance.get("rho_unit") or {}
        return NuisanceSpec(kind, int(self.nuisance.get("dim", 16)), int(self.nuisance.get("seed", 0)),
                            units.get(kind))

    def labels(self) -> list[str]:
        """Method labels after expanding bare model-based names over the train severities."""
        out = []
        for name in self.methods:
            method, level = parse_method_name(name)
            if method in BASELINES or level is not None:
                out.append(name)
            else:
                out += [f"{method}{s}" for s in self.train_severities]
        return list(dict.fromkeys(out))


EXAMPLE_CONFIG = """\
# experiment config, schema version 1
version: 1
dataset:
  source: synthetic          # synthetic | manifest | cure_tsr
  synthetic: {seed: 0, train_per_class: 100, test_per_class: 30}
  # manifest:  train_manifest: data/train_manifest.csv, test_manifest: data/test_manifest.csv
  # cure_tsr:  train_root: CURE-TSR/Real_Train, test_root: CURE-TSR/Real_Test
methods: [Vanilla, AT, AugMix, MDA, MRT, MAT, MDAT, MRAT]   # bare model-based names expand over train_severities
corruptions: [snow, rain]
train_severities: [2, 5]
eval_severities: [0, 1, 2, 3, 4, 5]
seeds: [0, 1, 2, 3, 4]
epochs: 20
batch_size: 64
arch: {conv1_channels: 8, conv2_channels: 16, hidden: 64}
strategy: {k: 10, T: 10, R: 10, epsilon: 0.0313725, alpha: 0.01, z_step: raw, mat_init: center}
nuisance: {dim: 16, seed: 0}
optimizer: {lr: 1.0, rho: 0.9, eps: 1.0e-6}
ece: {n_bins: 15, binning: equal_mass}
comparisons:
  - {method_1: MDA5, method_2: MAT5, corruption: snow, metric: accuracy, severity: 5}
output_dir: runs/experiment
parallel_seeds: 1
"""


# data


def load_benchmark(config: ExperimentConfig) -> Benchmark:
    ds = config.dataset
    if ds.source == "synthetic":
        spec_args = dict(ds.synthetic)
        spec_args.setdefault("n_classes", ds.n_classes)
        spec_args.setdefault("corruptions", tuple(config.corruptions))
        spec_args.setdefault("basis_dim", int(config.nuisance.get("dim", 16)))
        spec_args.setdefault("basis_seed", int(config.nuisance.get("seed", 0)))
        if config.nuisance.get("rho_unit"):
            spec_args.setdefault("rho_unit", dict(config.nuisance["rho_unit"]))
        spec_args["corruptions"] = tuple(spec_args["corruptions"])
        return generate_synthetic(SyntheticSpec(**spec_args))
    if ds.source == "manifest":
        if not ds.train_manifest or not ds.test_manifest:
            raise ConfigError("manifest source needs dataset.train_manifest and dataset.test_manifest")
        train_set = load_manifest(ds.train_manifest, ds.n_classes)
        test_set = load_manifest(ds.test_manifest, ds.n_classes)
    else:
        if not ds.train_root or not ds.test_root:
            raise ConfigError("cure_tsr source needs dataset.train_root and dataset.test_root")
        train_set = _load_scanned(ds.train_root, ds.n_classes)
        test_set = _load_scanned(ds.test_root, ds.n_classes)
        # challenge-free training images only
        train_set = train_set.subset(train_set.severity == 0)
    return Benchmark(train_set, group_tests(test_set, config.corruptions), ds.n_classes)


def _load_scanned(root: str, n_classes: int):
    return load_rows(scan_cure_tsr(root).rows, root, n_classes)


# evaluation


def evaluate(params, tests_by_severity: dict, severities=range(6), n_bins: int = 15,
             binning: str = "equal_mass") -> dict[int, dict | None]:
    """(accuracy, ECE) per severity; a missing or empty split gives None for that cell."""
    out = {}
    for s in severities:
        ds = tests_by_severity.get(s)
        if ds is None or len(ds) == 0:
            out[s] = None
            continue
        rec = PredictionRecords.from_probs(predict_proba(params, ds.images), ds.labels)
        out[s] = {"accuracy": accuracy(rec), "ece": ece(rec, n_bins, binning)}
    return out


# runs


@dataclass(frozen=True)
class Job:
    label: str
    method: str
    train_severity: int | None
    corruption: str | None  # corruption the model was trained against; None for baselines
    seed: int

    @property
    def key(self) -> str:
        return f"{self.label}|{self.corruption or '-'}|{self.seed}"


def plan_jobs(config: ExperimentConfig) -> list[Job]:
    jobs = []
    for label in config.labels():
        method, level = parse_method_name(label)
        kinds = [None] if method in BASELINES else list(config.corruptions)
        for kind in kinds:
            for seed in config.seeds:
                jobs.append(Job(label, method, level, kind, seed))
    return jobs


@dataclass
class RunRecord:
    method: str
    train_severity: int | None
    train_corruption: str | None
    seed: int
    evals: dict  # corruption -> severity (str) -> {"accuracy", "ece"} | None
    passes_per_batch: int
    backward_per_batch: int
    wall: dict
    config_hash: str

    @property
    def key(self) -> str:
        return f"{self.method}|{self.train_corruption or '-'}|{self.seed}"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))

    def metric(self, corruption: str, severity: int, name: str) -> float | None:
        cell = self.evals.get(corruption, {}).get(str(severity))
        return None if cell is None else cell[name]


def strategy_for(config: ExperimentConfig, job: Job) -> StrategyConfig:
    kind = job.corruption or (config.corruptions[0] if config.corruptions else "snow")
    return StrategyConfig.from_name(job.label, rng_seed=job.seed, nuisance=config.nuisance_spec(kind),
                                    **config.strategy)


def run_job(config: ExperimentConfig, bench: Benchmark, job: Job) -> RunRecord:
    scfg = strategy_for(config, job)
    arch = config.arch_config(bench.n_classes)
    t0 = time.perf_counter()
    rep = train(scfg, bench.train, epochs=config.epochs, batch_size=config.batch_size, arch=arch,
                lr=config.optimizer.get("lr", 1.0), rho=config.optimizer.get("rho", 0.9),
                eps=config.optimizer.get("eps", 1e-6))
    total = time.perf_counter() - t0
    kinds = list(bench.tests) if job.corruption is None else [job.corruption]
    evals = {}
    for kind in kinds:
        res = evaluate(rep.params, bench.tests.get(kind, {}), config.eval_severities,
                       int(config.ece.get("n_bins", 15)), config.ece.get("binning", "equal_mass"))
        evals[kind] = {str(s): v for s, v in res.items()}
    secs = np.array(rep.batch_seconds[1:] or rep.batch_seconds)
    n_batches = max(rep.batches, 1)
    return RunRecord(
        method=job.label, train_severity=job.train_severity, train_corruption=job.corruption,
        seed=job.seed, evals=evals,
        passes_per_batch=int(np.median(rep.batch_passes)) if rep.batch_passes else 0,
        backward_per_batch=int(round(rep.params.counter.backward / n_batches)),
        wall={"total_s": total, "median_batch_s": float(np.median(secs)),
              "iqr_batch_s": float(np.subtract(*np.percentile(secs, [75, 25])))},
        config_hash=config.config_hash(),
    )


def read_records(path: str | Path) -> list[RunRecord]:
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS_FILE
    if not path.is_file():
        return []
    out = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if line.strip():
            try:
                out.append(RunRecord.from_json(line))
            except (json.JSONDecodeError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: bad record ({e})") from None
    return out


def _run_seed_jobs(args):
    config, jobs = args
    bench = load_benchmark(config)
    return [run_job(config, bench, j) for j in jobs]


def run_experiment(config: ExperimentConfig, bench: Benchmark | None = None,
                   progress=None) -> list[RunRecord]:
    """Train and evaluate every planned job, appending each record as it completes.

    Records already present for this config hash are reused, so a rerun after
    a crash only repeats the run that was in progress.
    """
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RECORDS_FILE
    chash = config.config_hash()
    done = {r.key: r for r in read_records(path) if r.config_hash == chash}
    todo = [j for j in plan_jobs(config) if j.key not in done]
    (out_dir / "config.yaml").write_text(yaml.safe_dump(config.to_dict(), sort_keys=True))

    def persist(rec: RunRecord):
        with path.open("a") as fh:
            fh.write(rec.to_json() + "\n")
        done[rec.key] = rec
        if progress:
            progress(rec)

    if config.parallel_seeds > 1 and todo:
        by_seed: dict[int, list[Job]] = {}
        for j in todo:
            by_seed.setdefault(j.seed, []).append(j)
        with ProcessPoolExecutor(max_workers=config.parallel_seeds) as pool:
            for recs in pool.map(_run_seed_jobs, [(config, js) for js in by_seed.values()]):
                for rec in recs:
                    persist(rec)
    else:
        if bench is None and todo:
            bench = load_benchmark(config)
        for j in todo:
            persist(run_job(config, bench, j))
    return [done[j.key] for j in plan_jobs(config)]


# statistics


def seed_values(records, method: str, corruption: str, severity: int, metric: str) -> list[float]:
    vals = {}
    for r in records:
        if r.method != method:
            continue
        v = r.metric(corruption, severity, metric)
        if v is not None:
            vals[r.seed] = v
    return [vals[s] for s in sorted(vals)]


def compare(records, method_a: str, method_b: str, metric: str, severity: int,
            corruption: str = "snow", alpha: float = 0.05) -> dict:
    """Welch row (mu_1, mu_2, CI, p) on per-seed values of one cell."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}, got {metric!r}")
    a = seed_values(records, method_a, corruption, severity, metric)
    b = seed_values(records, method_b, corruption, severity, metric)
    for name, vals in ((method_a, a), (method_b, b)):
        if len(vals) < 2:
            raise InsufficientSeedsError(
                f"{name} has {len(vals)} seed(s) at {corruption}/{severity}/{metric}; need >= 2")
    row = {"corruption": corruption, "method_1": method_a, "method_2": method_b, "metric": metric,
           "severity": severity, "n_1": len(a), "n_2": len(b)}
    try:
        w = welch_ttest(a, b, alpha)
        row.update(mu_1=w.mean_1, mu_2=w.mean_2, ci_low=w.ci_low, ci_high=w.ci_high, p_value=w.p_value,
                   t_statistic=w.t_statistic, dof=w.dof, status="ok")
    except DegenerateVarianceError:
        # constant samples: equal means carry no evidence of a difference
        ma, mb = float(np.mean(a)), float(np.mean(b))
        same = ma == mb
        row.update(mu_1=ma, mu_2=mb, ci_low=ma - mb, ci_high=ma - mb, p_value=1.0 if same else None,
                   t_statistic=0.0 if same else None, dof=None, status="degenerate_variance")
    return row


def default_comparisons(config: ExperimentConfig) -> list[dict]:
    """MDA vs MAT at the highest eval severity for each corruption, train severity and metric."""
    labels = set(config.labels())
    top = max(config.eval_severities)
    out = []
    for kind in config.corruptions:
        for s in config.train_severities:
            a, b = f"MDA{s}", f"MAT{s}"
            if a in labels and b in labels:
                for metric in METRICS:
                    out.append({"method_1": a, "method_2": b, "corruption": kind, "metric": metric,
                                "severity": top})
    return out


# reports


def severity_rows(records, eval_severities=range(6)) -> list[dict]:
    """Mean and std over seeds per (method, corruption, severity); missing cells kept with empty values."""
    groups: dict[tuple, list] = {}
    order = []
    for r in records:
        for kind, cells in r.evals.items():
            for s in eval_severities:
                key = (r.method, kind, int(s))
                if key not in groups:
                    groups[key] = []
                    order.append(key)
                cell = cells.get(str(s))
                if cell is not None:
                    groups[key].append((r.seed, cell["accuracy"], cell["ece"]))
    rows = []
    for key in sorted(order, key=lambda k: (_method_order(k[0]), k[1], k[2])):
        vals = sorted(groups[key])
        row = {"method": key[0], "corruption": key[1], "severity": key[2], "seed_count": len(vals),
               "acc_mean": None, "acc_std": None, "ece_mean": None, "ece_std": None}
        if vals:
            row["acc_mean"], row["acc_std"] = mean_std([v[1] for v in vals])
            row["ece_mean"], row["ece_std"] = mean_std([v[2] for v in vals])
        rows.append(row)
    return rows


def _method_order(label: str):
    method, level = parse_method_name(label)
    order = BASELINES + MODEL_BASED
    return order.index(method), -1 if level is None else level


def rank_table(rows, corruptions, severities=range(0, 6)) -> RankTable:
    """Cells (corruption, severity, metric) over seed-mean values.

    Clean data is severity 0; it is one cell per corruption family since each
    family's models are compared on it.
    """
    values: dict[tuple, dict[str, float]] = {}
    for row in rows:
        if row["corruption"] not in corruptions or row["severity"] not in severities:
            continue
        for metric, col in (("accuracy", "acc_mean"), ("ece", "ece_mean")):
            if row[col] is not None:
                values.setdefault((row["corruption"], row["severity"], metric), {})[row["method"]] = row[col]
    return RankTable(values)


def mrr_rows(table: RankTable) -> list[dict]:
    """MRR per method over the cells every method covers; partially covered methods are skipped."""
    out = []
    complete = {m for m in table.methods if all(m in table.values[c] for c in table.cells)}
    full = RankTable({c: {m: v for m, v in row.items() if m in complete} for c, row in table.values.items()})
    for m in sorted(complete, key=_method_order):
        out.append({"method": m, "mrr": mrr(full, m), "cells": len(full.values)})
    out.sort(key=lambda r: (-r["mrr"], _method_order(r["method"])))
    return out


def timing_rows(records) -> list[dict]:
    seen = {}
    for r in records:
        seen.setdefault(r.method, (r.passes_per_batch, r.backward_per_batch))
    return [{"method": m, "forward_passes_per_batch": f, "backward_passes_per_batch": b}
            for m, (f, b) in sorted(seen.items(), key=lambda kv: _method_order(kv[0]))]


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(row[h]) if not isinstance(row[h], str) else row[h] for h in header])
    path.write_text(buf.getvalue())


def _json_ready(rows):
    return [{k: (None if v is None else (float(fmt(v)) if isinstance(v, float) and not math.isnan(v) else v))
             for k, v in row.items()} for row in rows]


def report(records, out_dir: str | Path, comparisons=(), eval_severities=range(6),
           ece_settings: dict | None = None, corruptions=None) -> dict[str, Path]:
    """Write severity_curves.csv, mrr.csv, welch.csv, timing.csv and report.json."""
    records = list(records)
    if not records:
        raise ValueError("report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records.sort(key=lambda r: (_method_order(r.method), r.train_corruption or "", r.seed))
    rows = severity_rows(records, eval_severities)
    if corruptions is None:
        corruptions = sorted({r["corruption"] for r in rows})
    table = rank_table(rows, set(corruptions))
    mrr_tab = mrr_rows(table) if table.values else []
    welch = []
    for c in comparisons:
        try:
            welch.append(compare(records, c["method_1"], c["method_2"], c.get("metric", "accuracy"),
                                 int(c.get("severity", 5)), c.get("corruption", "snow")))
        except InsufficientSeedsError as e:
            log.warning("comparison skipped: %s", e)
            welch.append({**{h: None for h in WELCH_CSV_HEADER}, **{k: c.get(k) for k in
                         ("method_1", "method_2", "metric", "severity", "corruption")},
                          "status": "insufficient_seeds"})
    timing = timing_rows(records)
    paths = {
        "severity_curves": out / "severity_curves.csv",
        "mrr": out / "mrr.csv",
        "welch": out / "welch.csv",
        "timing": out / "timing.csv",
        "json": out / "report.json",
    }
    _write_csv(paths["severity_curves"], SEVERITY_CSV_HEADER, rows)
    _write_csv(paths["mrr"], ("method", "mrr", "cells"), mrr_tab)
    _write_csv(paths["welch"], WELCH_CSV_HEADER, welch)
    _write_csv(paths["timing"], ("method", "forward_passes_per_batch", "backward_passes_per_batch"), timing)
    ece_settings = ece_settings or {"n_bins": 15, "binning": "equal_mass"}
    doc = {
        "ece": {"n_bins": int(ece_settings.get("n_bins", 15)), "binning": ece_settings.get("binning", "equal_mass")},
        "config_hashes": sorted({r.config_hash for r in records}),
        "mrr_cells": [list(c) for c in table.cells],
        "severity_curves": _json_ready(rows),
        "mrr": _json_ready(mrr_tab),
        "welch": _json_ready(welch),
        "timing": timing,
    }
    paths["json"].write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return paths


def report_experiment(config: ExperimentConfig, records=None) -> dict[str, Path]:
    records = read_records(config.output_dir) if records is None else records
    chash = config.config_hash()
    records = [r for r in records if r.config_hash == chash]
    comps = list(config.comparisons) or default_comparisons(config)
    return report(records, Path(config.output_dir) / "report", comps, config.eval_severities, config.ece,
                  config.corruptions)


# benchmarking


@dataclass
class BenchResult:
    method: str
    median_s: float
    iqr_s: float
    forward_passes: int
    backward_passes: int
    n_batches: int


def bench_per_batch(config: ExperimentConfig, n_batches: int = 20, labels=None, bench: Benchmark | None = None,
                    warmup: int = 1) -> list[BenchResult]:
    """Seconds per training batch on one fixed batch schedule shared by every method.

    Each method starts from the same initial weights and sees the same
    sequence of batches; ``warmup`` leading batches are excluded from timing.
    """
    if n_batches < 20:
        raise ValueError(f"n_batches must be >= 20, got {n_batches}")
    bench = bench or load_benchmark(config)
    images, labels_ = bench.train.images, bench.train.labels
    seed = config.seeds[0]
    sched_rng = np.random.default_rng([seed, 31337])
    idx = [sched_rng.choice(len(images), size=min(config.batch_size, len(images)), replace=False)
           for _ in range(n_batches + warmup)]
    arch = config.arch_config(bench.n_classes)
    kind = config.corruptions[0] if config.corruptions else "snow"
    results = []
    for label in labels or config.labels():
        scfg = StrategyConfig.from_name(label, rng_seed=seed, nuisance=config.nuisance_spec(kind),
                                        **config.strategy)
        params = init_classifier(seed, bench.n_classes, images.shape[1:], arch)
        params.counter = PassCounter()
        opt = AdadeltaState.for_params(params, **{k: config.optimizer[k] for k in ("rho", "eps", "lr")
                                                  if k in config.optimizer})
        basis = space = None
        if scfg.method in MODEL_BASED:
            basis, space = scfg.nuisance.basis(images.shape[-1], images.shape[1]), scfg.space()
        _, inner_rng = rng_streams(seed)
        secs, fwd, bwd = [], [], []
        for i, b in enumerate(idx):
            f0, b0 = params.counter.snapshot()
            t0 = time.perf_counter()
            train_step((images[b], labels_[b]), params, opt, scfg, basis, space, inner_rng)
            dt = time.perf_counter() - t0
            if i >= warmup:
                secs.append(dt)
                fwd.append(params.counter.forward - f0)
                bwd.append(params.counter.backward - b0)
        if any(f != expected_passes(scfg) for f in fwd):
            raise RuntimeError(f"{label}: counted {sorted(set(fwd))} passes per batch, "
                               f"cost model says {expected_passes(scfg)}")
        q75, q25 = np.percentile(secs, [75, 25])
        results.append(BenchResult(label, float(np.median(secs)), float(q75 - q25), int(np.median(fwd)),
                                   int(np.median(bwd)), len(secs)))
    return results


def write_bench(results, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [asdict(r) for r in results]
    _write_csv(path, ("method", "median_s", "iqr_s", "forward_passes", "backward_passes", "n_batches"), rows)
    return path


def with_overrides(config: ExperimentConfig, **kw) -> ExperimentConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
