"""Command line entry point: ``mbrobust <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import harness as H
from .classifier import load_checkpoint, save_checkpoint
from .data import SyntheticSpec, export_benchmark, generate_synthetic
from .strategies import BASELINES, parse_method_name, train

log = logging.getLogger("mbrobust")


def _config(args) -> H.ExperimentConfig:
    cfg = H.ExperimentConfig.load(args.config) if args.config else H.ExperimentConfig()
    over = {}
    if getattr(args, "seeds", None):
        over["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "epochs", None):
        over["epochs"] = args.epochs
    if getattr(args, "output_dir", None):
        over["output_dir"] = args.output_dir
    return replace(cfg, **over) if over else cfg


def cmd_synth_data(args) -> int:
    spec = SyntheticSpec(seed=args.seed, n_classes=args.n_classes, train_per_class=args.train_per_class,
                         test_per_class=args.test_per_class, corruptions=tuple(args.corruptions.split(",")))
    rows = export_benchmark(generate_synthetic(spec), args.out)
    print(f"wrote {len(rows['train'])} train and {len(rows['test'])} test images under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    bench = H.load_benchmark(cfg)
    method, level = parse_method_name(args.method)
    kind = None if method in BASELINES else (args.corruption or cfg.corruptions[0])
    job = H.Job(args.method, method, level, kind, args.seed)
    scfg = H.strategy_for(cfg, job)
    rep = train(scfg, bench.train, epochs=cfg.epochs, batch_size=cfg.batch_size,
                arch=cfg.arch_config(bench.n_classes), **cfg.optimizer)
    save_checkpoint(rep.params, args.checkpoint)
    print(json.dumps({"method": scfg.label, "corruption": kind, "seed": args.seed,
                      "final_loss": rep.epoch_losses[-1], "checkpoint": str(args.checkpoint)}))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    bench = H.load_benchmark(cfg)
    params = load_checkpoint(args.checkpoint)
    kinds = [args.corruption] if args.corruption else list(bench.tests)
    out = {}
    for kind in kinds:
        if kind not in bench.tests:
            raise ValueError(f"no test sets for corruption {kind!r}; have {sorted(bench.tests)}")
        res = H.evaluate(params, bench.tests[kind], cfg.eval_severities, int(cfg.ece.get("n_bins", 15)),
                         cfg.ece.get("binning", "equal_mass"))
        out[kind] = {str(s): v for s, v in res.items()}
    print(json.dumps(out, indent=1, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args)
    labels = args.methods.split(",") if args.methods else None
    results = H.bench_per_batch(cfg, args.batches, labels)
    path = H.write_bench(results, args.out or Path(cfg.output_dir) / "bench.csv")
    for r in results:
        print(f"{r.method:8s} median {r.median_s * 1e3:8.1f} ms  iqr {r.iqr_s * 1e3:7.1f} ms  "
              f"passes {r.forward_passes}")
    print(f"wrote {path}")
    return 0


def cmd_compare(args) -> int:
    records = H.read_records(args.records)
    if not records:
        raise ValueError(f"no records found at {args.records}")
    row = H.compare(records, args.method_1, args.method_2, args.metric, args.severity, args.corruption)
    print(json.dumps(row, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    if args.config:
        paths = H.report_experiment(_config(args))
    else:
        records = H.read_records(args.records)
        paths = H.report(records, args.out or Path(args.records) / "report")
    for p in paths.values():
        print(p)
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.parallel_seeds:
        cfg = replace(cfg, parallel_seeds=args.parallel_seeds)

    def progress(rec):
        log.info("done %s %s seed %d", rec.method, rec.train_corruption or "-", rec.seed)

    records = H.run_experiment(cfg, progress=progress)
    print(f"{len(records)} records in {Path(cfg.output_dir) / H.RECORDS_FILE}")
    if not args.no_report:
        for p in H.report_experiment(cfg, records).values():
            print(p)
    return 0


def cmd_config(args) -> int:
    if args.out:
        Path(args.out).write_text(H.EXAMPLE_CONFIG)
    else:
        sys.stdout.write(H.EXAMPLE_CONFIG)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbrobust", description="Model-based robust training experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="experiment YAML (defaults are used when omitted)")
        sp.add_argument("--seeds", help="comma-separated seeds overriding the config")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--output-dir")
        return sp

    sp = sub.add_parser("synth-data", help="write the synthetic benchmark as PNGs plus manifests")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n-classes", type=int, default=14)
    sp.add_argument("--train-per-class", type=int, default=100)
    sp.add_argument("--test-per-class", type=int, default=30)
    sp.add_argument("--corruptions", default="snow,rain")
    sp.set_defaults(func=cmd_synth_data)

    sp = with_config(sub.add_parser("train", help="train one method and save a checkpoint"))
    sp.add_argument("--method", required=True, help="e.g. Vanilla, AT, MDA5, MAT2")
    sp.add_argument("--corruption", help="variation model for model-based methods")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_train)

    sp = with_config(sub.add_parser("eval", help="accuracy and ECE of a checkpoint per severity"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--corruption")
    sp.set_defaults(func=cmd_eval)

    sp = with_config(sub.add_parser("bench", help="seconds and classifier passes per training batch"))
    sp.add_argument("--batches", type=int, default=20)
    sp.add_argument("--methods", help="comma-separated labels (default: all configured)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("compare", help="Welch t-test between two methods on stored records")
    sp.add_argument("--records", required=True, help="run directory or records.jsonl")
    sp.add_argument("--method-1", required=True)
    sp.add_argument("--method-2", required=True)
    sp.add_argument("--metric", default="accuracy", choices=H.METRICS)
    sp.add_argument("--severity", type=int, default=5)
    sp.add_argument("--corruption", default="snow")
    sp.set_defaults(func=cmd_compare)

    sp = with_config(sub.add_parser("report", help="write CSV and JSON tables from stored records"))
    sp.add_argument("--records", help="run directory when no config is given")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_report)

    sp = with_config(sub.add_parser("run", help="train and evaluate the full method x seed matrix"))
    sp.add_argument("--parallel-seeds", type=int)
    sp.add_argument("--no-report", action="store_true")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("config", help="print an example experiment config")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report" and not args.config and not args.records:
        print("error: report needs --config or --records", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
