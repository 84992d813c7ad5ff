"""Command line entry point: run, calibrate-pol, gen-data, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, parse_overrides
from .dataset import DatasetError, build_non_iid_shards, load_dataset, split_train_test, write_csv
from .model import Architecture, TrainingSettings
from .pol import Inseparable, calibrate_epsilon
from .sim import run_experiment

log = logging.getLogger("dagfl")

OUTPUT_ENV = "DAGFL_OUTPUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_INSEPARABLE = 0, 1, 2, 3


def _config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _output_dir(args, cfg: ExperimentConfig, name: str) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    if cfg["output_dir"]:
        return Path(cfg["output_dir"])
    root = Path(os.environ.get(OUTPUT_ENV, "runs"))
    return root / f"{name}-{cfg.framework}-seed{cfg['seed']}"


def cmd_run(args) -> int:
    cfg = _config(args)
    out = _output_dir(args, cfg, "run")
    result = run_experiment(cfg, out)
    s = result.summary
    print(f"framework={s['framework']} seed={s['seed']} final_accuracy={s['final_accuracy']:.4f} "
          f"best_accuracy={s['best_accuracy']:.4f} nodes={s['node_count']} ticks={s['ticks']}")
    print(f"outputs written to {out}")
    if not s["invariants_ok"]:
        bad = [k for k, v in s["invariants"].items() if not v]
        print(f"end-of-run invariant failure: {', '.join(bad)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_calibrate_pol(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg["data.dataset"], cfg["seed"])
    train_set, _ = split_train_test(data, cfg["data.train_fraction"], cfg["seed"])
    arch = Architecture.from_name(cfg["model.arch"], data, cfg["model.hidden"])
    settings = TrainingSettings(cfg["model.epochs"], cfg["model.lr"], cfg["model.batch_size"])
    out = Path(args.out) if args.out else None
    try:
        report = calibrate_epsilon(arch, settings, train_set, cfg["pol.sigma"], trials=cfg["pol.calibration_trials"],
                                   shard_size=cfg["data.shard_size"], seed=cfg["seed"])
    except Inseparable as exc:
        print(f"inseparable: {exc}", file=sys.stderr)
        if out:
            out.write_text(json.dumps(exc.report.to_json(), indent=2) + "\n")
        return EXIT_INSEPARABLE
    print(f"sigma={report.sigma:g} honest_max={report.honest_max:.3e} falsified_min={report.falsified_min:.3e} "
          f"epsilon={report.epsilon:.3e}")
    if out:
        out.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(cfg["data.dataset"], cfg["seed"])
    train_set, test_set = split_train_test(data, cfg["data.train_fraction"], cfg["seed"])
    plan = build_non_iid_shards(train_set, cfg["runners"], cfg["seed"], shard_size=cfg["data.shard_size"])
    write_csv(train_set, out / "train.csv")
    write_csv(test_set, out / "test.csv")
    (out / "shards.json").write_text(plan.to_json() + "\n")
    print(f"train={len(train_set)} test={len(test_set)} shards={plan.shard_count} x {plan.shard_size} -> {out}")
    return EXIT_OK


def _read_run(path: Path) -> dict | None:
    summary = path / "summary.json"
    metrics = path / "metrics.csv"
    if not summary.exists() or not metrics.exists():
        return None
    data = json.loads(summary.read_text())
    with open(metrics) as fh:
        data["rows"] = sum(1 for _ in csv.reader(fh)) - 1
    return data


def render_report(runs: dict[str, dict]) -> tuple[str, list[str]]:
    """Comparison table with one column per run; returns (text, warnings)."""
    warnings = []
    budgets = {name: r.get("iterations") for name, r in runs.items()}
    if len(set(budgets.values())) > 1:
        warnings.append(f"iteration budgets differ: {budgets}")
    ticks = {name: r.get("ticks") for name, r in runs.items()}
    if len(set(ticks.values())) > 1:
        warnings.append(f"tick counts differ: {ticks}")
    names = list(runs)
    rows = [
        ("framework", [runs[n]["framework"] for n in names]),
        ("seed", [runs[n]["seed"] for n in names]),
        ("final_accuracy", [f"{runs[n]['final_accuracy']:.4f}" for n in names]),
        ("best_accuracy", [f"{runs[n]['best_accuracy']:.4f}" for n in names]),
        ("nodes", [runs[n]["node_count"] for n in names]),
        ("ticks", [runs[n]["ticks"] for n in names]),
    ]
    kinds = sorted({k for n in names for k in runs[n].get("rewards_by_kind", {})})
    for k in kinds:
        rows.append((f"rewards[{k}]", [runs[n].get("rewards_by_kind", {}).get(k, 0) for n in names]))
    profiles = sorted({p for n in names for p in runs[n].get("rewards_by_profile", {})})
    for p in profiles:
        rows.append((f"mean_reward[{p}]", [
            f"{runs[n]['rewards_by_profile'][p]['mean']:.2f}" if p in runs[n].get("rewards_by_profile", {}) else "-"
            for n in names]))
    roles = sorted({r for n in names for r in runs[n].get("pol", {})})
    for r in roles:
        rows.append((f"pol[{r}] proved/invalidated", [
            "{proved}/{invalidated}".format(**runs[n]["pol"][r]) if r in runs[n].get("pol", {}) else "-"
            for n in names]))
    header = ["metric"] + names
    table = [header] + [[label] + [str(v) for v in vals] for label, vals in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines) + "\n", warnings


def cmd_report(args) -> int:
    runs = {}
    for d in args.dirs:
        data = _read_run(Path(d))
        if data is None:
            print(f"skipping {d}: no metrics found", file=sys.stderr)
            continue
        runs[Path(d).name or d] = data
    if not runs:
        print("no runs to report", file=sys.stderr)
        return EXIT_FAIL
    text, warnings = render_report(runs)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(text, end="")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            for line in text.splitlines():
                writer.writerow(line.split())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dagfl", description="DAG-based federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_required=False):
        p.add_argument("--config", help="INI experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, required=seed_required)

    p = sub.add_parser("run", help="run one experiment")
    common(p, seed_required=True)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate-pol", help="calibrate the proof-of-learning threshold")
    common(p)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_calibrate_pol)

    p = sub.add_parser("gen-data", help="write the train/test split and shard plan")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
