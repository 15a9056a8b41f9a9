"""Experiment orchestration: run pipelines, compare runs, re-derive KDE curves.

Verbs:
  run <config>        train/load the initial model, split, unlearn, evaluate,
                      repeat over seeds, write per-seed artifacts + aggregate
  compare <dirs...>   side-by-side metric table with deltas vs the Retrain run
  kde <run dir>       recompute loss-density curves from stored checkpoints

Output root resolution: absolute output_dir wins, else --output-root, else
$MIXUNLEARN_OUTPUT_ROOT, else the current directory. Everything is local
files; nothing touches the network.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, ConfigError, emit_config, parse_config
from .data import (
    Dataset,
    ForgetSplit,
    load_idx,
    make_blobs,
    make_synth_digits,
    merged_training_view,
    split_class_level,
    split_data_level,
    split_noisy,
    split_train_test_per_class,
    write_split_manifest,
)
from .engine import UnlearnRun, run_algorithm, unlearn_retrain
from .evalkit import (
    MetricReport,
    MiaConfig,
    accuracy,
    aggregate_reports,
    class_level_metrics,
    data_level_metrics,
    export_features,
    loss_kde,
    membership_inference_asr,
)
from .models import TrainConfig, load_checkpoint, save_checkpoint, train_classifier
from .models import cnn_arch, mlp_arch

OUTPUT_ROOT_ENV = "MIXUNLEARN_OUTPUT_ROOT"


def resolve_output_dir(cfg: ExperimentConfig, output_root: str | None) -> Path:
    out = Path(cfg.output_dir)
    if out.is_absolute():
        return out
    root = output_root or os.environ.get(OUTPUT_ROOT_ENV) or "."
    return Path(root) / out


def repeat_seeds(base_seed: int, repeat: int) -> dict[str, int]:
    """Independent integer seeds for every randomized stage of one repeat."""
    state = np.random.SeedSequence(base_seed, spawn_key=(repeat,)).generate_state(5)
    names = ("initial", "retrain", "unlearn", "split", "mia")
    return {name: int(value) for name, value in zip(names, state)}


def build_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(train, test) pair; deterministic from the config alone."""
    ds = cfg.dataset
    if ds.kind == "blobs":
        full = make_blobs(ds.classes, ds.per_class + ds.test_per_class, ds.dim, ds.separation, cfg.base_seed)
        return split_train_test_per_class(full, ds.per_class)
    if ds.kind == "synth_digits":
        train = make_synth_digits(ds.per_class, seed=cfg.base_seed)
        test = make_synth_digits(ds.test_per_class, seed=cfg.base_seed + 1)
        return train, test
    if ds.kind == "idx":
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels)
        rng = np.random.default_rng(cfg.base_seed)
        if ds.limit_train and ds.limit_train < len(train):
            train = train.subset(np.sort(rng.permutation(len(train))[: ds.limit_train]))
        if ds.limit_test and ds.limit_test < len(test):
            test = test.subset(np.sort(rng.permutation(len(test))[: ds.limit_test]))
        return train, test
    raise ConfigError(f"unknown dataset kind {ds.kind!r}")


def build_arch(cfg: ExperimentConfig, train: Dataset) -> dict:
    classes = int(train.labels.max()) + 1
    if train.inputs.ndim == 2:
        return mlp_arch(train.inputs.shape[1], list(cfg.initial.hidden), classes)
    _, c, h, w = train.inputs.shape
    return cnn_arch(in_channels=c, hw=(h, w), classes=classes)


def build_split(cfg: ExperimentConfig, train: Dataset, split_seed: int) -> ForgetSplit:
    if cfg.setup == "class_level":
        return split_class_level(train, cfg.split.forget_class)
    if cfg.setup == "data_level":
        return split_data_level(train, cfg.split.forget_classes, cfg.split.fraction, split_seed)
    if cfg.setup == "noisy":
        return split_noisy(train, cfg.split.forget_classes, cfg.split.fraction, split_seed)
    raise ConfigError(f"unknown setup {cfg.setup!r}")


def _unseen_set(cfg: ExperimentConfig, test: Dataset) -> Dataset:
    if cfg.setup == "class_level":
        return test.subset(test.class_indices(cfg.split.forget_class))
    return test


def evaluate_model(cfg: ExperimentConfig, model, split: ForgetSplit, test: Dataset, mia_seed: int) -> MetricReport:
    report = MetricReport()
    report.train_r, report.train_f, report.test = data_level_metrics(model, split, test)
    if cfg.setup == "class_level":
        report.test_r, report.test_f = class_level_metrics(model, test, cfg.split.forget_class)
    try:
        report.asr = membership_inference_asr(
            model, split.forget, _unseen_set(cfg, test), MiaConfig(seed=mia_seed)
        )
    except ValueError:
        report.asr = None  # sets too small to calibrate the attack
    return report


def _fmt_metric(value: float | None) -> str:
    return "" if value is None else repr(round(float(value), 6))


def write_metrics_csv(path: Path, rows: list[tuple[str, MetricReport]], aggregate: dict | None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", *MetricReport.FIELDS])
        for tag, report in rows:
            writer.writerow([tag, *(_fmt_metric(getattr(report, k)) for k in MetricReport.FIELDS)])
        if aggregate:
            for stat in ("mean", "std"):
                if aggregate.get(stat):
                    writer.writerow(
                        [stat, *(_fmt_metric(aggregate[stat].get(k)) for k in MetricReport.FIELDS)]
                    )


def write_traces_csv(path: Path, run: UnlearnRun) -> None:
    keys = sorted(run.traces)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", *keys])
        for i in range(len(run.traces[keys[0]])):
            writer.writerow([i, *(repr(run.traces[k][i]) for k in keys)])


def write_epoch_losses_csv(path: Path, losses: list[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "loss"])
        for i, value in enumerate(losses):
            writer.writerow([i, repr(value)])


def run_single_repeat(cfg: ExperimentConfig, repeat: int, seed_dir: Path) -> MetricReport:
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "config.ini").write_text(emit_config(cfg))
    seeds = repeat_seeds(cfg.base_seed, repeat)
    timings: list[tuple[str, float]] = []

    t0 = time.monotonic()
    train, test = build_datasets(cfg)
    arch = build_arch(cfg, train)
    split = build_split(cfg, train, seeds["split"])
    write_split_manifest(split, seed_dir / "split_manifest.csv")
    timings.append(("data", time.monotonic() - t0))

    f_d = None
    if cfg.algorithm != "retrain":
        t0 = time.monotonic()
        training_view = merged_training_view(split) if cfg.setup == "noisy" else train
        f_d = train_classifier(
            training_view,
            arch,
            TrainConfig(cfg.initial.lr, cfg.initial.epochs, cfg.initial.batch_size, seeds["initial"]),
        )
        save_checkpoint(f_d, seed_dir / "fD.ckpt")
        timings.append(("initial_training", time.monotonic() - t0))

    t0 = time.monotonic()
    if cfg.algorithm == "retrain":
        model = unlearn_retrain(
            split,
            arch,
            TrainConfig(cfg.retrain.lr, cfg.retrain.epochs, cfg.retrain.batch_size, seeds["retrain"]),
        )
        write_epoch_losses_csv(seed_dir / "traces.csv", model.train_losses)
    else:
        ucfg = replace(cfg.unlearn, seed=seeds["unlearn"])
        run = run_algorithm(cfg.algorithm, f_d, split, ucfg)
        model = run.model
        write_traces_csv(seed_dir / "traces.csv", run)
        if run.generator is not None:
            save_checkpoint(run.generator, seed_dir / "generator.ckpt")
    save_checkpoint(model, seed_dir / "model.ckpt")
    timings.append((cfg.algorithm, time.monotonic() - t0))

    t0 = time.monotonic()
    report = evaluate_model(cfg, model, split, test, seeds["mia"])
    curve_f, curve_u = loss_kde(model, split.forget, _unseen_set(cfg, test))
    curve_f.write_csv(seed_dir / "kde_forgetting.csv")
    curve_u.write_csv(seed_dir / "kde_unseen.csv")
    export_features(model, test, seed_dir / "features.csv")
    write_metrics_csv(seed_dir / "metrics.csv", [(str(repeat), report)], None)
    timings.append(("evaluation", time.monotonic() - t0))

    with open(seed_dir / "timing.txt", "w") as f:
        for stage, elapsed in timings:
            f.write(f"{stage}: {elapsed:.3f}s\n")
    return report


def run_experiment(cfg: ExperimentConfig, output_root: str | None = None) -> tuple[list[MetricReport], list[int]]:
    """Execute all repeats; returns (reports, failed repeat indices)."""
    out = resolve_output_dir(cfg, output_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(emit_config(cfg))
    reports: list[tuple[str, MetricReport]] = []
    failed: list[int] = []
    for repeat in range(cfg.repeats):
        seed_dir = out / f"seed_{repeat:03d}"
        try:
            report = run_single_repeat(cfg, repeat, seed_dir)
            reports.append((str(repeat), report))
            print(f"[run] {cfg.name} repeat {repeat}: " + ", ".join(
                f"{k}={v:.2f}" for k, v in report.as_dict().items() if v is not None
            ))
        except Exception:
            failed.append(repeat)
            seed_dir.mkdir(parents=True, exist_ok=True)
            (seed_dir / "FAILED").write_text(traceback.format_exc())
            print(f"[run] {cfg.name} repeat {repeat}: FAILED (see {seed_dir / 'FAILED'})", file=sys.stderr)
    aggregate = aggregate_reports([r for _, r in reports]) if reports else None
    write_metrics_csv(out / "metrics.csv", reports, aggregate)
    if failed:
        (out / "FAILED").write_text("failed repeats: " + ", ".join(map(str, failed)) + "\n")
    return [r for _, r in reports], failed


# ------------------------------------------------------------------ compare


def _read_metrics(path: Path) -> dict[str, dict[str, float | None]]:
    rows: dict[str, dict[str, float | None]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows[row["seed"]] = {
                k: (float(row[k]) if row[k] else None) for k in MetricReport.FIELDS
            }
    return rows


def compare_runs(run_dirs: list[str | Path]) -> str:
    """Text table of aggregate metrics with deltas vs the Retrain oracle run."""
    if len(run_dirs) < 2:
        raise ValueError("compare needs at least two run directories")
    entries = []
    for d in run_dirs:
        d = Path(d)
        cfg = parse_config((d / "config.ini").read_text())
        rows = _read_metrics(d / "metrics.csv")
        if "mean" not in rows:
            raise ValueError(f"{d}: no aggregate row in metrics.csv")
        entries.append((cfg, rows["mean"], rows.get("std"), d))
    setups = {cfg.setup for cfg, *_ in entries}
    if len(setups) != 1:
        raise ValueError(f"incompatible setups across runs: {sorted(setups)}")
    oracles = [e for e in entries if e[0].algorithm == "retrain"]
    if not oracles:
        raise ValueError("no run is tagged as the retrain oracle")
    if len(oracles) > 1:
        raise ValueError("multiple retrain runs; comparison target is ambiguous")
    oracle = oracles[0]

    setup = entries[0][0].setup
    columns = ["test_r", "test_f", "asr"] if setup == "class_level" else ["train_r", "train_f", "test", "asr"]
    ordered = [oracle] + [e for e in entries if e is not oracle]

    def cell(mean, std, key):
        if mean.get(key) is None:
            return "-"
        base = f"{mean[key]:.2f}"
        if std and std.get(key) is not None:
            base += f"±{std[key]:.2f}"
        return base

    header = ["algorithm", *columns, *(f"d_{c}" for c in columns)]
    lines = ["  ".join(f"{h:>12}" for h in header)]
    for cfg, mean, std, _ in ordered:
        deltas = []
        for c in columns:
            if mean.get(c) is None or oracle[1].get(c) is None:
                deltas.append("-")
            else:
                deltas.append(f"{mean[c] - oracle[1][c]:+.2f}")
        row = [cfg.algorithm, *(cell(mean, std, c) for c in columns), *deltas]
        lines.append("  ".join(f"{v:>12}" for v in row))
    return "\n".join(lines)


# ---------------------------------------------------------------------- kde


def regenerate_kde(run_dir: str | Path) -> list[str]:
    """Recompute KDE curves from stored checkpoints; returns summary lines."""
    run_dir = Path(run_dir)
    cfg = parse_config((run_dir / "config.ini").read_text())
    lines = []
    seed_dirs = sorted(p for p in run_dir.iterdir() if p.is_dir() and p.name.startswith("seed_"))
    if not seed_dirs:
        raise ValueError(f"{run_dir}: no seed_* subdirectories")
    for seed_dir in seed_dirs:
        if not (seed_dir / "model.ckpt").exists():
            lines.append(f"{seed_dir.name}: skipped (no checkpoint)")
            continue
        repeat = int(seed_dir.name.split("_")[1])
        train, test = build_datasets(cfg)
        split = build_split(cfg, train, repeat_seeds(cfg.base_seed, repeat)["split"])
        model = load_checkpoint(seed_dir / "model.ckpt")
        curve_f, curve_u = loss_kde(model, split.forget, _unseen_set(cfg, test))
        curve_f.write_csv(seed_dir / "kde_forgetting.csv")
        curve_u.write_csv(seed_dir / "kde_unseen.csv")
        lines.append(
            f"{seed_dir.name}: forgetting integral {curve_f.trapezoid_integral():.3f} "
            f"(bw {curve_f.bandwidth:.4f}), unseen integral {curve_u.trapezoid_integral():.3f} "
            f"(bw {curve_u.bandwidth:.4f})"
        )
    return lines


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixunlearn", description="Unlearning experiment runner")
    sub = p.add_subparsers(dest="verb", required=True)

    run_p = sub.add_parser("run", help="run an experiment config")
    run_p.add_argument("config", help="path to the experiment config")
    run_p.add_argument("--output-root", default=None, help="root for relative output dirs")
    run_p.add_argument("--seed", type=int, default=None, help="override base_seed")
    run_p.add_argument("--repeats", type=int, default=None, help="override repeat count")
    run_p.add_argument("--dataset-dir", default=None, help="directory idx dataset paths are relative to")

    cmp_p = sub.add_parser("compare", help="compare finished runs against the retrain oracle")
    cmp_p.add_argument("dirs", nargs="+", help="run directories")

    kde_p = sub.add_parser("kde", help="recompute loss-density curves for a run")
    kde_p.add_argument("run_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "run":
            cfg = parse_config(Path(args.config).read_text())
            if args.seed is not None:
                cfg.base_seed = args.seed
            if args.repeats is not None:
                if args.repeats < 1:
                    raise ConfigError("--repeats must be >= 1")
                cfg.repeats = args.repeats
            if args.dataset_dir is not None and cfg.dataset.kind == "idx":
                base = Path(args.dataset_dir)
                for key in ("train_images", "train_labels", "test_images", "test_labels"):
                    setattr(cfg.dataset, key, str(base / Path(getattr(cfg.dataset, key)).name))
            _, failed = run_experiment(cfg, args.output_root)
            return 1 if failed else 0
        if args.verb == "compare":
            print(compare_runs(args.dirs))
            return 0
        if args.verb == "kde":
            for line in regenerate_kde(args.run_dir):
                print(line)
            return 0
    except (ConfigError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
