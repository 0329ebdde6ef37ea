"""
idwrec/cli.py
-------------
Command-line entry point and experiment orchestration.

Subcommands
-----------
generate  – draw a synthetic dataset and write it as TSV with ground truth.
train     – train a non-IDW variant (SUR, MUR or a baseline weighting).
idw       – run Iterative Density Weighting (optionally without calibration).
evaluate  – re-evaluate a saved checkpoint on the test split.
sweep     – run one axis of values x variants x seeds and consolidate a CSV.
report    – aggregate existing run directories into summary tables.

Every run writes into a fresh timestamped directory under the output root:
config.json (the full validated spec), metrics.json, run_info.json and
run.log, plus one `seed_<n>/` directory per seed holding history.csv,
idw_log.csv, checkpoint.pt and the optional CSV dumps.

Exit codes: 0 success, 1 usage error, 2 runtime error, 3 partial sweep failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass
from datetime import datetime
from typing import Any, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import psutil
import torch
from dotenv import load_dotenv
from pydantic import ValidationError

from idwrec.dataset import (DatasetSplits, InteractionLog, ItemStats, build_examples, cluster_groups,
                            compute_item_stats, dataset_summary, item_distribution, leave_one_out,
                            load_interactions, read_ground_truth, write_splits)
from idwrec.errors import IdwrecError, InvalidConfigError
from idwrec.evaluation import MetricsReport, evaluate, write_rank_csv
from idwrec.idw import run_idw, write_idw_log
from idwrec.settings import (COMMANDS, LOG_LEVEL_ENV, ExperimentSpec, SweepSpec, configure_threads,
                             load_spec, make_run_dir, resolve_output_root, write_json)
from idwrec.synthetic import GeneratedDataset, generate_dataset, head_tail_clusters, write_dataset
from idwrec.towers import build_model, export_item_representations, load_checkpoint, save_checkpoint
from idwrec.training import train, weighting_for

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - [%(levelname)s] - %(message)s'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_PARTIAL = 3

PRESETS = {
    "synthetic": lambda args: ExperimentSpec.synthetic_preset(),
    "synthetic-visual": lambda args: ExperimentSpec.synthetic_preset(visual=True),
    "movielens": lambda args: ExperimentSpec.movielens_preset(args.data or "data/ml-1m/ratings.dat"),
}


class UsageError(Exception):
    """Raised instead of argparse's own exit so usage errors map to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Logging
# ---------------------------------------------------------------------------

def configure_logging(level: Optional[str] = None) -> None:
    name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format=LOG_FORMAT,
        handlers=[logging.StreamHandler()],
        force=True,
    )


def _attach_run_log(run_dir: str) -> logging.Handler:
    handler = logging.FileHandler(os.path.join(run_dir, "run.log"), encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def _detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

@dataclass
class PreparedData:
    log: InteractionLog
    splits: DatasetSplits
    stats: ItemStats
    groups: Dict[str, FrozenSet[int]]
    item_clusters: Optional[np.ndarray] = None
    generated: Optional[GeneratedDataset] = None


def prepare_data(spec: ExperimentSpec, seed: int, map_dir: Optional[str] = None) -> PreparedData:
    """
    Loads or generates interactions and derives splits, stats and groups.

    Synthetic data is drawn with generator seed `synthetic.rng_seed + seed`.
    """
    source = spec.data
    generated = None
    clusters = None
    if source.kind == "synthetic":
        synth = source.synthetic.model_copy(update={"rng_seed": source.synthetic.rng_seed + seed})
        generated = generate_dataset(synth)
        log = generated.log
        clusters = generated.item_cluster
    else:
        log = load_interactions(source.path, source.kind, map_dir=map_dir)
        if source.ground_truth:
            clusters = read_ground_truth(source.ground_truth, log)

    splits = leave_one_out(build_examples(log, source.max_len), log.num_items)
    stats = compute_item_stats(splits.train, log.num_items)

    if source.group_by == "clusters" and clusters is not None:
        if generated is not None:
            cluster_weights = generated.interest_weights
        else:
            known = clusters[splits.train.labels] >= 0
            cluster_weights = np.bincount(clusters[splits.train.labels][known],
                                          minlength=int(clusters.max()) + 1).astype(np.float64)
        head, tail = head_tail_clusters(cluster_weights, source.head_clusters)
        groups = cluster_groups(clusters, head, tail)
    else:
        groups = {"head": stats.head_set, "tail": stats.tail_set}

    if clusters is not None and len(np.unique(clusters[clusters >= 0])) < 2:
        logger.warning("[CLI] Fewer than two ground-truth clusters; MS score disabled")
        clusters = None
    return PreparedData(log, splits, stats, groups, clusters, generated)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _seed_dir(run_dir: str, seed: int) -> str:
    path = os.path.join(run_dir, f"seed_{seed}")
    os.makedirs(path, exist_ok=True)
    return path


def cmd_generate(spec: ExperimentSpec, run_dir: str) -> Dict[str, Any]:
    if spec.data.kind != "synthetic":
        raise InvalidConfigError("data.kind", "generate needs a synthetic data source")
    out: Dict[str, Any] = {}
    for seed in spec.seeds:
        synth = spec.data.synthetic.model_copy(update={"rng_seed": spec.data.synthetic.rng_seed + seed})
        dataset = generate_dataset(synth)
        write_dataset(dataset, _seed_dir(run_dir, seed))
        out[str(seed)] = {
            "summary": dataset_summary(dataset.log),
            "interest_weights": dataset.interest_weights.tolist(),
            "cluster_frequencies": dataset.cluster_frequencies().tolist(),
        }
    return {"command": "generate", "seeds": out}


def fit_seed(spec: ExperimentSpec, seed: int, seed_dir: str) -> MetricsReport:
    """Trains (or runs IDW for) one seed, evaluates the test split and writes artifacts."""
    variant = spec.variant_spec
    data = prepare_data(spec, seed, map_dir=seed_dir)
    if spec.write_splits:
        write_splits(data.splits, os.path.join(seed_dir, "splits"))

    towers = spec.towers.model_copy(update={
        "rng_seed": seed,
        "num_reps": 1 if variant.single_rep else spec.towers.num_reps,
    })
    train_config = spec.train.model_copy(update={"rng_seed": seed, "strategy": variant.strategy})
    model = build_model(data.log.num_items, towers)

    if variant.idw:
        idw_config = spec.idw.model_copy(update={
            "calibrate": spec.idw.calibrate and variant.calibrate,
            "wake": spec.idw.wake.model_copy(update={"rng_seed": seed}),
        })
        result = run_idw(model, data.splits, data.stats, train_config, idw_config,
                         protocol=spec.eval, item_clusters=data.item_clusters,
                         weights_dir=os.path.join(seed_dir, "weights"))
        write_idw_log(os.path.join(seed_dir, "idw_log.csv"), result.log, train_config.monitor_k)
        result.baseline.write_csv(os.path.join(seed_dir, "history.csv"))
        if result.calibration is not None:
            result.calibration.write_csv(os.path.join(seed_dir, "calibration_history.csv"))
        normalize_eval = False
    else:
        weighting = weighting_for(train_config, data.stats)
        history = train(model, data.splits, data.stats, train_config, weighting, protocol=spec.eval)
        history.write_csv(os.path.join(seed_dir, "history.csv"))
        normalize_eval = weighting.normalize_items_eval

    report, ranks = evaluate(model, data.splits.test, data.splits.user_histories, data.log.num_items,
                             spec.eval, groups=data.groups, normalize_items=normalize_eval,
                             item_clusters=data.item_clusters, return_ranks=True)
    save_checkpoint(os.path.join(seed_dir, "checkpoint.pt"), model, normalize_eval)
    if spec.export_items:
        export_item_representations(model, os.path.join(seed_dir, "items.csv"),
                                    normalize=normalize_eval, item_ids=data.log.item_ids)
    if spec.write_ranks:
        write_rank_csv(os.path.join(seed_dir, "ranks.csv"), data.splits.test, ranks, data.log.user_ids)
    return report


def cmd_fit(spec: ExperimentSpec, run_dir: str) -> Dict[str, Any]:
    is_idw = spec.variant_spec.idw
    if is_idw != (spec.command == "idw"):
        raise InvalidConfigError(
            "variant",
            f"'{spec.variant}' is {'an IDW' if is_idw else 'a non-IDW'} variant; "
            f"use the '{'idw' if is_idw else 'train'}' command",
        )
    reports: Dict[str, Any] = {}
    for seed in spec.seeds:
        logger.info("[CLI] %s variant=%s seed=%d", spec.command, spec.variant, seed)
        report = fit_seed(spec, seed, _seed_dir(run_dir, seed))
        reports[str(seed)] = report.model_dump()
    return {"command": spec.command, "variant": spec.variant, "seeds": reports}


def cmd_evaluate(spec: ExperimentSpec, run_dir: str) -> Dict[str, Any]:
    model, normalize_eval = load_checkpoint(spec.checkpoint)
    reports: Dict[str, Any] = {}
    seed = spec.seeds[0]
    data = prepare_data(spec, seed)
    if data.log.num_items != model.num_items:
        raise InvalidConfigError(
            "checkpoint", f"checkpoint has {model.num_items} items, data has {data.log.num_items}"
        )
    report, ranks = evaluate(model, data.splits.test, data.splits.user_histories, data.log.num_items,
                             spec.eval, groups=data.groups, normalize_items=normalize_eval,
                             item_clusters=data.item_clusters, return_ranks=True)
    reports[str(seed)] = report.model_dump()
    if spec.write_ranks:
        write_rank_csv(os.path.join(_seed_dir(run_dir, seed), "ranks.csv"),
                       data.splits.test, ranks, data.log.user_ids)
    return {"command": "evaluate", "variant": spec.variant, "seeds": reports}


def _metric_rows(metrics: Dict[str, Any]) -> List[Tuple[str, str, str, float]]:
    """(seed, split, metric, value) rows of one metrics.json payload."""
    rows = []
    for seed, payload in metrics.get("seeds", {}).items():
        if "entries" not in payload:
            continue
        report = MetricsReport(**payload)
        for key, value in report.flat().items():
            split, metric = key.split("/", 1) if "/" in key else ("items", key)
            rows.append((seed, split, metric, value))
    return rows


def cmd_report(spec: ExperimentSpec, run_dir: str) -> Dict[str, Any]:
    """Mean and standard deviation over seeds per (variant, split, metric)."""
    grouped: Dict[Tuple[str, str, str], List[float]] = {}
    first_config: Optional[Dict[str, Any]] = None
    for source in spec.run_dirs:
        with open(os.path.join(source, "metrics.json"), "r", encoding="utf-8") as f:
            metrics = json.load(f)
        if first_config is None and os.path.exists(os.path.join(source, "config.json")):
            with open(os.path.join(source, "config.json"), "r", encoding="utf-8") as f:
                first_config = json.load(f)
        variant = metrics.get("variant", "?")
        for _, split, metric, value in _metric_rows(metrics):
            grouped.setdefault((variant, split, metric), []).append(value)

    summary = []
    for (variant, split, metric), values in sorted(grouped.items()):
        arr = np.asarray(values, dtype=np.float64)
        summary.append({"variant": variant, "split": split, "metric": metric,
                        "mean": float(arr.mean()), "std": float(arr.std()), "n": len(values)})

    with open(os.path.join(run_dir, "summary.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "split", "metric", "mean", "std", "n"])
        writer.writeheader()
        writer.writerows(summary)
    with open(os.path.join(run_dir, "summary.md"), "w", encoding="utf-8") as f:
        f.write("| variant | split | metric | mean | std | n |\n|---|---|---|---|---|---|\n")
        for r in summary:
            f.write(f"| {r['variant']} | {r['split']} | {r['metric']} | "
                    f"{100 * r['mean']:.2f} | {100 * r['std']:.2f} | {r['n']} |\n")

    out: Dict[str, Any] = {"command": "report", "rows": len(summary)}
    if first_config is not None and "axis" not in first_config:
        source_spec = ExperimentSpec(**first_config)
        data = prepare_data(source_spec, source_spec.seeds[0])
        stats = dataset_summary(data.log)
        write_json(os.path.join(run_dir, "dataset_stats.json"), stats)
        with open(os.path.join(run_dir, "item_distribution.csv"), "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["rank", "item_id", "frequency"])
            for rank, (item, freq) in enumerate(item_distribution(data.stats), start=1):
                writer.writerow([rank, item, freq])
        out["dataset"] = stats
    return out


COMMAND_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_fit,
    "idw": cmd_fit,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def run(spec: ExperimentSpec, output_root: Optional[str] = None) -> str:
    """
    Executes one experiment into a new run directory.

    Args:
        spec (ExperimentSpec): Validated experiment.
        output_root (Optional[str]): Parent directory; see resolve_output_root().

    Returns:
        str: The run directory.

    Raises:
        InvalidConfigError: If a referenced path is missing.
        IdwrecError: On any failure inside the pipeline.
    """
    if spec.command == "sweep":
        raise InvalidConfigError("command", "use sweep() for sweep specs")
    spec.check_paths()
    root = resolve_output_root(output_root, spec.output_root)
    run_dir = make_run_dir(root, spec.command if spec.command in ("generate", "report")
                           else f"{spec.command}-{spec.variant}")
    handler = _attach_run_log(run_dir)
    started = time.time()
    started_at = datetime.now().isoformat(timespec="seconds")
    try:
        logger.info("[CLI] Run directory: %s", run_dir)
        write_json(os.path.join(run_dir, "config.json"), spec.model_dump())
        metrics = COMMAND_HANDLERS[spec.command](spec, run_dir)
        write_json(os.path.join(run_dir, "metrics.json"), metrics)
        write_json(os.path.join(run_dir, "run_info.json"), {
            "started_at": started_at,
            "finished_at": datetime.now().isoformat(timespec="seconds"),
            "wall_seconds": round(time.time() - started, 3),
            "rss_mb": round(psutil.Process(os.getpid()).memory_info().rss / (1024 ** 2), 1),
            "python": platform.python_version(),
            "torch": torch.__version__,
            "numpy": np.__version__,
            "torch_threads": torch.get_num_threads(),
        })
    finally:
        _detach_run_log(handler)
    return run_dir


def consolidate(records: Sequence[Tuple[Any, str, int, str]], path: str) -> int:
    """
    Writes `axis_value,variant,seed,split,metric,value` rows read from each
    run's metrics.json; returns the number of rows.
    """
    count = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["axis_value", "variant", "seed", "split", "metric", "value"])
        for value, variant, seed, run_dir in records:
            with open(os.path.join(run_dir, "metrics.json"), "r", encoding="utf-8") as m:
                metrics = json.load(m)
            for _, split, metric, metric_value in _metric_rows(metrics):
                writer.writerow([value, variant, seed, split, metric, metric_value])
                count += 1
    return count


def sweep(spec: SweepSpec, output_root: Optional[str] = None) -> Tuple[str, List[Dict[str, Any]]]:
    """
    Runs every (value, variant, seed) combination sequentially and
    consolidates their metrics. A failing run is logged and recorded; the
    sweep carries on.

    Returns:
        Tuple[str, List[Dict]]: Path of the consolidated CSV and the failures.
    """
    root = resolve_output_root(output_root, spec.base.output_root)
    sweep_dir = make_run_dir(root, f"sweep-{spec.axis}")
    handler = _attach_run_log(sweep_dir)
    csv_path = os.path.join(sweep_dir, "sweep.csv")
    records: List[Tuple[Any, str, int, str]] = []
    failures: List[Dict[str, Any]] = []
    try:
        write_json(os.path.join(sweep_dir, "config.json"), spec.model_dump())
        plan = spec.runs()
        logger.info("[Sweep] %d runs over %s=%s", len(plan), spec.axis, spec.values)
        for value, variant, seed, run_spec in plan:
            try:
                run_dir = run(run_spec, output_root=os.path.join(sweep_dir, "runs"))
                records.append((value, variant, seed, run_dir))
            except Exception as e:
                logger.error("[Sweep] Run %s=%s variant=%s seed=%d failed: %s",
                             spec.axis, value, variant, seed, e, exc_info=True)
                failures.append({"axis_value": value, "variant": variant, "seed": seed, "error": str(e)})
        rows = consolidate(records, csv_path)
        logger.info("[Sweep] Wrote %d rows to %s (%d failed runs)", rows, csv_path, len(failures))
        if failures:
            write_json(os.path.join(sweep_dir, "failures.json"), failures)
    finally:
        _detach_run_log(handler)
    return csv_path, failures


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="idwrec", description="Two-tower sequential recommenders with density weighting")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument("--config", help="JSON experiment (or sweep) spec")
        p.add_argument("--preset", choices=sorted(PRESETS), help="Start from a named preset")
        p.add_argument("--data", help="Data path for the movielens preset")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="Dotted override, e.g. train.batch_size=128 (repeatable)")
        p.add_argument("--seeds", help="Comma-separated seeds, e.g. 0,1,2")
        p.add_argument("--variant", help="Variant name (comma-separated list for sweep)")
        p.add_argument("--output-root", help="Parent directory of run directories")
        p.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
        if command == "evaluate":
            p.add_argument("--checkpoint", help="checkpoint.pt written by train/idw")
        if command == "report":
            p.add_argument("--runs", nargs="+", default=[], help="Run directories to aggregate")
    return parser


def _flag_overrides(args: argparse.Namespace) -> List[str]:
    overrides: List[str] = []
    prefix = "base." if args.command == "sweep" else ""
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        overrides.append(f"{prefix}seeds={json.dumps(seeds)}")
    if args.variant:
        if args.command == "sweep":
            overrides.append(f"variants={json.dumps(args.variant.split(','))}")
        else:
            overrides.append(f"variant={json.dumps(args.variant)}")
    if getattr(args, "checkpoint", None):
        overrides.append(f"checkpoint={json.dumps(args.checkpoint)}")
    if getattr(args, "runs", None):
        overrides.append(f"run_dirs={json.dumps(args.runs)}")
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"idwrec: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level)
    configure_threads()

    try:
        preset = PRESETS[args.preset](args) if args.preset else None
        spec = load_spec(args.config, list(args.overrides) + _flag_overrides(args),
                         command=args.command, preset=preset)
    except ValidationError as e:
        fields = ", ".join(".".join(str(p) for p in err["loc"]) for err in e.errors())
        logger.error("[CLI] Invalid configuration (%s): %s", fields, e)
        return EXIT_USAGE
    except (InvalidConfigError, ValueError) as e:
        logger.error("[CLI] Invalid configuration: %s", e)
        return EXIT_USAGE

    try:
        if isinstance(spec, SweepSpec):
            _, failures = sweep(spec, args.output_root)
            return EXIT_PARTIAL if failures else EXIT_OK
        run_dir = run(spec, args.output_root)
        logger.info("[CLI] Done: %s", run_dir)
        return EXIT_OK
    except InvalidConfigError as e:
        logger.error("[CLI] Invalid configuration: %s", e)
        return EXIT_USAGE
    except IdwrecError as e:
        logger.error("[CLI] Run failed: %s", e, exc_info=True)
        return EXIT_RUNTIME
    except Exception as e:
        logger.error("[CLI] Unexpected failure: %s", e, exc_info=True)
        return EXIT_RUNTIME
