"""Command-line entry point: ``latticeagg <command> [options]``.

Exit codes: 0 success, 1 other error, 2 usage, 3 divergence, 4 schema mismatch.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import itertools
import json
import logging
import os
import subprocess
import sys
import time
import warnings
from typing import List, Optional

from latticeagg import __version__
from latticeagg.data import (
    Dataset,
    RawRecord,
    evaluate,
    expand_candidates,
    featurize,
    load_dataset,
    save_dataset,
    token_records,
)
from latticeagg.errors import ConfigError, DivergenceError, LatticeAggError, SchemaError, ShapeError
from latticeagg.model import AggModel, explain, export_calibrator_curves, forward_batch, init_model_from_examples, write_curves_csv
from latticeagg.sfe import DEFAULT_MAX_SUBSET_SIZE, FEATURE_NAMES, TokenTable, build_token_table, filter_table
from latticeagg.training import Candidate, TrainConfig, train, tune

logger = logging.getLogger("latticeagg")

EXIT_OK, EXIT_OTHER, EXIT_USAGE, EXIT_DIVERGED, EXIT_SCHEMA = 0, 1, 2, 3, 4

ARCH_KEYS = ("K", "lattice_size", "rho_lattice_size", "num_keypoints", "rho_keypoints", "output_keypoints",
             "feature_monotonicity", "missing_values", "monotonic_calibrators", "output_init_range")


class UsageError(Exception):
    pass


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             timeout=5, cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _write_manifest(args, inputs: dict, outputs: dict, started: float) -> None:
    manifest = {
        "command": args.command,
        "config": args.config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": getattr(args, "seed", None),
        "artifact_version": __version__,
        "started_at": datetime.datetime.fromtimestamp(started, datetime.timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "git_describe": _git_describe(),
    }
    with open(f"{args.out}.manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


def _load_config(path: Optional[str]) -> dict:
    if not path:
        return {}
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _require_file(path: Optional[str], flag: str) -> str:
    if not path:
        raise UsageError(f"{flag} is required")
    if not os.path.exists(path):
        raise UsageError(f"{flag}: no such file: {path}")
    return path


def _expand_if_configured(records: List[RawRecord], cfg: dict) -> List[RawRecord]:
    contexts = cfg.get("candidate_contexts")
    if contexts == "all":
        contexts = sorted({r.context for r in records})
    return expand_candidates(records, contexts) if contexts else records


def _load_examples(args, cfg: dict, path: str) -> Dataset:
    """A tokens-layout dataset, featurizing raw categorical data through ``--table``."""
    loaded = load_dataset(path)
    if isinstance(loaded, Dataset):
        return loaded
    table_path = args.table or cfg.get("table")
    if not table_path:
        raise UsageError("raw categorical data needs --table")
    table = TokenTable.load(_require_file(table_path, "--table"))
    records = _expand_if_configured(loaded, cfg)
    label_kind = "pm1_binary" if all(r.label in (-1.0, 1.0) for r in records) else "real"
    return featurize(records, table, int(cfg.get("max_size", DEFAULT_MAX_SUBSET_SIZE)), label_kind)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_build_table(args, cfg) -> int:
    data = _require_file(args.data, "--data")
    records = load_dataset(data)
    if isinstance(records, Dataset):
        raise SchemaError("build-table needs a categorical-layout dataset")
    records = _expand_if_configured(records, cfg)
    label_kind = cfg.get("label_kind", "binary")
    table = build_token_table(
        token_records(records, binary=label_kind == "binary"),
        max_size=int(cfg.get("max_size", DEFAULT_MAX_SUBSET_SIZE)),
        tokenizer=cfg.get("tokenizer", "subsets"),
        label_kind=label_kind,
    )
    before = len(table)
    table = filter_table(table, int(cfg.get("count_threshold", 0)), cfg.get("ci_threshold"))
    print(f"entries before filtering: {before}")
    print(f"entries after filtering: {len(table)}")
    if not table.entries:
        warnings.warn("no token survived filtering; the table is empty")
    table.save(args.out)
    return EXIT_OK


def cmd_featurize(args, cfg) -> int:
    data = _require_file(args.data, "--data")
    dataset = _load_examples(args, cfg, data)
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} examples")
    return EXIT_OK


def _arch(cfg: dict, dataset: Dataset) -> dict:
    arch = {k: cfg[k] for k in ARCH_KEYS if k in cfg}
    mono = arch.get("feature_monotonicity")
    if isinstance(mono, dict):
        arch["feature_monotonicity"] = [mono.get(n, "none") for n in dataset.feature_names]
    elif mono is None and list(dataset.feature_names) == list(FEATURE_NAMES):
        arch["feature_monotonicity"] = ["increasing"] + ["none"] * (len(FEATURE_NAMES) - 1)
    arch.setdefault("feature_names", list(dataset.feature_names))
    return arch


def _train_config(args, cfg) -> TrainConfig:
    merged = dict(cfg)
    if args.seed is not None:
        merged["seed"] = args.seed
    if args.epochs is not None:
        merged["epochs"] = args.epochs
    if "loss_kind" not in merged:
        merged["loss_kind"] = "squared_error"
    return TrainConfig.from_dict(merged)


def cmd_train(args, cfg) -> int:
    data = _require_file(args.data, "--data")
    dataset = _load_examples(args, cfg, data)
    if dataset.label_kind == "pm1_binary" and "loss_kind" not in cfg:
        cfg = dict(cfg, loss_kind="logistic_pm1")
    config = _train_config(args, cfg)
    arch = _arch(cfg, dataset)
    validation_path = args.validation or cfg.get("validation_data")
    metric = args.metric[0] if args.metric else cfg.get("metric")
    if args.tune:
        if not validation_path:
            raise UsageError("--tune needs --validation (or validation_data in the config)")
        validation = _load_examples(args, cfg, _require_file(validation_path, "--validation"))
        metric = metric or ("accuracy" if dataset.label_kind == "pm1_binary" else "mse")
        grid = cfg.get("tune_grid", {})
        names = sorted(grid)
        candidates = []
        for combo in itertools.product(*(grid[n] for n in names)) if names else [()]:
            overrides = dict(zip(names, combo))
            c_cfg = TrainConfig.from_dict({**dataclasses.asdict(config), **{k: v for k, v in overrides.items() if k not in ARCH_KEYS}})
            c_arch = {**arch, **{k: v for k, v in overrides.items() if k in ARCH_KEYS}}
            candidates.append(Candidate(config=c_cfg, arch=c_arch))
        result = tune(candidates, dataset.examples, validation.examples, metric)
        result.best_model.save(args.out)
        with open(f"{args.out}.tune.json", "w", encoding="utf-8") as f:
            json.dump({"best_index": result.best_index, "metric": metric, "candidates": result.report}, f, indent=1)
        print(f"best candidate {result.best_index}: {metric}={result.report[result.best_index]['metric']}")
        return EXIT_OK
    validation = None
    if validation_path:
        validation = _load_examples(args, cfg, _require_file(validation_path, "--validation")).examples
        metric = metric or ("accuracy" if dataset.label_kind == "pm1_binary" else "mse")
    if args.model:
        model = AggModel.load(_require_file(args.model, "--model"))
    else:
        model = init_model_from_examples(dataset.examples, **arch)
    result = train(model, dataset.examples, config, validation=validation, metric=metric)
    result.model.save(args.out)
    result.write_trace_csv(f"{args.out}.trace.csv")
    if result.trace:
        print(f"final epoch mean loss: {result.trace[-1].mean_loss:.6g}")
    return EXIT_OK


def _model_and_data(args, cfg):
    model = AggModel.load(_require_file(args.model, "--model"))
    dataset = _load_examples(args, cfg, _require_file(args.data, "--data"))
    if dataset.D != model.D:
        raise SchemaError(f"dataset has {dataset.D} features per token, model expects {model.D}")
    return model, dataset


def cmd_evaluate(args, cfg) -> int:
    model, dataset = _model_and_data(args, cfg)
    metrics = []
    for m in args.metric or cfg.get("metrics") or ["mse"]:
        metrics.extend(x for x in m.split(",") if x)
    report = evaluate(model, dataset, metrics)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=1, sort_keys=True)
        f.write("\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    model, dataset = _model_and_data(args, cfg)
    preds = forward_batch(model, dataset.examples)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "group", "label", "score"])
        for i, (ex, p) in enumerate(zip(dataset.examples, preds)):
            w.writerow([ex.example_id if ex.example_id is not None else i, ex.group_id or "", repr(ex.label), repr(float(p))])
    return EXIT_OK


def cmd_explain(args, cfg) -> int:
    model, dataset = _model_and_data(args, cfg)
    examples = dataset.examples
    if args.id:
        examples = [ex for ex in examples if ex.example_id in set(args.id)]
        if not examples:
            raise ConfigError(f"no example with id in {args.id}")
    reports = [explain(model, ex) for ex in examples]
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(reports, f, indent=1)
        f.write("\n")
    return EXIT_OK


def cmd_export_curves(args, cfg) -> int:
    model = AggModel.load(_require_file(args.model, "--model"))
    curves = export_calibrator_curves(model)
    write_curves_csv(curves, args.out)
    print(f"wrote {len(curves)} curves")
    return EXIT_OK


COMMANDS = {
    "build-table": (cmd_build_table, "build and filter a token table from raw categorical data"),
    "featurize": (cmd_featurize, "turn raw categorical data into per-token features"),
    "train": (cmd_train, "train an aggregation model"),
    "evaluate": (cmd_evaluate, "compute metrics of a model on a dataset"),
    "predict": (cmd_predict, "write per-example scores"),
    "explain": (cmd_explain, "write per-token explanations"),
    "export-curves": (cmd_export_curves, "write every calibrator curve as CSV"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="latticeagg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (flags take precedence)")
        p.add_argument("--out", required=True, help="output path")
        p.add_argument("--seed", type=int)
        if name != "export-curves":
            p.add_argument("--data", help="input dataset (schema in <data>.schema.json)")
        if name not in ("build-table", "export-curves"):
            p.add_argument("--table", help="token table for raw categorical data")
        if name not in ("build-table", "featurize"):
            p.add_argument("--model", help="model JSON file (train: warm start)")
        if name in ("train", "evaluate"):
            p.add_argument("--metric", action="append", help="metric name(s), e.g. mse or precision@1")
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--tune", action="store_true", help="grid search over tune_grid in the config")
            p.add_argument("--validation", help="validation dataset")
        if name == "explain":
            p.add_argument("--id", action="append", help="only explain these example ids")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    handler = COMMANDS[args.command][0]
    try:
        cfg = _load_config(args.config)
        code = handler(args, cfg)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"latticeagg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"latticeagg: training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SchemaError, ShapeError) as exc:
        print(f"latticeagg: schema mismatch: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except (LatticeAggError, OSError, ValueError, KeyError) as exc:
        print(f"latticeagg: error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    inputs = {k: getattr(args, k) for k in ("data", "table", "model", "validation") if getattr(args, k, None)}
    _write_manifest(args, inputs, {"out": args.out}, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
