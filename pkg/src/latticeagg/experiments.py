"""End-to-end runs on the public recipe, wine and CelebA datasets.

Each ``run_*`` function takes raw records, splits 70/10/20 by source example,
builds and filters a token table on the training split, featurizes every
split, trains a K=1 model and reports test metrics. The datasets are not
bundled; see the loaders in :mod:`latticeagg.data`.

    python -m latticeagg.experiments recipes path/to/train.json
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from typing import Dict, List, Optional, Sequence

import numpy as np

from latticeagg.data import (
    PM1_BINARY,
    REAL,
    RawRecord,
    evaluate,
    expand_candidates,
    featurize,
    load_dataset,
    load_kaggle_recipes,
    split,
    token_records,
)
from latticeagg.model import init_model_from_examples
from latticeagg.sfe import build_crossed_token_table, build_token_table, filter_table
from latticeagg.training import Candidate, TrainConfig, train, tune

logger = logging.getLogger(__name__)

SFE_MONOTONICITY = ["increasing", "none", "none", "none", "none", "none"]


@dataclasses.dataclass
class ExperimentResult:
    name: str
    metrics: Dict[str, float]
    table_size: int
    seconds: float
    validation: Dict[str, float] = dataclasses.field(default_factory=dict)


def _fit(train_ds, valid_ds, configs: Sequence[TrainConfig], arch: dict, metric: str):
    if len(configs) == 1:
        model = init_model_from_examples(train_ds.examples, **arch)
        return train(model, train_ds.examples, configs[0]).model
    result = tune([Candidate(c, arch) for c in configs], train_ds.examples, valid_ds.examples, metric)
    return result.best_model


def run_recipes(
    records: List[RawRecord],
    *,
    max_size: int = 3,
    count_threshold: int = 5,
    seed: int = 0,
    configs: Optional[Sequence[TrainConfig]] = None,
    arch: Optional[dict] = None,
) -> ExperimentResult:
    """Cuisine matching: every recipe is crossed with all candidate cuisines."""
    start = time.time()
    cuisines = sorted({r.context for r in records})
    tr, va, te = split(records, (0.7, 0.1, 0.2), seed=seed)
    table = build_crossed_token_table(token_records(tr), cuisines, max_size, min_count=count_threshold)
    table = filter_table(table, count_threshold)
    logger.info("recipes: %d table entries", len(table))
    datasets = [featurize(expand_candidates(part, cuisines), table, max_size, PM1_BINARY) for part in (tr, va, te)]
    configs = configs or [TrainConfig(loss_kind="logistic_pm1", learning_rate=0.05, epochs=5, batch_size=256,
                                      projection_period=1, seed=seed)]
    arch = {"K": 1, "feature_monotonicity": SFE_MONOTONICITY, "num_keypoints": 10, **(arch or {})}
    model = _fit(datasets[0], datasets[1], configs, arch, "accuracy")
    metrics = ["accuracy", "precision@1", "precision@3"]
    return ExperimentResult(
        name="recipes",
        metrics=evaluate(model, datasets[2], metrics),
        validation=evaluate(model, datasets[1], metrics),
        table_size=len(table),
        seconds=time.time() - start,
    )


def run_wine(
    records: List[RawRecord],
    *,
    max_size: int = 3,
    count_threshold: int = 32,
    seed: int = 0,
    configs: Optional[Sequence[TrainConfig]] = None,
    arch: Optional[dict] = None,
) -> ExperimentResult:
    """Wine points regression from sets of review adjectives."""
    start = time.time()
    tr, va, te = split(records, (0.7, 0.1, 0.2), seed=seed)
    table = filter_table(build_token_table(token_records(tr, binary=False), max_size, label_kind="real"),
                         count_threshold)
    datasets = [featurize(part, table, max_size, REAL) for part in (tr, va, te)]
    labels = np.array([r.label for r in tr])
    configs = configs or [TrainConfig(loss_kind="squared_error", learning_rate=0.1, epochs=10, batch_size=128,
                                      seed=seed)]
    arch = {"K": 1, "feature_monotonicity": SFE_MONOTONICITY, "num_keypoints": 10,
            "output_init_range": (float(labels.min()), float(labels.max())), **(arch or {})}
    model = _fit(datasets[0], datasets[1], configs, arch, "mse")
    return ExperimentResult(
        name="wine",
        metrics=evaluate(model, datasets[2], ["mse", "mae"]),
        validation=evaluate(model, datasets[1], ["mse", "mae"]),
        table_size=len(table),
        seconds=time.time() - start,
    )


def load_celeba_attributes(path, target: str = "Attractive") -> List[RawRecord]:
    """``list_attr_celeba.csv``: categories are the attributes marked 1."""
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            ex_id = row.pop("image_id")
            label = 1.0 if row.pop(target) == "1" else -1.0
            cats = sorted(k for k, v in row.items() if v == "1")
            out.append(RawRecord(example_id=ex_id, categories=cats, label=label))
    return out


def run_celeba(
    records: List[RawRecord],
    *,
    max_size: int = 3,
    ci_threshold: float = 0.2,
    seed: int = 0,
    configs: Optional[Sequence[TrainConfig]] = None,
    arch: Optional[dict] = None,
) -> ExperimentResult:
    start = time.time()
    tr, va, te = split(records, (0.7, 0.1, 0.2), seed=seed)
    table = filter_table(build_token_table(token_records(tr), max_size), 0, ci_threshold)
    datasets = [featurize(part, table, max_size, PM1_BINARY) for part in (tr, va, te)]
    configs = configs or [TrainConfig(loss_kind="logistic_pm1", learning_rate=0.05, epochs=5, batch_size=256,
                                      seed=seed)]
    arch = {"K": 1, "feature_monotonicity": SFE_MONOTONICITY, "num_keypoints": 10, **(arch or {})}
    model = _fit(datasets[0], datasets[1], configs, arch, "accuracy")
    return ExperimentResult(
        name="celeba",
        metrics=evaluate(model, datasets[2], ["accuracy"]),
        validation=evaluate(model, datasets[1], ["accuracy"]),
        table_size=len(table),
        seconds=time.time() - start,
    )


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description="Run a dataset reproduction.")
    parser.add_argument("dataset", choices=["recipes", "wine", "celeba"])
    parser.add_argument("path", help="recipes: Kaggle train.json; wine: categorical JSONL with sidecar schema; "
                                     "celeba: list_attr_celeba.csv")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    if args.dataset == "recipes":
        result = run_recipes(load_kaggle_recipes(args.path), seed=args.seed)
    elif args.dataset == "wine":
        result = run_wine(load_dataset(args.path), seed=args.seed)
    else:
        result = run_celeba(load_celeba_attributes(args.path), seed=args.seed)
    print(json.dumps(dataclasses.asdict(result), indent=1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
