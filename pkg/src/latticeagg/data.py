"""Dataset I/O, splitting and evaluation metrics."""

from __future__ import annotations

import csv
import dataclasses
import json
import re
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from latticeagg.errors import ConfigError, ParseError, SchemaError
from latticeagg.model import AggModel, ExampleSet, forward_batch
from latticeagg.sfe import FEATURE_NAMES, TokenRecord, TokenTable, assemble_features, normalize_all

REAL = "real"
PM1_BINARY = "pm1_binary"
LABEL_KINDS = (REAL, PM1_BINARY)

ROLES = ("id", "group", "category_list", "context", "token_feature", "token_features", "label")


@dataclasses.dataclass
class Dataset:
    examples: List[ExampleSet]
    feature_names: List[str]
    label_kind: str = REAL
    split_tag: Optional[str] = None

    def __post_init__(self):
        if self.label_kind not in LABEL_KINDS:
            raise SchemaError(f"label_kind must be one of {LABEL_KINDS}")
        D = len(self.feature_names)
        for ex in self.examples:
            if ex.tokens.shape[1] != D:
                raise SchemaError(f"example {ex.example_id!r} has {ex.tokens.shape[1]} features, expected {D}")
            if self.label_kind == PM1_BINARY and ex.label not in (-1.0, 1.0):
                raise SchemaError(f"example {ex.example_id!r} has label {ex.label}, expected -1/+1")

    def __len__(self):
        return len(self.examples)

    @property
    def D(self) -> int:
        return len(self.feature_names)


@dataclasses.dataclass
class RawRecord:
    """A raw categorical example before featurization."""

    example_id: str
    categories: List[str]
    label: float
    context: str = ""
    group_id: Optional[str] = None


@dataclasses.dataclass
class Schema:
    """Sidecar descriptor mapping columns to roles.

    ``layout`` is ``"tokens"`` (one row per token, grouped by id) or
    ``"categorical"`` (one row per example with a category list).
    """

    columns: Dict[str, str]
    format: str = "jsonl"
    layout: str = "tokens"
    label_kind: str = REAL
    category_delimiter: str = "|"

    def __post_init__(self):
        bad = {r for r in self.columns.values() if r not in ROLES}
        if bad:
            raise SchemaError(f"unknown column roles {sorted(bad)}")
        if self.format not in ("jsonl", "csv"):
            raise SchemaError("format must be 'jsonl' or 'csv'")
        if self.layout not in ("tokens", "categorical"):
            raise SchemaError("layout must be 'tokens' or 'categorical'")
        if self.label_kind not in LABEL_KINDS:
            raise SchemaError(f"label_kind must be one of {LABEL_KINDS}")

    def cols(self, role: str) -> List[str]:
        return [c for c, r in self.columns.items() if r == role]

    def col(self, role: str) -> Optional[str]:
        found = self.cols(role)
        return found[0] if found else None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=1)
            f.write("\n")


def sidecar_path(path) -> str:
    return f"{path}.schema.json"


def _read_rows(path, schema: Schema):
    """Yield ``(line_number, row_dict)``."""
    with open(path, encoding="utf-8", newline="") as f:
        if schema.format == "csv":
            reader = csv.DictReader(f)
            for row in reader:
                yield reader.line_num, row
        else:
            for lineno, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(str(exc), line=lineno) from None
                if not isinstance(row, dict):
                    raise ParseError("expected a JSON object", line=lineno)
                yield lineno, row


def _parse_float(value, lineno, allow_missing=False) -> float:
    if value is None or value == "":
        if allow_missing:
            return float("nan")
        raise ParseError("missing value", line=lineno)
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ParseError(f"not a number: {value!r}", line=lineno) from None


def _get(row, col, lineno):
    if col not in row:
        raise ParseError(f"missing column {col!r}", line=lineno)
    return row[col]


def load_dataset(path, schema: Optional[Schema] = None):
    """Load a tokens-layout :class:`Dataset` or a list of :class:`RawRecord`.

    The schema defaults to the sidecar file ``<path>.schema.json``.
    """
    if schema is None:
        schema = Schema.load(sidecar_path(path))
    if schema.layout == "categorical":
        return _load_categorical(path, schema)
    return _load_tokens(path, schema)


def _load_tokens(path, schema: Schema) -> Dataset:
    id_col, label_col, group_col = schema.col("id"), schema.col("label"), schema.col("group")
    feat_cols = schema.cols("token_feature")
    vec_col = schema.col("token_features")
    if id_col is None or label_col is None or (not feat_cols and vec_col is None):
        raise SchemaError("tokens layout needs id, label and token feature columns")
    names = feat_cols or None
    order: List[str] = []
    grouped: Dict[str, dict] = {}
    D = len(feat_cols) if feat_cols else None
    for lineno, row in _read_rows(path, schema):
        ex_id = str(_get(row, id_col, lineno))
        label = _parse_float(_get(row, label_col, lineno), lineno)
        if feat_cols:
            vec = [_parse_float(_get(row, c, lineno), lineno, allow_missing=True) for c in feat_cols]
        else:
            raw = _get(row, vec_col, lineno)
            if isinstance(raw, str):
                try:
                    raw = json.loads(raw)
                except json.JSONDecodeError as exc:
                    raise ParseError(str(exc), line=lineno) from None
            if not isinstance(raw, list):
                raise ParseError("token_features must be a list", line=lineno)
            vec = [_parse_float(v, lineno, allow_missing=True) for v in raw]
            if D is None:
                D = len(vec)
        if len(vec) != D:
            raise SchemaError(f"line {lineno}: {len(vec)} token features, expected {D}")
        entry = grouped.get(ex_id)
        if entry is None:
            group = row.get(group_col) if group_col else None
            entry = grouped[ex_id] = {"tokens": [], "label": label,
                                      "group": None if group in (None, "") else str(group)}
            order.append(ex_id)
        elif entry["label"] != label:
            raise SchemaError(f"line {lineno}: example {ex_id!r} has conflicting labels")
        entry["tokens"].append(vec)
    if names is None:
        names = [f"f{i}" for i in range(D or 0)]
    examples = [
        ExampleSet(tokens=np.array(grouped[i]["tokens"], dtype=float), label=grouped[i]["label"],
                   group_id=grouped[i]["group"], example_id=i)
        for i in order
    ]
    return Dataset(examples=examples, feature_names=list(names), label_kind=schema.label_kind)


def _load_categorical(path, schema: Schema) -> List[RawRecord]:
    id_col, label_col = schema.col("id"), schema.col("label")
    cat_col, ctx_col, group_col = schema.col("category_list"), schema.col("context"), schema.col("group")
    if id_col is None or label_col is None or cat_col is None:
        raise SchemaError("categorical layout needs id, category_list and label columns")
    records = []
    for lineno, row in _read_rows(path, schema):
        cats = _get(row, cat_col, lineno)
        if isinstance(cats, str):
            cats = [c for c in cats.split(schema.category_delimiter) if c] if schema.format == "csv" else [cats]
        if not isinstance(cats, list):
            raise ParseError("category_list must be a list", line=lineno)
        label = _parse_float(_get(row, label_col, lineno), lineno)
        if schema.label_kind == PM1_BINARY and label not in (-1.0, 1.0):
            raise SchemaError(f"line {lineno}: label {label} is not -1/+1")
        group = row.get(group_col) if group_col else None
        records.append(RawRecord(
            example_id=str(_get(row, id_col, lineno)),
            categories=[str(c) for c in cats],
            label=label,
            context=str(row.get(ctx_col) or "") if ctx_col else "",
            group_id=None if group in (None, "") else str(group),
        ))
    return records


def save_dataset(dataset: Dataset, path, format: str = "jsonl") -> Schema:
    """Write a tokens-layout dataset plus its sidecar schema; returns the schema."""
    names = list(dataset.feature_names)
    columns = {"id": "id", "group": "group", "label": "label"}
    columns.update({n: "token_feature" for n in names})
    if len(set(columns)) != 3 + len(names):
        raise SchemaError("feature names collide with id/group/label columns")
    schema = Schema(columns=columns, format=format, layout="tokens", label_kind=dataset.label_kind)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if format == "csv":
            w = csv.writer(f)
            w.writerow(list(columns))
        for i, ex in enumerate(dataset.examples):
            ex_id = ex.example_id if ex.example_id is not None else str(i)
            for tok in ex.tokens:
                vals = [None if np.isnan(v) else float(v) for v in tok]
                if format == "csv":
                    w.writerow([ex_id, ex.group_id or "", repr(ex.label)] + ["" if v is None else repr(v) for v in vals])
                else:
                    row = {"id": ex_id, "group": ex.group_id, "label": ex.label}
                    row.update(zip(names, vals))
                    f.write(json.dumps(row) + "\n")
    schema.save(sidecar_path(path))
    return schema


def save_raw_records(records: Sequence[RawRecord], path) -> Schema:
    schema = Schema(columns={"id": "id", "categories": "category_list", "context": "context",
                             "group": "group", "label": "label"},
                    format="jsonl", layout="categorical",
                    label_kind=PM1_BINARY if all(r.label in (-1.0, 1.0) for r in records) and records else REAL)
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({"id": r.example_id, "categories": list(r.categories), "context": r.context,
                                "group": r.group_id, "label": r.label}, ensure_ascii=False) + "\n")
    schema.save(sidecar_path(path))
    return schema


# ---------------------------------------------------------------------------
# Raw categorical helpers
# ---------------------------------------------------------------------------


def expand_candidates(records: Sequence[RawRecord], contexts: Sequence[str]) -> List[RawRecord]:
    """One row per (record, candidate context): +1 for the true context, -1 otherwise.

    The true context is the record's ``context``. Rows keep the source id as
    ``group_id`` so that splits and ranking metrics stay per source example.
    """
    out = []
    for r in records:
        for c in contexts:
            out.append(RawRecord(example_id=f"{r.example_id}::{c}", categories=list(r.categories),
                                 label=1.0 if c == r.context else -1.0, context=c,
                                 group_id=r.group_id or r.example_id))
    return out


def token_records(records: Iterable[RawRecord], binary: bool = True) -> List[TokenRecord]:
    """Token-training rows; -1/+1 labels map to 0/1 when ``binary``."""
    out = []
    for r in records:
        y = (r.label + 1.0) / 2.0 if binary and r.label in (-1.0, 1.0) else r.label
        out.append(TokenRecord(categories=r.categories, label=y, context=r.context))
    return out


def featurize(records: Sequence[RawRecord], table: TokenTable, max_size: int, label_kind: str = PM1_BINARY) -> Dataset:
    """Route raw categorical records through the feature engine."""
    examples = []
    for r in records:
        assembled = assemble_features(r.categories, table, max_size, r.context)
        examples.append(ExampleSet(tokens=assembled.features, label=r.label, group_id=r.group_id,
                                   example_id=r.example_id, token_names=assembled.names))
    return Dataset(examples=examples, feature_names=list(FEATURE_NAMES), label_kind=label_kind)


def load_kaggle_recipes(path, normalizer: Optional[Callable[[str], str]] = None) -> List[RawRecord]:
    """Read the recipe-ingredients ``train.json`` (id, cuisine, ingredients)."""
    with open(path, encoding="utf-8") as f:
        rows = json.load(f)
    return [RawRecord(example_id=str(r["id"]), categories=normalize_all(r["ingredients"], normalizer),
                      label=1.0, context=r["cuisine"], group_id=str(r["id"]))
            for r in rows]


def load_wine_reviews(path, vocabulary: Sequence[str], normalizer: Optional[Callable[[str], str]] = None
                      ) -> List[RawRecord]:
    """Wine-review CSV to adjective sets drawn from ``vocabulary``, labelled by points."""
    vocab = sorted({v.lower() for v in vocabulary})
    pattern = re.compile(r"\b(" + "|".join(re.escape(v) for v in vocab) + r")\b")
    out = []
    with open(path, encoding="utf-8", newline="") as f:
        for i, row in enumerate(csv.DictReader(f)):
            if not row.get("points"):
                continue
            found = sorted(set(pattern.findall((row.get("description") or "").lower())))
            out.append(RawRecord(example_id=row.get("") or str(i), categories=normalize_all(found, normalizer),
                                 label=float(row["points"])))
    return out


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _group_key(item, index):
    group = getattr(item, "group_id", None)
    if group is not None:
        return group
    ex_id = getattr(item, "example_id", None)
    return ex_id if ex_id is not None else index


def split(items, fractions: Sequence[float] = (0.7, 0.1, 0.2), seed: int = 0):
    """Seeded shuffle of source groups, then contiguous train/validation/test assignment.

    Items sharing a ``group_id`` always land in the same split. Accepts a
    :class:`Dataset` (returns three datasets) or any sequence.
    """
    fr = np.asarray(fractions, dtype=float)
    if fr.size != 3 or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ConfigError("fractions must be three positive numbers summing to 1")
    dataset = items if isinstance(items, Dataset) else None
    seq = list(dataset.examples) if dataset is not None else list(items)
    groups: Dict[object, List[int]] = {}
    for i, item in enumerate(seq):
        groups.setdefault(_group_key(item, i), []).append(i)
    keys = list(groups)
    perm = np.random.default_rng(seed).permutation(len(keys))
    bounds = np.rint(np.cumsum(fr) * len(keys)).astype(int)
    bounds[-1] = len(keys)
    parts = np.split(perm, bounds[:-1])
    out = []
    for tag, part in zip(("train", "validation", "test"), parts):
        idx = sorted(i for g in part for i in groups[keys[g]])
        chosen = [seq[i] for i in idx]
        if dataset is not None:
            chosen = Dataset(examples=chosen, feature_names=list(dataset.feature_names),
                             label_kind=dataset.label_kind, split_tag=tag)
        out.append(chosen)
    return tuple(out)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

_PREC = re.compile(r"^precision@(\d+)$")
METRICS = ("mae", "mse", "accuracy", "precision@1", "precision@3")


def precision_at_k(scores, labels, groups, k: int) -> float:
    """Fraction of groups whose positive row ranks within the top ``k``.

    Rows keep their order within a group; ties rank the earlier row higher.
    Groups without a positive row are ignored.
    """
    by_group: Dict[object, List[int]] = {}
    for i, g in enumerate(groups):
        by_group.setdefault(g, []).append(i)
    hits = total = 0
    for rows in by_group.values():
        pos = [r for r in rows if labels[r] > 0]
        if not pos:
            continue
        p = pos[0]
        rank = sum(1 for r in rows if scores[r] > scores[p] or (scores[r] == scores[p] and r < p))
        total += 1
        hits += rank < k
    return hits / total if total else float("nan")


def compute_metrics(preds, labels, metrics: Sequence[str], groups: Optional[Sequence] = None) -> Dict[str, float]:
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=float)
    report = {}
    for name in metrics:
        if name == "mae":
            report[name] = float(np.mean(np.abs(preds - labels)))
        elif name == "mse":
            report[name] = float(np.mean((preds - labels) ** 2))
        elif name == "accuracy":
            if not np.all(np.isin(labels, (-1.0, 1.0))):
                raise ConfigError("accuracy needs -1/+1 labels")
            decided = np.where(preds >= 0, 1.0, -1.0)
            report[name] = float(np.mean(decided == labels))
        elif (m := _PREC.match(name)):
            if groups is None or any(g is None for g in groups):
                raise ConfigError(f"{name} needs a group id on every example")
            report[name] = precision_at_k(preds, labels, groups, int(m.group(1)))
        else:
            raise ConfigError(f"unknown metric {name!r}")
    return report


def evaluate_predictions(model: AggModel, examples: Sequence[ExampleSet], metrics: Sequence[str]) -> Dict[str, float]:
    preds = forward_batch(model, examples)
    labels = [ex.label for ex in examples]
    groups = [ex.group_id for ex in examples] if any(_PREC.match(m) for m in metrics) else None
    return compute_metrics(preds, labels, metrics, groups)


def evaluate(model: AggModel, dataset, metrics: Sequence[str]) -> Dict[str, float]:
    examples = dataset.examples if isinstance(dataset, Dataset) else list(dataset)
    if isinstance(dataset, Dataset) and dataset.D != model.D:
        raise SchemaError(f"dataset has {dataset.D} features, model expects {model.D}")
    return evaluate_predictions(model, examples, metrics)
