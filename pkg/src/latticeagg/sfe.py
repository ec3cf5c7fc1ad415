"""Semantic feature engine: sparse categoricals to dense per-token features.

Inputs (a set of categories, or a word sequence) are broken into tokens,
each token is looked up in a table of empirical label statistics, and every
emitted token becomes a D=6 feature vector for an aggregation model.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import re
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from latticeagg.errors import BudgetError, ConfigError, ParseError

DEFAULT_MAX_SUBSET_SIZE = 3
MAX_SUBSETS_PER_EXAMPLE = 100_000
CI_Z = 1.96

FEATURE_NAMES = ("label_mean", "count", "subset_size", "full_match", "num_categories", "num_tokens")


class TokenKey(NamedTuple):
    """Canonical token: sorted categories (or ordered ngram words) plus an optional context."""

    items: Tuple[str, ...]
    context: str = ""

    def label(self) -> str:
        body = "{" + ", ".join(self.items) + "}"
        return f"{body} x {self.context}" if self.context else body


def subset_key(categories: Iterable[str], context: str = "") -> TokenKey:
    return TokenKey(tuple(sorted(set(categories))), context)


@dataclasses.dataclass(frozen=True)
class TokenStats:
    label_mean: float
    count: int


@dataclasses.dataclass
class TokenTable:
    entries: Dict[TokenKey, TokenStats]
    build_meta: dict = dataclasses.field(default_factory=dict)

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def get(self, key) -> Optional[TokenStats]:
        return self.entries.get(key)

    def save(self, path) -> None:
        """Write the JSON header line, then one sorted record per entry."""
        lines = []
        for key, st in self.entries.items():
            enc = json.dumps([key.context, list(key.items)], ensure_ascii=False, separators=(",", ":"))
            lines.append(f"{enc}\t{st.label_mean:.17g}\t{st.count}")
        lines.sort()
        with open(path, "w", encoding="utf-8") as f:
            f.write(json.dumps(self.build_meta, sort_keys=True) + "\n")
            for line in lines:
                f.write(line + "\n")

    @classmethod
    def load(cls, path) -> "TokenTable":
        with open(path, encoding="utf-8") as f:
            header = f.readline()
            try:
                meta = json.loads(header) if header.strip() else {}
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad table header: {exc}", line=1) from None
            entries = {}
            for lineno, line in enumerate(f, start=2):
                line = line.rstrip("\n")
                if not line:
                    continue
                try:
                    enc, mean, count = line.split("\t")
                    context, items = json.loads(enc)
                    entries[TokenKey(tuple(items), context)] = TokenStats(float(mean), int(count))
                except (ValueError, TypeError) as exc:
                    raise ParseError(f"bad table record: {exc}", line=lineno) from None
        return cls(entries=entries, build_meta=meta)


# ---------------------------------------------------------------------------
# Tokenization
# ---------------------------------------------------------------------------


def tokenize_ngrams(words: Sequence[str], Q: int, context: str = "") -> List[TokenKey]:
    """All contiguous ngrams of order 1..Q, unigrams first, duplicates kept."""
    if Q < 1:
        raise ConfigError("Q must be at least 1")
    words = list(words)
    return [
        TokenKey(tuple(words[i:i + q]), context)
        for q in range(1, Q + 1)
        for i in range(len(words) - q + 1)
    ]


def _check_budget(n: int, max_size: int) -> None:
    total = sum(math.comb(n, k) for k in range(1, min(max_size, n) + 1))
    if total > MAX_SUBSETS_PER_EXAMPLE:
        raise BudgetError(f"{n} categories with max subset size {max_size} yield {total} subsets "
                          f"(limit {MAX_SUBSETS_PER_EXAMPLE})")


def enumerate_subsets(categories: Iterable[str], max_size: int, context: str = "") -> List[TokenKey]:
    """Every subset of size 1..max_size of the (deduplicated) categories."""
    if max_size < 1:
        raise ConfigError("max_size must be at least 1")
    cats = sorted(set(categories))
    _check_budget(len(cats), max_size)
    return [TokenKey(c, context) for k in range(1, min(max_size, len(cats)) + 1)
            for c in itertools.combinations(cats, k)]


class FallbackResult(NamedTuple):
    tokens: List[TokenKey]
    uncovered: List[str]


def tokenize_subsets_with_fallback(
    categories: Iterable[str], table: TokenTable, max_size: int, context: str = ""
) -> FallbackResult:
    """Cover the input set with the largest subsets found in ``table``.

    Sizes are visited from ``min(max_size, n)`` down to 1. Subsets contained
    in an already emitted token are skipped; those present in the table are
    emitted. Descent stops once every category is covered.
    """
    if max_size < 1:
        raise ConfigError("max_size must be at least 1")
    cats = sorted(set(categories))
    _check_budget(len(cats), max_size)
    emitted: List[TokenKey] = []
    emitted_sets: List[frozenset] = []
    covered = set()
    for k in range(min(max_size, len(cats)), 0, -1):
        found = []
        for combo in itertools.combinations(cats, k):
            cs = frozenset(combo)
            if any(cs <= e for e in emitted_sets):
                continue
            key = TokenKey(combo, context)
            if key in table:
                found.append((key, cs))
        for key, cs in found:
            emitted.append(key)
            emitted_sets.append(cs)
            covered |= cs
        if len(covered) == len(cats):
            break
    return FallbackResult(emitted, [c for c in cats if c not in covered])


# ---------------------------------------------------------------------------
# Table building and filtering
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class TokenRecord:
    """One token-training example: categories (or words), context and label."""

    categories: Sequence[str]
    label: float
    context: str = ""


def _tokens_for(record: TokenRecord, tokenizer: str, max_size: int) -> List[TokenKey]:
    if tokenizer == "subsets":
        return enumerate_subsets(record.categories, max_size, record.context)
    if tokenizer == "ngrams":
        return tokenize_ngrams(record.categories, max_size, record.context)
    raise ConfigError(f"unknown tokenizer {tokenizer!r}")


def build_token_table(
    records: Iterable[TokenRecord],
    max_size: int = DEFAULT_MAX_SUBSET_SIZE,
    tokenizer: str = "subsets",
    label_kind: str = "binary",
) -> TokenTable:
    """Count every token occurrence and average its labels.

    Enumeration is exhaustive up to ``max_size``; fallback only applies when
    reading from the table. For ``label_kind="binary"`` labels must be 0/1.
    """
    if label_kind not in ("binary", "real"):
        raise ConfigError("label_kind must be 'binary' or 'real'")
    sums: Dict[TokenKey, float] = {}
    counts: Dict[TokenKey, int] = {}
    for rec in records:
        y = float(rec.label)
        if label_kind == "binary" and y not in (0.0, 1.0):
            raise ConfigError(f"binary token tables need 0/1 labels, got {y}")
        for key in _tokens_for(rec, tokenizer, max_size):
            sums[key] = sums.get(key, 0.0) + y
            counts[key] = counts.get(key, 0) + 1
    entries = {key: TokenStats(sums[key] / n, n) for key, n in counts.items()}
    meta = {"tokenizer": tokenizer, "max_size": max_size, "label_kind": label_kind,
            "count_threshold": None, "ci_threshold": None, "ci_level": None}
    return TokenTable(entries=entries, build_meta=meta)


def build_crossed_token_table(
    records: Iterable[TokenRecord],
    contexts: Sequence[str],
    max_size: int = DEFAULT_MAX_SUBSET_SIZE,
    min_count: int = 0,
) -> TokenTable:
    """Table of subsets crossed with every candidate context.

    Equivalent to expanding each record into one row per context (label 1
    for the record's own context, 0 otherwise) and calling
    :func:`build_token_table`, then dropping entries with ``count <
    min_count``. Each subset is enumerated once per record instead of once
    per (record, context), and rare subsets are dropped before crossing.
    """
    totals: Dict[Tuple[str, ...], int] = {}
    positives: Dict[Tuple[Tuple[str, ...], str], int] = {}
    known = set(contexts)
    for rec in records:
        own = rec.context if rec.context in known else None
        for key in enumerate_subsets(rec.categories, max_size):
            totals[key.items] = totals.get(key.items, 0) + 1
            if own is not None:
                pk = (key.items, own)
                positives[pk] = positives.get(pk, 0) + 1
    entries = {}
    for items, n in totals.items():
        if n < min_count:
            continue
        for c in contexts:
            entries[TokenKey(items, c)] = TokenStats(positives.get((items, c), 0) / n, n)
    meta = {"tokenizer": "subsets", "max_size": max_size, "label_kind": "binary",
            "count_threshold": min_count or None, "ci_threshold": None, "ci_level": None,
            "contexts": list(contexts)}
    return TokenTable(entries=entries, build_meta=meta)


def ci_width(p: float, n: int) -> float:
    """Full width of the 95% normal-approximation interval of a Bernoulli mean."""
    return 2.0 * CI_Z * math.sqrt(p * (1.0 - p) / n)


def filter_table(table: TokenTable, count_threshold: int = 0, ci_threshold: Optional[float] = None) -> TokenTable:
    """Drop rare tokens and (binary tables only) tokens with wide intervals."""
    if count_threshold < 0 or (ci_threshold is not None and ci_threshold < 0):
        raise ConfigError("thresholds must be non-negative")
    if ci_threshold is not None and table.build_meta.get("label_kind") != "binary":
        raise ConfigError("confidence-interval filtering needs a binary-label table")
    kept = {}
    for key, st in table.entries.items():
        if st.count < count_threshold:
            continue
        if ci_threshold is not None and ci_width(st.label_mean, st.count) > ci_threshold:
            continue
        kept[key] = st
    meta = dict(table.build_meta)
    meta["count_threshold"] = count_threshold
    if ci_threshold is not None:
        meta["ci_threshold"] = ci_threshold
        meta["ci_level"] = 0.95
    return TokenTable(entries=kept, build_meta=meta)


# ---------------------------------------------------------------------------
# Feature assembly
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class AssembledTokens:
    features: np.ndarray  # (M, 6); a single all-NaN row if nothing matched
    keys: List[Optional[TokenKey]]
    uncovered: List[str]

    @property
    def names(self) -> List[str]:
        return [k.label() if k is not None else "(missing)" for k in self.keys]


def assemble_features(
    categories: Iterable[str], table: TokenTable, max_size: int = DEFAULT_MAX_SUBSET_SIZE, context: str = ""
) -> AssembledTokens:
    """The six per-token features for one input set.

    Columns: label mean, count, subset size, full-match flag, number of
    categories in the input, number of emitted tokens.
    """
    cats = sorted(set(categories))
    result = tokenize_subsets_with_fallback(cats, table, max_size, context)
    if not result.tokens:
        return AssembledTokens(np.full((1, len(FEATURE_NAMES)), np.nan), [None], result.uncovered)
    n_tok = len(result.tokens)
    rows = []
    for key in result.tokens:
        st = table.entries[key]
        k = len(key.items)
        rows.append([st.label_mean, st.count, k, 1.0 if k == len(cats) else 0.0, len(cats), n_tok])
    return AssembledTokens(np.array(rows, dtype=float), list(result.tokens), result.uncovered)


_WS = re.compile(r"\s+")


def basic_normalizer(category: str) -> str:
    """Lowercase and collapse whitespace."""
    return _WS.sub(" ", category.strip().lower())


def normalize_all(categories: Iterable[str], normalizer: Optional[Callable[[str], str]] = None) -> List[str]:
    norm = normalizer or basic_normalizer
    return [norm(c) for c in categories]
