"""Ranking datasets: query groups, relevance conversion, I/O and synthetic data."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

DEFAULT_EPSILON = 0.1
DEFAULT_MAX_LEN = 50


class DatasetError(ValueError):
    """Raised for malformed datasets, files or generator configs."""


@dataclass(frozen=True)
class SlotSpec:
    """One feature slot: categorical with ``size`` codes, or real-valued."""

    kind: str
    size: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("categorical", "real"):
            raise DatasetError(f"unknown slot kind {self.kind!r}")
        if self.kind == "categorical" and self.size < 1:
            raise DatasetError(f"categorical slot {self.name!r} needs size >= 1")

    @property
    def is_categorical(self) -> bool:
        return self.kind == "categorical"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size, "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "SlotSpec":
        return cls(kind=d["kind"], size=int(d.get("size", 0)), name=d.get("name", ""))


Schema = tuple  # tuple[SlotSpec, ...]


def schema_to_list(schema: Sequence[SlotSpec]) -> list:
    return [s.to_dict() for s in schema]


def schema_from_list(items: Iterable[dict]) -> tuple:
    return tuple(SlotSpec.from_dict(d) for d in items)


def check_codes(values: np.ndarray, schema: Sequence[SlotSpec], what: str = "features"):
    """Validate a (n, len(schema)) array against a slot schema."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[1] != len(schema):
        raise DatasetError(f"{what}: expected {len(schema)} slots, got {values.shape[1]}")
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"{what}: non-finite feature value")
    for k, slot in enumerate(schema):
        if slot.is_categorical:
            col = values[:, k]
            if np.any(col != np.round(col)) or np.any(col < 0) or np.any(col >= slot.size):
                raise DatasetError(
                    f"{what}: slot {k} ({slot.name or 'categorical'}) has a code outside [0, {slot.size})"
                )


@dataclass(frozen=True)
class Document:
    doc_id: int
    features: np.ndarray
    graded_relevance: int

    def __eq__(self, other):
        if not isinstance(other, Document):
            return NotImplemented
        return (
            self.doc_id == other.doc_id
            and self.graded_relevance == other.graded_relevance
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


@dataclass(frozen=True)
class QueryGroup:
    query_id: int
    user_features: np.ndarray
    documents: tuple

    def __len__(self):
        return len(self.documents)

    @property
    def labels(self) -> np.ndarray:
        return np.array([d.graded_relevance for d in self.documents], dtype=np.int64)

    @property
    def doc_ids(self) -> np.ndarray:
        return np.array([d.doc_id for d in self.documents], dtype=np.int64)

    def item_matrix(self) -> np.ndarray:
        return np.array([d.features for d in self.documents], dtype=np.float64).reshape(len(self), -1)

    def __eq__(self, other):
        if not isinstance(other, QueryGroup):
            return NotImplemented
        return (
            self.query_id == other.query_id
            and np.array_equal(self.user_features, other.user_features)
            and self.documents == other.documents
        )

    __hash__ = None


@dataclass(frozen=True)
class Dataset:
    groups: tuple
    y_max: int
    user_schema: tuple = ()
    item_schema: tuple = ()

    def __post_init__(self):
        for g in self.groups:
            if len(g.user_features) != len(self.user_schema):
                raise DatasetError(f"query {g.query_id}: user feature count differs from schema")
            for d in g.documents:
                if len(d.features) != len(self.item_schema):
                    raise DatasetError(f"query {g.query_id}: item feature count differs from schema")
                if not 0 <= d.graded_relevance <= self.y_max:
                    raise DatasetError(f"query {g.query_id}: label {d.graded_relevance} outside [0, {self.y_max}]")

    def __len__(self):
        return len(self.groups)

    @property
    def feature_schema(self) -> tuple:
        return tuple(self.user_schema) + tuple(self.item_schema)

    @property
    def n_documents(self) -> int:
        return sum(len(g) for g in self.groups)

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.groups[i] for i in indices), self.y_max, self.user_schema, self.item_schema)

    def validate(self):
        for g in self.groups:
            check_codes(g.user_features, self.user_schema, f"query {g.query_id} user")
            if len(g):
                check_codes(g.item_matrix(), self.item_schema, f"query {g.query_id} items")
        return self


def binarize_relevance(y, y_max: int, epsilon: float = DEFAULT_EPSILON):
    """Probability that a document with grade ``y`` is relevant.

    ``eps + (1 - eps) * (2**y - 1) / (2**y_max - 1)``; works on scalars and arrays.
    """
    if y_max < 1:
        raise DatasetError("y_max must be >= 1")
    if not 0 <= epsilon < 1:
        raise DatasetError("epsilon must lie in [0, 1)")
    y_arr = np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr > y_max) or np.any(y_arr != np.round(y_arr)):
        raise DatasetError(f"relevance grade outside [0, {y_max}]")
    p = epsilon + (1.0 - epsilon) * (np.exp2(y_arr.astype(np.float64)) - 1.0) / (2.0**y_max - 1.0)
    return float(p) if np.ndim(p) == 0 else p


def hard_relevance(p, threshold: float = 0.5):
    """Threshold relevance probabilities; only the frequency analysis uses this."""
    return (np.asarray(p) > threshold).astype(np.int64)


def filter_dataset(dataset: Dataset, max_len: int = DEFAULT_MAX_LEN) -> Dataset:
    """Drop groups with no positive label or more than ``max_len`` documents."""
    if max_len < 1:
        raise DatasetError("max_len must be >= 1")
    kept = tuple(
        g for g in dataset.groups if len(g) <= max_len and any(d.graded_relevance > 0 for d in g.documents)
    )
    return Dataset(kept, dataset.y_max, dataset.user_schema, dataset.item_schema)


def split_dataset(dataset: Dataset, seed: int, fractions=(0.7, 0.15, 0.15)):
    """Split by query into train/validation/test; order within each part is preserved."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError("fractions must be three non-negative numbers summing to 1")
    n = len(dataset)
    perm = np.random.default_rng([seed, 0x5A1]).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple(dataset.subset(sorted(p.tolist())) for p in parts)


# ---------------------------------------------------------------------------
# sparse text format

_LINE = re.compile(r"^\s*(\S+)\s+qid:(\S+)((?:\s+\S+:\S+)*)\s*$")
_DOC_ID = re.compile(r"doc_id=(-?\d+)")


def _parse_error(path, lineno, msg):
    return DatasetError(f"{path}:{lineno}: {msg}")


def load_sparse_text(path, schema: Sequence[SlotSpec], y_max: int | None = None) -> Dataset:
    """Read ``<label> qid:<q> <idx>:<val> ... [# doc_id=<k>]`` lines into a Dataset.

    Indices are 1-based into ``schema`` (item features); missing indices are 0.
    Groups are keyed by qid and ordered by first appearance. Without a
    ``doc_id=`` comment, documents are numbered in file order.
    """
    schema = tuple(schema)
    groups: dict[int, list] = {}
    max_label = 0
    next_doc = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            body, _, comment = raw.partition("#")
            if not body.strip():
                continue
            m = _LINE.match(body)
            if m is None:
                raise _parse_error(path, lineno, "expected '<label> qid:<int> <idx>:<val> ...'")
            label_s, qid_s, feats_s = m.groups()
            try:
                label = int(label_s)
                qid = int(qid_s)
            except ValueError:
                raise _parse_error(path, lineno, f"non-integer label or qid: {label_s!r} {qid_s!r}") from None
            if label < 0:
                raise _parse_error(path, lineno, "negative label")
            features = np.zeros(len(schema), dtype=np.float64)
            last = 0
            for tok in feats_s.split():
                idx_s, _, val_s = tok.partition(":")
                try:
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise _parse_error(path, lineno, f"bad feature token {tok!r}") from None
                if idx <= last:
                    raise _parse_error(path, lineno, "feature indices must be strictly increasing")
                if idx > len(schema):
                    raise _parse_error(path, lineno, f"unknown feature index {idx} (schema has {len(schema)})")
                features[idx - 1] = val
                last = idx
            dm = _DOC_ID.search(comment)
            if dm:
                doc_id = int(dm.group(1))
            else:
                doc_id = next_doc
            next_doc += 1
            max_label = max(max_label, label)
            groups.setdefault(qid, []).append(Document(doc_id, features, label))
    if y_max is None:
        y_max = max(max_label, 1)
    elif max_label > y_max:
        raise DatasetError(f"{path}: label {max_label} exceeds y_max={y_max}")
    out = tuple(QueryGroup(q, np.zeros(0), tuple(docs)) for q, docs in groups.items())
    ds = Dataset(out, y_max, (), schema)
    try:
        ds.validate()
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    return ds


def dump_sparse_text(dataset: Dataset, path) -> None:
    """Write item features in the sparse text format (user features are not representable)."""
    if dataset.user_schema:
        raise DatasetError("sparse text format cannot carry user features")
    with open(path, "w", encoding="utf-8") as fh:
        for g in dataset.groups:
            for d in g.documents:
                toks = [str(d.graded_relevance), f"qid:{g.query_id}"]
                toks += [f"{i + 1}:{v!r}" for i, v in enumerate(d.features.tolist()) if v != 0.0]
                fh.write(" ".join(toks) + f" # doc_id={d.doc_id}\n")


# ---------------------------------------------------------------------------
# binary cache

CACHE_VERSION = 1


def save_dataset(dataset: Dataset, path) -> None:
    """Exact round-trip cache as a single ``.npz`` archive."""
    sizes = np.array([len(g) for g in dataset.groups], dtype=np.int64)
    n_user = len(dataset.user_schema)
    n_item = len(dataset.item_schema)
    docs = [d for g in dataset.groups for d in g.documents]
    meta = {
        "version": CACHE_VERSION,
        "y_max": dataset.y_max,
        "user_schema": schema_to_list(dataset.user_schema),
        "item_schema": schema_to_list(dataset.item_schema),
    }
    np.savez(
        path,
        meta=np.array(json.dumps(meta)),
        sizes=sizes,
        query_ids=np.array([g.query_id for g in dataset.groups], dtype=np.int64),
        user=np.array([g.user_features for g in dataset.groups], dtype=np.float64).reshape(len(dataset), n_user),
        doc_ids=np.array([d.doc_id for d in docs], dtype=np.int64),
        labels=np.array([d.graded_relevance for d in docs], dtype=np.int64),
        items=np.array([d.features for d in docs], dtype=np.float64).reshape(len(docs), n_item),
    )


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CACHE_VERSION:
            raise DatasetError(f"{path}: unsupported cache version {meta.get('version')}")
        sizes = z["sizes"]
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        groups = []
        for k, qid in enumerate(z["query_ids"].tolist()):
            lo, hi = offsets[k], offsets[k + 1]
            docs = tuple(
                Document(int(z["doc_ids"][i]), z["items"][i].copy(), int(z["labels"][i])) for i in range(lo, hi)
            )
            groups.append(QueryGroup(int(qid), z["user"][k].copy(), docs))
    return Dataset(
        tuple(groups), int(meta["y_max"]), schema_from_list(meta["user_schema"]), schema_from_list(meta["item_schema"])
    )


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic ranking world.

    Relevance comes from a hidden bilinear user-item utility plus an item
    quality term and Gaussian noise, quantized into ``y_max + 1`` equally
    populated grades. Items live in a shared pool so the same ``doc_id``
    recurs across queries; ``popularity_skew`` is the Zipf exponent of how
    often each item is retrieved.
    """

    n_queries: int = 200
    docs_per_query: int = 20
    n_items: int = 400
    n_user_categorical: int = 2
    n_item_categorical: int = 2
    vocab_size: int = 6
    n_user_real: int = 1
    n_item_real: int = 2
    y_max: int = 4
    latent_dim: int = 4
    interaction_weight: float = 1.0
    quality_weight: float = 1.0
    noise: float = 0.3
    popularity_skew: float = 1.0

    def validate(self):
        if self.n_queries < 1:
            raise DatasetError("n_queries must be >= 1")
        if self.docs_per_query < 1:
            raise DatasetError("docs_per_query must be >= 1")
        if self.docs_per_query > self.n_items:
            raise DatasetError("docs_per_query cannot exceed n_items")
        if self.y_max < 1:
            raise DatasetError("y_max must be >= 1")
        if self.vocab_size < 1 or self.latent_dim < 1:
            raise DatasetError("vocab_size and latent_dim must be >= 1")
        if min(self.n_user_categorical, self.n_item_categorical, self.n_user_real, self.n_item_real) < 0:
            raise DatasetError("feature counts must be >= 0")
        if self.n_item_categorical + self.n_item_real == 0:
            raise DatasetError("items need at least one feature")
        if self.noise < 0 or self.popularity_skew < 0:
            raise DatasetError("noise and popularity_skew must be >= 0")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _side_schema(prefix, n_cat, n_real, vocab):
    cat = tuple(SlotSpec("categorical", vocab, f"{prefix}_cat{k}") for k in range(n_cat))
    real = tuple(SlotSpec("real", 0, f"{prefix}_real{k}") for k in range(n_real))
    return cat + real


def _latent(rng, n_rows, n_cat, n_real, vocab, k):
    codes = rng.integers(0, vocab, size=(n_rows, n_cat))
    reals = rng.normal(size=(n_rows, n_real))
    cat_vecs = rng.normal(size=(n_cat, vocab, k))
    real_vecs = rng.normal(size=(n_real, k))
    z = np.zeros((n_rows, k))
    for s in range(n_cat):
        z += cat_vecs[s][codes[:, s]]
    z += reals @ real_vecs
    z /= math.sqrt(max(n_cat + n_real, 1))
    return np.concatenate([codes.astype(np.float64), reals], axis=1), z


def generate_synthetic(config: SynthConfig, seed: int) -> Dataset:
    """Draw a synthetic dataset; a pure function of ``(config, seed)``."""
    config.validate()
    rng = np.random.default_rng([seed, 0x51A7])
    c = config
    item_x, item_z = _latent(rng, c.n_items, c.n_item_categorical, c.n_item_real, c.vocab_size, c.latent_dim)
    user_x, user_z = _latent(rng, c.n_queries, c.n_user_categorical, c.n_user_real, c.vocab_size, c.latent_dim)
    quality_dir = rng.normal(size=c.latent_dim) / math.sqrt(c.latent_dim)
    quality = item_z @ quality_dir

    ranks = rng.permutation(c.n_items) + 1
    pop = ranks.astype(np.float64) ** (-c.popularity_skew)
    pop /= pop.sum()

    chosen = np.empty((c.n_queries, c.docs_per_query), dtype=np.int64)
    for q in range(c.n_queries):
        chosen[q] = rng.choice(c.n_items, size=c.docs_per_query, replace=False, p=pop)
    utility = (
        c.interaction_weight * np.einsum("qk,qdk->qd", user_z, item_z[chosen]) / math.sqrt(c.latent_dim)
        + c.quality_weight * quality[chosen]
        + c.noise * rng.normal(size=chosen.shape)
    )
    # equal-mass grades from global utility quantiles
    order = np.argsort(utility, axis=None, kind="stable")
    grades = np.empty(utility.size, dtype=np.int64)
    grades[order] = (np.arange(utility.size) * (c.y_max + 1)) // utility.size
    grades = grades.reshape(utility.shape)

    groups = []
    for q in range(c.n_queries):
        docs = tuple(
            Document(int(i), item_x[i].copy(), int(grades[q, j])) for j, i in enumerate(chosen[q].tolist())
        )
        groups.append(QueryGroup(q, user_x[q].copy(), docs))
    return Dataset(
        tuple(groups),
        c.y_max,
        _side_schema("user", c.n_user_categorical, c.n_user_real, c.vocab_size),
        _side_schema("item", c.n_item_categorical, c.n_item_real, c.vocab_size),
    )
