"""Ranking metrics, metric reports and the bias-analysis curves."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .clicks import DEFAULT_MAX_RANK, group_features


class EvaluationError(ValueError):
    pass


def dcg_at_k(labels, k: int) -> float:
    labels = np.asarray(labels, dtype=np.float64)[:k]
    if labels.size == 0:
        return 0.0
    gains = np.exp2(labels) - 1.0
    discounts = np.log2(np.arange(2, labels.size + 2))
    return float(np.sum(gains / discounts))


def ndcg_query(ranked_labels, k: int):
    """NDCG@k of one ranked label list, or None when its ideal DCG is zero."""
    if k < 1:
        raise EvaluationError("k must be >= 1")
    ideal = dcg_at_k(np.sort(np.asarray(ranked_labels))[::-1], k)
    if ideal == 0.0:
        return None
    return dcg_at_k(ranked_labels, k) / ideal


def ndcg_at_k(ranked_labels, k: int) -> float:
    """Mean NDCG@k with gain 2^y - 1 and discount log2(i + 1).

    Accepts one ranked label list or a list of them. Queries whose ideal
    DCG is zero are left out of the mean; returns nan if none remain.
    """
    lists = _as_lists(ranked_labels)
    vals = [v for v in (ndcg_query(l, k) for l in lists) if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def average_precision_at_k(ranked_binary, k: int = 10):
    rel = (np.asarray(ranked_binary) > 0).astype(np.float64)
    n_rel = rel.sum()
    if n_rel == 0:
        return None
    top = rel[:k]
    hits = np.cumsum(top)
    precisions = hits / np.arange(1, top.size + 1)
    return float(np.sum(precisions * top) / min(n_rel, k))


def map_at_10(ranked_labels) -> float:
    """Mean average precision truncated at rank 10 (labels > 0 count as relevant).

    AP is normalized by min(#relevant, 10); queries without relevant documents are skipped.
    """
    vals = [v for v in (average_precision_at_k(l, 10) for l in _as_lists(ranked_labels)) if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def _as_lists(ranked_labels):
    if len(ranked_labels) == 0:
        return []
    first = ranked_labels[0]
    if np.ndim(first) == 0:
        return [np.asarray(ranked_labels)]
    return [np.asarray(l) for l in ranked_labels]


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    map_at_10: float
    ndcg: dict
    delta_ci: float = float("nan")
    per_query: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "map_at_10": self.map_at_10,
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "delta_ci": None if np.isnan(self.delta_ci) else self.delta_ci,
            "per_query": self.per_query,
            "metadata": self.metadata,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "MetricsReport":
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return cls(
            d["map_at_10"], {int(k): v for k, v in d["ndcg"].items()},
            float("nan") if d["delta_ci"] is None else d["delta_ci"], d["per_query"], d["metadata"],
        )


def ranked_labels(scores_by_group, dataset):
    """Graded labels of each group re-ordered by descending score (ties: ascending doc_id)."""
    out = []
    for g, s in zip(dataset.groups, scores_by_group):
        order = np.lexsort((g.doc_ids, -np.asarray(s, dtype=np.float64)))
        out.append(g.labels[order])
    return out


def score_groups(scorer, dataset, position: int = 1, max_rank: int = DEFAULT_MAX_RANK):
    """Scores for every group, with each document's position slot set to ``position``."""
    out = []
    for g in dataset.groups:
        if len(g) == 0:
            out.append(np.zeros(0))
            continue
        out.append(np.asarray(scorer(group_features(g, position, max_rank)), dtype=np.float64))
    return out


def evaluate_ranking(scores_by_group, dataset, cutoffs=(3, 5, 10), delta_ci: float = float("nan"),
                     metadata: dict | None = None) -> MetricsReport:
    lists = ranked_labels(scores_by_group, dataset)
    per_query = []
    for g, l in zip(dataset.groups, lists):
        row = {"query_id": g.query_id, "map_at_10": average_precision_at_k(l, 10)}
        for k in cutoffs:
            row[f"ndcg@{k}"] = ndcg_query(l, k)
        per_query.append(row)
    return MetricsReport(
        map_at_10(lists), {k: ndcg_at_k(lists, k) for k in cutoffs}, delta_ci, per_query, dict(metadata or {}),
    )


# ---------------------------------------------------------------------------
# analysis curves


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray
    stderr: np.ndarray
    name: str = ""

    def to_csv(self, path) -> None:
        write_curves(path, [self])


def write_curves(path, curves) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "x", "y", "stderr"])
        for c in curves:
            for x, y, s in zip(c.x, c.y, c.stderr):
                w.writerow([c.name, repr(float(x)), repr(float(y)), repr(float(s))])


def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def position_shift_curve(initial, reranked, reference=None):
    """Mean new position of the documents found at each original position.

    ``initial``, ``reranked`` and ``reference`` are lists (one per query) of
    doc-id sequences over identical document sets. Returns ``(curve,
    reference_curve)``; the reference curve is None when not supplied.
    """
    def shift(new_lists, name):
        by_pos: dict[int, list] = {}
        for init, new in zip(initial, new_lists):
            init, new = list(init), list(new)
            if sorted(init) != sorted(new) or len(set(init)) != len(init):
                raise EvaluationError("re-ranked list does not contain the same documents as the initial list")
            where = {d: i + 1 for i, d in enumerate(new)}
            for i, d in enumerate(init):
                by_pos.setdefault(i + 1, []).append(where[d])
        xs = np.array(sorted(by_pos), dtype=np.float64)
        stats = [_mean_se(by_pos[int(x)]) for x in xs]
        return Curve(xs, np.array([s[0] for s in stats]), np.array([s[1] for s in stats]), name)

    if len(initial) != len(reranked) or (reference is not None and len(reference) != len(initial)):
        raise EvaluationError("initial and re-ranked inputs cover different numbers of queries")
    return shift(reranked, "model"), (None if reference is None else shift(reference, "relevance"))


def frequency_curve(rankings, n_bins: int = 10, top_k: int = 10):
    """Item popularity vs placement.

    ``rankings`` is a list of doc-id sequences (persistent item ids). Items
    are bucketed by appearance count normalized by the maximum count; the
    first curve gives the mean rank assigned within each bucket, the second
    the fraction of appearances that land in the top ``top_k``.
    """
    counts: dict[int, int] = {}
    ranks: dict[int, list] = {}
    for lst in rankings:
        for i, d in enumerate(lst):
            counts[d] = counts.get(d, 0) + 1
            ranks.setdefault(d, []).append(i + 1)
    if not counts or max(counts.values()) < 2:
        raise EvaluationError(
            "no item appears more than once; generate data with a shared item pool (n_items < n_queries * docs)")
    max_c = max(counts.values())
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bucket_ranks = [[] for _ in range(n_bins)]
    bucket_top = [[] for _ in range(n_bins)]
    for d, c in counts.items():
        b = min(int(np.searchsorted(edges, c / max_c, side="left")) - 1, n_bins - 1)
        b = max(b, 0)
        bucket_ranks[b].extend(ranks[d])
        bucket_top[b].extend(float(r <= top_k) for r in ranks[d])
    centers = (edges[:-1] + edges[1:]) / 2
    keep = [k for k in range(n_bins) if bucket_ranks[k]]
    pos = [_mean_se(bucket_ranks[k]) for k in keep]
    top = [_mean_se(bucket_top[k]) for k in keep]
    xs = centers[keep]
    return (
        Curve(xs, np.array([p[0] for p in pos]), np.array([p[1] for p in pos]), "mean_position"),
        Curve(xs, np.array([t[0] for t in top]), np.array([t[1] for t in top]), f"top{top_k}_frequency"),
    )
