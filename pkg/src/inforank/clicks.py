"""Biased click simulation: warm-start ranker plus PBM / UBM / CCM browsing models."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .data import Dataset, DatasetError, Document, QueryGroup, SlotSpec, binarize_relevance, check_codes
from .data import schema_from_list, schema_to_list

DEFAULT_MAX_RANK = 50
CLICKLOG_SCHEMA = "inforank.clicklog"
CLICKLOG_VERSION = 1


class SimulationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# feature layout


def combined_schema(dataset_or_schema, max_rank: int = DEFAULT_MAX_RANK) -> tuple:
    """Layout of the combined vector x: user slots, item slots, then the position code."""
    base = dataset_or_schema.feature_schema if isinstance(dataset_or_schema, Dataset) else tuple(dataset_or_schema)
    return base + (SlotSpec("categorical", max_rank + 1, "position"),)


def build_feature_vector(user_features, doc: Document, position: int, max_rank: int = DEFAULT_MAX_RANK) -> np.ndarray:
    if position < 1:
        raise SimulationError(f"position must be >= 1, got {position}")
    if position > max_rank:
        raise SimulationError(f"position {position} exceeds the max-rank vocabulary ({max_rank})")
    return np.concatenate(
        [np.asarray(user_features, dtype=np.float64), np.asarray(doc.features, dtype=np.float64), [float(position)]]
    )


def group_features(group: QueryGroup, positions, max_rank: int = DEFAULT_MAX_RANK) -> np.ndarray:
    """Stack combined vectors for every document of ``group`` at the given positions."""
    positions = np.broadcast_to(np.asarray(positions), (len(group),))
    if len(group) == 0:
        return np.zeros((0, len(group.user_features) + 1))
    if positions.min() < 1 or positions.max() > max_rank:
        raise SimulationError(f"positions must lie in [1, {max_rank}]")
    items = group.item_matrix()
    user = np.broadcast_to(np.asarray(group.user_features, dtype=np.float64), (len(group), len(group.user_features)))
    return np.concatenate([user, items, positions.astype(np.float64)[:, None]], axis=1)


# ---------------------------------------------------------------------------
# initial ranker


def one_hot_expand(X: np.ndarray, schema: Sequence[SlotSpec]) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    cols = []
    for k, slot in enumerate(schema):
        if slot.is_categorical:
            oh = np.zeros((X.shape[0], slot.size))
            oh[np.arange(X.shape[0]), X[:, k].astype(np.int64)] = 1.0
            cols.append(oh)
        else:
            cols.append(X[:, k:k + 1])
    return np.concatenate(cols, axis=1) if cols else np.zeros((X.shape[0], 0))


@dataclass(frozen=True)
class InitialRanker:
    """Linear scorer over one-hot-expanded [user || item] features."""

    weights: np.ndarray
    bias: float
    schema: tuple
    n_groups_used: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.weights)):
            raise SimulationError("initial ranker weights must be finite")

    def score(self, group: QueryGroup) -> np.ndarray:
        if len(group) == 0:
            return np.zeros(0)
        user = np.broadcast_to(group.user_features, (len(group), len(group.user_features)))
        X = np.concatenate([user, group.item_matrix()], axis=1)
        return one_hot_expand(X, self.schema) @ self.weights + self.bias


def _pairs(dataset: Dataset, groups, schema):
    diffs = []
    for g in groups:
        if len(g) < 2:
            continue
        user = np.broadcast_to(g.user_features, (len(g), len(g.user_features)))
        phi = one_hot_expand(np.concatenate([user, g.item_matrix()], axis=1), schema)
        y = g.labels
        hi, lo = np.nonzero(y[:, None] > y[None, :])
        if len(hi):
            diffs.append(phi[hi] - phi[lo])
    return np.concatenate(diffs) if diffs else np.zeros((0, 0))


def train_initial_ranker(dataset: Dataset, label_fraction: float = 0.01, seed: int = 0, l2: float = 1e-3) -> InitialRanker:
    """Fit a pairwise-logistic linear ranker on ``ceil(label_fraction * |D|)`` random groups."""
    if not 0 < label_fraction <= 1:
        raise SimulationError("label_fraction must lie in (0, 1]")
    if len(dataset) == 0:
        raise SimulationError("cannot train an initial ranker on an empty dataset")
    n_use = math.ceil(label_fraction * len(dataset))
    rng = np.random.default_rng([seed, 0x1417])
    idx = np.sort(rng.choice(len(dataset), size=n_use, replace=False))
    schema = dataset.feature_schema
    D = _pairs(dataset, [dataset.groups[i] for i in idx], schema)
    if D.shape[0] == 0:
        raise SimulationError(
            f"the {n_use} sampled group(s) contain no pair with different labels; use a larger label_fraction"
        )

    def objective(w):
        m = D @ w
        loss = np.logaddexp(0.0, -m).mean() + l2 * w @ w
        g = -(D.T @ (0.5 * (1.0 - np.tanh(0.5 * m)))) / len(m) + 2 * l2 * w
        return loss, g

    res = minimize(objective, np.zeros(D.shape[1]), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    return InitialRanker(res.x, 0.0, schema, n_use)


def rank_by_scores(group: QueryGroup, scores) -> list:
    """Sort documents by descending score; ties by ascending doc_id."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((group.doc_ids, -scores))
    return [group.documents[i] for i in order]


def rank_initial(ranker: InitialRanker, group: QueryGroup) -> list:
    return rank_by_scores(group, ranker.score(group))


# ---------------------------------------------------------------------------
# browsing models


@dataclass(frozen=True)
class PBMParams:
    rho: np.ndarray = field(default_factory=lambda: 1.0 / np.arange(1, DEFAULT_MAX_RANK + 1))
    tau: float = 1.0

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=np.float64)
        if rho.ndim != 1 or len(rho) == 0 or np.any(rho <= 0) or np.any(rho > 1):
            raise SimulationError("rho entries must lie in (0, 1]")
        if np.any(np.diff(rho) > 0):
            raise SimulationError("rho must be non-increasing in rank")
        if self.tau < 0:
            raise SimulationError("tau must be >= 0")
        object.__setattr__(self, "rho", rho)

    def examination(self, n: int) -> np.ndarray:
        if n > len(self.rho):
            raise SimulationError(f"list of length {n} exceeds the rho table ({len(self.rho)})")
        return self.rho[:n] ** self.tau

    def sample(self, rel_probs, rng, n_sessions=None):
        rel = np.asarray(rel_probs, dtype=np.float64)
        prop = self.examination(len(rel))
        shape = (len(rel),) if n_sessions is None else (n_sessions, len(rel))
        o = rng.random(shape) < prop
        r = rng.random(shape) < rel
        prop = np.broadcast_to(prop, shape)
        return o.astype(np.int8), (o & r).astype(np.int8), prop.copy()

    def marginals(self, rel_probs):
        rel = np.asarray(rel_probs, dtype=np.float64)
        p_o = self.examination(len(rel))
        return p_o, p_o * rel


def default_ubm_gamma(max_rank: int = DEFAULT_MAX_RANK, decay: float = 0.7) -> np.ndarray:
    """gamma[i, j] for rank i (1-based) and last click j < i (0 = none yet); NaN elsewhere."""
    g = np.full((max_rank + 1, max_rank + 1), np.nan)
    for i in range(1, max_rank + 1):
        j = np.arange(i)
        g[i, :i] = np.minimum(1.0, 1.0 / (i - j) ** decay)
    return g


@dataclass(frozen=True)
class UBMParams:
    gamma: np.ndarray = field(default_factory=default_ubm_gamma)

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise SimulationError("gamma must be a square (max_rank + 1) table")
        lower = np.tril(np.ones_like(g, dtype=bool), k=-1)
        lower[0] = False
        vals = g[lower]
        # zero entries are allowed so a table can stop browsing outright
        if np.any(~np.isnan(vals) & ((vals < 0) | (vals > 1))):
            raise SimulationError("gamma entries must lie in [0, 1]")
        object.__setattr__(self, "gamma", g)

    def _table(self, n):
        if n > self.gamma.shape[0] - 1:
            raise SimulationError(f"list of length {n} exceeds the gamma table ({self.gamma.shape[0] - 1})")
        for i in range(1, n + 1):
            if np.any(np.isnan(self.gamma[i, :i])):
                raise SimulationError(f"gamma table is missing an entry for rank {i}")
        return self.gamma

    def sample(self, rel_probs, rng, n_sessions=None):
        rel = np.asarray(rel_probs, dtype=np.float64)
        n = len(rel)
        g = self._table(n)
        m = 1 if n_sessions is None else n_sessions
        o = np.zeros((m, n), dtype=np.int8)
        c = np.zeros((m, n), dtype=np.int8)
        prop = np.zeros((m, n))
        last = np.zeros(m, dtype=np.int64)
        for i in range(1, n + 1):
            p = g[i, last]
            oi = rng.random(m) < p
            ci = oi & (rng.random(m) < rel[i - 1])
            o[:, i - 1], c[:, i - 1], prop[:, i - 1] = oi, ci, p
            last = np.where(ci, i, last)
        if n_sessions is None:
            return o[0], c[0], prop[0]
        return o, c, prop

    def marginals(self, rel_probs):
        """Exact per-rank P(o_i = 1) and P(c_i = 1) by dynamic programming over the last click."""
        rel = np.asarray(rel_probs, dtype=np.float64)
        n = len(rel)
        g = self._table(n)
        state = np.zeros(n + 1)
        state[0] = 1.0  # P(last click = j) before visiting rank i
        p_o, p_c = np.zeros(n), np.zeros(n)
        for i in range(1, n + 1):
            obs = state[:i] * g[i, :i]
            p_o[i - 1] = obs.sum()
            p_c[i - 1] = p_o[i - 1] * rel[i - 1]
            state[:i] -= obs * rel[i - 1]
            state[i] = p_c[i - 1]
        return p_o, p_c


@dataclass(frozen=True)
class CCMParams:
    gamma1: float = 0.5
    gamma2: float = 0.10
    gamma3: float = 0.04

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "gamma3"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimulationError(f"{name} must lie in [0, 1]")

    @classmethod
    def navigational(cls, gamma1: float = 0.5) -> "CCMParams":
        return cls(gamma1, 0.10, 0.04)

    @classmethod
    def informational(cls, gamma1: float = 0.5) -> "CCMParams":
        return cls(gamma1, 0.40, 0.27)

    def sample(self, rel_probs, rng, n_sessions=None):
        rel = np.asarray(rel_probs, dtype=np.float64)
        n = len(rel)
        m = 1 if n_sessions is None else n_sessions
        o = np.zeros((m, n), dtype=np.int8)
        c = np.zeros((m, n), dtype=np.int8)
        prop = np.zeros((m, n))
        p_next = np.ones(m)
        for i in range(n):
            oi = rng.random(m) < p_next
            ci = oi & (rng.random(m) < rel[i])
            o[:, i], c[:, i], prop[:, i] = oi, ci, p_next
            cont = np.where(ci, self.gamma2 * (1 - rel[i]) + self.gamma3 * rel[i], self.gamma1)
            p_next = np.where(oi, cont, 0.0)
        if n_sessions is None:
            return o[0], c[0], prop[0]
        return o, c, prop

    def marginals(self, rel_probs):
        rel = np.asarray(rel_probs, dtype=np.float64)
        p_o, p_c = np.zeros(len(rel)), np.zeros(len(rel))
        reach = 1.0
        for i, p in enumerate(rel):
            p_o[i] = reach
            p_c[i] = reach * p
            reach *= (1 - p) * self.gamma1 + p * (self.gamma2 * (1 - p) + self.gamma3 * p)
        return p_o, p_c


# ---------------------------------------------------------------------------
# impression records


@dataclass(frozen=True)
class ImpressionRecord:
    query_id: int
    doc_id: int
    position: int
    observed: int
    clicked: int
    features: np.ndarray
    propensity: float = float("nan")

    def __post_init__(self):
        if self.clicked and not self.observed:
            raise SimulationError("a clicked impression must be observed")


def _records(ranked, o, c, prop, query_id, user_features, max_rank):
    return [
        ImpressionRecord(
            query_id, doc.doc_id, i + 1, int(o[i]), int(c[i]),
            build_feature_vector(user_features, doc, i + 1, max_rank), float(prop[i]),
        )
        for i, doc in enumerate(ranked)
    ]


def _simulate(model, ranked, rel_probs, rng, query_id, user_features, max_rank):
    if len(ranked) != len(rel_probs):
        raise SimulationError("ranked list and relevance probabilities differ in length")
    o, c, prop = model.sample(rel_probs, rng)
    return _records(ranked, o, c, prop, query_id, () if user_features is None else user_features, max_rank)


def simulate_pbm(ranked, rel_probs, params: PBMParams, rng, query_id=0, user_features=None, max_rank=DEFAULT_MAX_RANK):
    return _simulate(params, ranked, rel_probs, rng, query_id, user_features, max_rank)


def simulate_ubm(ranked, rel_probs, params: UBMParams, rng, query_id=0, user_features=None, max_rank=DEFAULT_MAX_RANK):
    return _simulate(params, ranked, rel_probs, rng, query_id, user_features, max_rank)


def simulate_ccm(ranked, rel_probs, params: CCMParams, rng, query_id=0, user_features=None, max_rank=DEFAULT_MAX_RANK):
    return _simulate(params, ranked, rel_probs, rng, query_id, user_features, max_rank)


def make_click_model(family: str, **kwargs):
    """Build PBM/UBM/CCM parameters from a family name and overrides."""
    family = family.lower()
    if family == "pbm":
        return PBMParams(**kwargs)
    if family == "ubm":
        return UBMParams(**kwargs)
    if family == "ccm":
        return CCMParams(**kwargs)
    raise SimulationError(f"unknown click model {family!r} (expected pbm, ubm or ccm)")


# ---------------------------------------------------------------------------
# click logs


@dataclass
class ClickLog:
    """Column-oriented impression log; rows are (query, session, rank)."""

    query_id: np.ndarray
    doc_id: np.ndarray
    position: np.ndarray
    observed: np.ndarray
    clicked: np.ndarray
    propensity: np.ndarray
    features: np.ndarray
    schema: tuple

    def __post_init__(self):
        n = len(self.query_id)
        for name in ("doc_id", "position", "observed", "clicked", "propensity"):
            if len(getattr(self, name)) != n:
                raise SimulationError(f"click log column {name!r} has the wrong length")
        if self.features.shape != (n, len(self.schema)):
            raise SimulationError("click log features do not match the schema")
        if np.any(self.clicked.astype(bool) & ~self.observed.astype(bool)):
            raise SimulationError("click log contains a click on an unobserved impression")

    def __len__(self):
        return len(self.query_id)

    def subset(self, idx) -> "ClickLog":
        idx = np.asarray(idx)
        return ClickLog(
            self.query_id[idx], self.doc_id[idx], self.position[idx], self.observed[idx],
            self.clicked[idx], self.propensity[idx], self.features[idx], self.schema,
        )

    def records(self):
        for k in range(len(self)):
            yield ImpressionRecord(
                int(self.query_id[k]), int(self.doc_id[k]), int(self.position[k]), int(self.observed[k]),
                int(self.clicked[k]), self.features[k], float(self.propensity[k]),
            )

    @classmethod
    def from_records(cls, records, schema) -> "ClickLog":
        records = list(records)
        n = len(records)
        return cls(
            np.array([r.query_id for r in records], dtype=np.int64),
            np.array([r.doc_id for r in records], dtype=np.int64),
            np.array([r.position for r in records], dtype=np.int64),
            np.array([r.observed for r in records], dtype=np.int8),
            np.array([r.clicked for r in records], dtype=np.int8),
            np.array([r.propensity for r in records], dtype=np.float64),
            np.array([r.features for r in records], dtype=np.float64).reshape(n, len(schema)),
            tuple(schema),
        )

    @classmethod
    def concatenate(cls, logs) -> "ClickLog":
        logs = list(logs)
        if not logs:
            raise SimulationError("nothing to concatenate")
        return cls(*(np.concatenate([getattr(l, f) for l in logs]) for f in
                     ("query_id", "doc_id", "position", "observed", "clicked", "propensity", "features")),
                   logs[0].schema)


def simulate_log(
    dataset: Dataset,
    ranker: InitialRanker,
    click_model,
    seed: int,
    sessions: int = 1,
    epsilon: float = 0.1,
    max_rank: int = DEFAULT_MAX_RANK,
) -> ClickLog:
    """Rank every group with the warm-start ranker and draw ``sessions`` click sessions per query.

    Each query uses its own generator seeded from ``(seed, query_id)``, so the
    output does not depend on group order or scheduling.
    """
    if sessions < 1:
        raise SimulationError("sessions must be >= 1")
    schema = combined_schema(dataset, max_rank)
    parts = []
    for g in dataset.groups:
        if len(g) == 0:
            continue
        if len(g) > max_rank:
            raise SimulationError(f"query {g.query_id} has {len(g)} documents, more than max_rank={max_rank}")
        ranked = rank_initial(ranker, g)
        rel = binarize_relevance(np.array([d.graded_relevance for d in ranked]), dataset.y_max, epsilon)
        rng = np.random.default_rng([seed, g.query_id])
        o, c, prop = click_model.sample(rel, rng, n_sessions=sessions)
        reordered = QueryGroup(g.query_id, g.user_features, tuple(ranked))
        X = group_features(reordered, np.arange(1, len(g) + 1), max_rank)
        n = len(g)
        parts.append(ClickLog(
            np.full(n * sessions, g.query_id, dtype=np.int64),
            np.tile(reordered.doc_ids, sessions),
            np.tile(np.arange(1, n + 1), sessions),
            o.reshape(-1).astype(np.int8),
            c.reshape(-1).astype(np.int8),
            prop.reshape(-1),
            np.tile(X, (sessions, 1)),
            schema,
        ))
    if not parts:
        return empty_log(schema)
    return ClickLog.concatenate(parts)


def relevance_log(dataset: Dataset, seed: int, sessions: int = 1, epsilon: float = 0.1,
                  max_rank: int = DEFAULT_MAX_RANK, position: int = 1) -> ClickLog:
    """Fully observed log whose clicks are sampled binary relevance (supervision for the labeled baseline)."""
    schema = combined_schema(dataset, max_rank)
    parts = []
    for g in dataset.groups:
        if len(g) == 0:
            continue
        rel = binarize_relevance(g.labels, dataset.y_max, epsilon)
        rng = np.random.default_rng([seed, g.query_id, 0xBE1])
        r = (rng.random((sessions, len(g))) < rel).astype(np.int8).reshape(-1)
        n = len(g) * sessions
        parts.append(ClickLog(
            np.full(n, g.query_id, dtype=np.int64), np.tile(g.doc_ids, sessions),
            np.full(n, position, dtype=np.int64), np.ones(n, dtype=np.int8), r, np.ones(n),
            np.tile(group_features(g, position, max_rank), (sessions, 1)), schema,
        ))
    return ClickLog.concatenate(parts) if parts else empty_log(schema)


def empty_log(schema) -> ClickLog:
    z = np.zeros(0, dtype=np.int64)
    return ClickLog(z, z, z, z.astype(np.int8), z.astype(np.int8), np.zeros(0), np.zeros((0, len(schema))), tuple(schema))


def write_click_log(log: ClickLog, path) -> None:
    """JSON lines: a header line, then one impression per line."""
    header = {"schema": CLICKLOG_SCHEMA, "version": CLICKLOG_VERSION, "feature_schema": schema_to_list(log.schema)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for r in log.records():
            fh.write(json.dumps({
                "query_id": r.query_id, "doc_id": r.doc_id, "position": r.position,
                "observed": r.observed, "clicked": r.clicked,
                "propensity": r.propensity, "features": r.features.tolist(),
            }) + "\n")


def read_click_log(path) -> ClickLog:
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        try:
            header = json.loads(first)
        except json.JSONDecodeError:
            raise SimulationError(f"{path}: missing click-log header line") from None
        if header.get("schema") != CLICKLOG_SCHEMA or header.get("version") != CLICKLOG_VERSION:
            raise SimulationError(f"{path}: unsupported click-log header {header!r}")
        schema = schema_from_list(header["feature_schema"])
        records = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(ImpressionRecord(
                    int(d["query_id"]), int(d["doc_id"]), int(d["position"]), int(d["observed"]),
                    int(d["clicked"]), np.asarray(d["features"], dtype=np.float64), float(d["propensity"]),
                ))
            except (KeyError, TypeError, ValueError) as exc:
                raise SimulationError(f"{path}:{lineno}: bad impression record ({exc})") from None
    log = ClickLog.from_records(records, schema) if records else empty_log(schema)
    if len(log):
        try:
            check_codes(log.features, schema, "click log")
        except DatasetError as exc:
            raise SimulationError(f"{path}: {exc}") from None
    return log
