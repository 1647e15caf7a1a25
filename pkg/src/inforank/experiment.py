"""End-to-end experiment pipeline: data -> warm-start ranker -> simulated clicks -> trainers -> metrics.

A ``Runner`` memoizes prepared cells and fitted results, so comparisons,
bias sweeps and η sweeps that share a (seed, click model, trainer)
setting reuse one training run. The CPU time spent building each cached
entry is kept in ``cpu_seconds`` so callers can still account for the
full cost of a protocol that hit the cache.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .clicks import DEFAULT_MAX_RANK, make_click_model, rank_by_scores, rank_initial, simulate_log, train_initial_ranker
from .data import Dataset, SynthConfig, filter_dataset, generate_synthetic, split_dataset
from .estimators import make_ranker
from .metrics import frequency_curve, position_shift_curve

TRAINER_NAMES = ("labeled", "inforank", "inforank_minus", "click", "ipw")

# L2 weight used by the shipped experiments; see README ("Regularization scale")
EXPERIMENT_L2_WEIGHT = 1e-4


@dataclass
class ExperimentSettings:
    synth: SynthConfig = field(default_factory=SynthConfig)
    click_family: str = "pbm"
    click_params: dict = field(default_factory=dict)
    train_sessions: int = 5
    val_sessions: int = 5
    test_sessions: int = 1
    label_fraction: float = 0.01
    epsilon: float = 0.1
    max_rank: int = DEFAULT_MAX_RANK
    train: dict = field(default_factory=lambda: {"l2_weight": EXPERIMENT_L2_WEIGHT})
    cutoffs: tuple = (3, 5, 10)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cutoffs"] = list(self.cutoffs)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass
class Cell:
    """One seed's prepared data: splits, warm-start ranker and click logs."""

    seed: int
    train: Dataset
    val: Dataset
    test: Dataset
    ranker: object
    train_log: object
    val_log: object
    test_log: object


def degree_params(family: str, degree: float) -> dict:
    """Bias-degree knob per click model: the PBM exponent tau or the CCM continuation gamma1."""
    family = family.lower()
    if family == "pbm":
        return {"tau": float(degree)}
    if family == "ccm":
        return {"gamma1": float(degree)}
    raise ValueError(f"bias sweeps support pbm (tau) and ccm (gamma1), not {family!r}")


class Runner:
    def __init__(self, settings: ExperimentSettings | None = None, dataset: Dataset | None = None):
        self.settings = settings or ExperimentSettings()
        self.dataset = dataset
        self._cells: dict = {}
        self._fits: dict = {}
        self.cpu_seconds: dict = {}

    # -- data ---------------------------------------------------------------

    def splits(self, seed: int):
        key = ("splits", seed)
        if key not in self._cells:
            t0 = time.process_time()
            s = self.settings
            ds = self.dataset if self.dataset is not None else generate_synthetic(s.synth, seed)
            ds = filter_dataset(ds, s.max_rank)
            tr, va, te = split_dataset(ds, seed)
            self._cells[key] = (tr, va, te, train_initial_ranker(tr, s.label_fraction, seed))
            self.cpu_seconds[key] = time.process_time() - t0
        return self._cells[key]

    def _click_model(self, click_params):
        s = self.settings
        model = make_click_model(s.click_family, **dict(s.click_params if click_params is None else click_params))
        # key on the resolved parameters so {} and {"tau": 1.0} share a cache entry
        ident = json.dumps(vars(model), sort_keys=True, default=lambda a: np.asarray(a).tolist())
        return model, ident

    def cell(self, seed: int, click_params: dict | None = None, train_fraction: float = 1.0) -> Cell:
        s = self.settings
        model, ident = self._click_model(click_params)
        key = ("cell", seed, ident, train_fraction)
        if key not in self._cells:
            tr, va, te, ranker = self.splits(seed)
            t0 = time.process_time()
            if train_fraction < 1.0:
                n = max(1, int(round(train_fraction * len(tr))))
                keep = np.random.default_rng([seed, 0xF8AC]).permutation(len(tr))[:n]
                tr = tr.subset(sorted(keep.tolist()))
            self._cells[key] = Cell(
                seed, tr, va, te, ranker,
                simulate_log(tr, ranker, model, seed, s.train_sessions, s.epsilon, s.max_rank),
                simulate_log(va, ranker, model, seed + 1, s.val_sessions, s.epsilon, s.max_rank),
                simulate_log(te, ranker, model, seed + 2, s.test_sessions, s.epsilon, s.max_rank),
            )
            self.cpu_seconds[key] = time.process_time() - t0
        return self._cells[key]

    # -- training -----------------------------------------------------------

    def fit(self, trainer: str, seed: int, eta: float | None = None, click_params: dict | None = None,
            train_fraction: float = 1.0):
        """Fitted estimator for one (trainer, seed, click model, η, data fraction) setting."""
        if trainer not in TRAINER_NAMES:
            raise ValueError(f"unknown trainer {trainer!r}; expected one of {list(TRAINER_NAMES)}")
        s = self.settings
        kw = dict(s.train)
        kw.update(random_state=seed, max_rank=s.max_rank, epsilon=s.epsilon, sessions=s.train_sessions)
        if trainer == "inforank":
            eta = float(kw.get("eta", 0.5) if eta is None else eta)
            kw["eta"] = eta
        elif trainer == "inforank_minus":
            eta = 0.0
        else:
            eta = None
        # labeled training never sees clicks, so it is shared across click models
        cp = None if trainer == "labeled" else self._click_model(click_params)[1]
        key = (trainer, seed, eta, cp, train_fraction)
        if key not in self._fits:
            c = self.cell(seed, click_params, train_fraction)
            t0 = time.process_time()
            est = make_ranker(trainer, **kw)
            if trainer == "labeled":
                est.fit(c.train, eval_dataset=c.val)
            else:
                est.fit(c.train_log, eval_log=c.val_log, eval_dataset=c.val)
            self._fits[key] = est
            self.cpu_seconds[("fit",) + key] = time.process_time() - t0
        return self._fits[key]

    def cost_of(self, trainer: str, seed: int, eta: float | None = None, click_params: dict | None = None,
                train_fraction: float = 1.0) -> dict:
        """CPU seconds behind one setting: {cache key: seconds} for its splits, cell and fit."""
        ident = self._click_model(click_params)[1]
        if trainer == "inforank":
            eta = float(self.settings.train.get("eta", 0.5) if eta is None else eta)
        elif trainer == "inforank_minus":
            eta = 0.0
        else:
            eta = None
        keys = [("splits", seed), ("cell", seed, ident, train_fraction),
                ("fit", trainer, seed, eta, None if trainer == "labeled" else ident, train_fraction)]
        return {k: self.cpu_seconds.get(k, 0.0) for k in keys}

    def evaluate(self, trainer: str, seed: int, eta: float | None = None, click_params: dict | None = None,
                 train_fraction: float = 1.0) -> dict:
        est = self.fit(trainer, seed, eta, click_params, train_fraction)
        c = self.cell(seed, click_params, train_fraction)
        rep = est.evaluate(c.test, c.test_log, self.settings.cutoffs)
        val_dci = est.delta_ci(c.val_log.features) if hasattr(est, "delta_ci") else float("nan")
        row = {"trainer": trainer, "seed": seed, "eta": getattr(est, "eta", float("nan")),
               "map_at_10": rep.map_at_10, "delta_ci": rep.delta_ci, "val_delta_ci": val_dci,
               "epochs": len(est.history_)}
        for k, v in sorted(rep.ndcg.items()):
            row[f"ndcg@{k}"] = v
        return row

    # -- protocols ----------------------------------------------------------

    def compare(self, trainers, seeds, eta: float | None = None) -> list:
        return [self.evaluate(t, s, eta) for s in seeds for t in trainers]

    def bias_sweep(self, degrees, trainers, seeds) -> list:
        """Test metrics per (bias degree, trainer, seed), clicks regenerated at each degree."""
        if len(degrees) == 0:
            raise ValueError("bias sweep needs at least one degree")
        rows = []
        for deg in degrees:
            params = {**self.settings.click_params, **degree_params(self.settings.click_family, deg)}
            for seed in seeds:
                for t in trainers:
                    rows.append({"degree": float(deg), **self.evaluate(t, seed, None, params)})
        return rows

    def eta_sweep(self, etas, seeds) -> list:
        return [self.evaluate("inforank", s, float(e)) for e in etas for s in seeds]

    def fraction_sweep(self, fractions, trainers, seeds) -> list:
        rows = []
        for f in fractions:
            if not 0 < f <= 1:
                raise ValueError("training fractions must lie in (0, 1]")
            for seed in seeds:
                for t in trainers:
                    rows.append({"fraction": float(f), **self.evaluate(t, seed, None, None, float(f))})
        return rows

    def curves(self, trainer: str, seed: int, eta: float | None = None):
        """Position-shift and item-frequency curves of one fitted model on the test split."""
        est = self.fit(trainer, seed, eta)
        c = self.cell(seed)
        initial = [[d.doc_id for d in rank_initial(c.ranker, g)] for g in c.test.groups]
        model = [[d.doc_id for d in est.rank(g)] for g in c.test.groups]
        truth = [[d.doc_id for d in rank_by_scores(g, g.labels)] for g in c.test.groups]
        shift, ref = position_shift_curve(initial, model, truth)
        pop, top = frequency_curve(model)
        return [shift, ref, pop, top]


# ---------------------------------------------------------------------------
# tables


def aggregate(rows, group_keys, metrics=("ndcg@10",)) -> list:
    """Mean and standard error over seeds for each combination of ``group_keys``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in group_keys), []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        rs = groups[key]
        row = dict(zip(group_keys, key))
        row["n_seeds"] = len(rs)
        for m in metrics:
            v = np.array([r[m] for r in rs], dtype=np.float64)
            row[m] = float(v.mean())
            row[f"{m}_stderr"] = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
        out.append(row)
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, rows) -> None:
    if not rows:
        raise ValueError("no rows to write")
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [k for k in r if k not in cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])


def settings_with(settings: ExperimentSettings, **changes) -> ExperimentSettings:
    return replace(settings, **changes)
