"""Losses, gradients, Adam and the training loops (InfoRank and its baselines)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .clicks import DEFAULT_MAX_RANK, ClickLog, relevance_log
from .infotheory import cmi_pointwise, cmi_pointwise_grad
from .metrics import evaluate_ranking, score_groups
from .model import ModelParams, init_params, observation_label, score, tower_backward, tower_forward

PRED_CLAMP = 1e-6
HISTORY_COLUMNS = ("epoch", "L", "I", "L2", "total", "val_ndcg10", "val_delta_ci")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Raised when the loss or a gradient turns non-finite; carries the history so far."""

    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    eta: float = 0.5
    l2_weight: float = 0.01
    max_epochs: int = 100
    patience: int = 5
    min_delta: float = 1e-5
    seed: int = 0
    observation_supervision: bool = False
    dim: int = 8
    n_heads: int = 2
    hidden: tuple = ()
    temperature: float = 1.0
    inference_position: int = 1
    max_rank: int = DEFAULT_MAX_RANK
    propensity_clip: float = 0.05

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be >= 0")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


# ---------------------------------------------------------------------------
# losses


def bce_loss(pred, label):
    """Binary cross entropy with the prediction clamped to [1e-6, 1 - 1e-6]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), PRED_CLAMP, 1 - PRED_CLAMP)
    y = np.asarray(label, dtype=np.float64)
    val = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    return float(val) if np.ndim(val) == 0 else val


def _bce_dpred(pred, label):
    inside = (pred >= PRED_CLAMP) & (pred <= 1 - PRED_CLAMP)
    p = np.clip(pred, PRED_CLAMP, 1 - PRED_CLAMP)
    return np.where(inside, (p - label) / (p * (1 - p)), 0.0)


def l2_penalty(params: ModelParams, weight: float) -> float:
    return weight * float(sum(np.sum(v * v) for v in params.values.values()))


def _batch_arrays(batch):
    if isinstance(batch, ClickLog):
        return batch.features, batch.clicked.astype(np.float64), batch.observed.astype(np.float64), batch.propensity
    X, c, o = batch[:3]
    prop = batch[3] if len(batch) > 3 else np.ones(len(X))
    return np.asarray(X, np.float64), np.asarray(c, np.float64), np.asarray(o, np.float64), np.asarray(prop, np.float64)


def inforank_objective(params: ModelParams, batch, config: TrainConfig, want_grad: bool = True):
    """L + eta * I + L2 for a batch, optionally with its exact gradient.

    The click prediction uses the logged observation when
    ``observation_supervision`` is on and the thresholded estimate otherwise;
    the estimate is a constant for differentiation.
    """
    X, c, o_log, _ = _batch_arrays(batch)
    B = len(X)
    if B == 0:
        raise TrainingError("empty batch")
    logit_q, cache_q = tower_forward(params, "observation", X)
    q = expit(logit_q)
    logit_r, cache_r = tower_forward(
        params, "relevance", np.concatenate([X, X]), np.concatenate([np.ones(B, np.int64), np.zeros(B, np.int64)]))
    r = expit(logit_r)
    r1, r0 = r[:B], r[B:]
    o_used = o_log if config.observation_supervision else observation_label(q).astype(np.float64)
    r_used = np.where(o_used == 1, r1, r0)
    pred = r_used * q
    L = float(np.mean(bce_loss(pred, c)))
    if config.observation_supervision:
        L += float(np.mean(bce_loss(q, o_log)))
    I = float(np.mean(cmi_pointwise((r1, r0, q))))
    L2 = l2_penalty(params, config.l2_weight)
    total = L + config.eta * I + L2
    comps = {"L": L, "I": I, "L2": L2, "total": total}
    if not want_grad:
        return total, comps, None

    grads = params.zeros_like()
    dpred = _bce_dpred(pred, c) / B
    dq = dpred * r_used
    dr_used = dpred * q
    if config.observation_supervision:
        dq = dq + _bce_dpred(q, o_log) / B
    g1, g0, gq = cmi_pointwise_grad((r1, r0, q))
    k = config.eta / B
    dr1 = k * g1 + np.where(o_used == 1, dr_used, 0.0)
    dr0 = k * g0 + np.where(o_used == 1, 0.0, dr_used)
    dq = dq + k * gq
    tower_backward(params, "observation", cache_q, dq * q * (1 - q), grads)
    tower_backward(params, "relevance", cache_r, np.concatenate([dr1 * r1 * (1 - r1), dr0 * r0 * (1 - r0)]), grads)
    if config.l2_weight:
        for key, v in params.values.items():
            grads[key] += 2 * config.l2_weight * v
    return total, comps, grads


def pointwise_targets(batch, kind: str, config: TrainConfig):
    X, c, _, prop = _batch_arrays(batch)
    if kind == "ipw":
        return c / np.maximum(prop, config.propensity_clip)
    return c


def pointwise_objective(params: ModelParams, batch, config: TrainConfig, want_grad: bool = True, kind: str = "click"):
    """Single-head BCE on per-record targets (clicks, sampled relevance, or c / propensity)."""
    X, _, _, _ = _batch_arrays(batch)
    B = len(X)
    if B == 0:
        raise TrainingError("empty batch")
    y = pointwise_targets(batch, kind, config)
    logit, cache = tower_forward(params, "score", X)
    f = expit(logit)
    L = float(np.mean(bce_loss(f, y)))
    L2 = l2_penalty(params, config.l2_weight)
    comps = {"L": L, "I": 0.0, "L2": L2, "total": L + L2}
    if not want_grad:
        return L + L2, comps, None
    grads = params.zeros_like()
    inside = (f >= PRED_CLAMP) & (f <= 1 - PRED_CLAMP)
    tower_backward(params, "score", cache, np.where(inside, f - y, 0.0) / B, grads)
    if config.l2_weight:
        for key, v in params.values.items():
            grads[key] += 2 * config.l2_weight * v
    return L + L2, comps, grads


def _objective_for(params: ModelParams, kind: str):
    if kind == "inforank":
        if not params.spec.two_tower:
            raise TrainingError("InfoRank training needs a two-tower model")
        return inforank_objective
    if params.spec.two_tower:
        raise TrainingError(f"{kind!r} training needs a single-tower model")
    return lambda p, b, c, want_grad=True: pointwise_objective(p, b, c, want_grad, kind)


def total_loss(model: ModelParams, batch, config: TrainConfig, kind: str = "inforank"):
    """(total, {"L", "I", "L2"}) without gradients."""
    total, comps, _ = _objective_for(model, kind)(model, batch, config, want_grad=False)
    return total, {k: comps[k] for k in ("L", "I", "L2")}


def grad(model: ModelParams, batch, config: TrainConfig, kind: str = "inforank") -> dict:
    """Exact gradient of the training objective w.r.t. every parameter."""
    _, _, g = _objective_for(model, kind)(model, batch, config, want_grad=True)
    for key, v in g.items():
        if not np.all(np.isfinite(v)):
            raise TrainingError(f"non-finite gradient for parameter {key!r}")
    return g


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()},
                         self.step, self.beta1, self.beta2, self.eps)


def _adam_inplace(params: ModelParams, grads: dict, state: AdamState, lr: float):
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1 - b1**state.step
    bc2 = 1 - b2**state.step
    for k, p in params.values.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float):
    """Bias-corrected Adam update; returns new (params, state) and leaves the inputs untouched."""
    if set(grads) != set(params.keys()):
        raise ValueError("gradient keys do not match the parameters")
    for k, v in params.values.items():
        if grads[k].shape != v.shape or state.m[k].shape != v.shape:
            raise ValueError(f"shape mismatch for parameter {k!r}")
    new_p, new_s = params.copy(), state.copy()
    _adam_inplace(new_p, grads, new_s, lr)
    return new_p, new_s


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    """Everything needed to resume training exactly."""

    params: ModelParams
    adam: AdamState
    epoch: int
    best_params: ModelParams
    best_val: float
    wait: int
    history: list = field(default_factory=list)
    stopped: bool = False


def _evaluate(params, kind, log, config, chunk=2048):
    totals = {"L": 0.0, "I": 0.0, "L2": 0.0}
    obj = _objective_for(params, kind)
    n = len(log)
    for lo in range(0, n, chunk):
        sub = log.subset(np.arange(lo, min(lo + chunk, n)))
        _, comps, _ = obj(params, sub, config, want_grad=False)
        for key in ("L", "I"):
            totals[key] += comps[key] * len(sub) / n
    totals["L2"] = l2_penalty(params, config.l2_weight)
    eta = config.eta if kind == "inforank" else 0.0
    return totals["L"] + eta * totals["I"] + totals["L2"]


def _val_metrics(params, val_log, val_dataset, config):
    ndcg = float("nan")
    dci = float("nan")
    if val_dataset is not None and len(val_dataset):
        scores = score_groups(lambda X: score(params, X), val_dataset, config.inference_position, config.max_rank)
        ndcg = evaluate_ranking(scores, val_dataset, cutoffs=(10,)).ndcg[10]
    if params.spec.two_tower and val_log is not None and len(val_log):
        from .infotheory import delta_ci_dataset

        dci = delta_ci_dataset(params, val_log.features)
    return ndcg, dci


def fit_model(params: ModelParams, log: ClickLog, config: TrainConfig, kind: str = "inforank",
              val_log: ClickLog | None = None, val_dataset=None, state: TrainState | None = None) -> TrainState:
    """Mini-batch Adam with early stopping on validation total loss.

    Batches are a fresh permutation of the log every epoch, drawn from
    ``(seed, epoch)``; a run is a pure function of its inputs, and
    passing a saved ``state`` continues it exactly.
    """
    if len(log) == 0:
        raise TrainingError("cannot train on an empty click log")
    obj = _objective_for(params, kind)
    if state is None:
        state = TrainState(params.copy(), AdamState.zeros(params), 0, params.copy(), math.inf, 0, [])
    else:
        state = TrainState(state.params.copy(), state.adam.copy(), state.epoch, state.best_params.copy(),
                           state.best_val, state.wait, list(state.history), state.stopped)
    n = len(log)
    bs = config.batch_size
    while state.epoch < config.max_epochs and not state.stopped:
        perm = np.random.default_rng([config.seed, state.epoch, 0xE90C]).permutation(n)
        sums = {"L": 0.0, "I": 0.0, "L2": 0.0, "total": 0.0}
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            total, comps, g = obj(state.params, log.subset(idx), config)
            if not math.isfinite(total):
                raise DivergenceError(f"non-finite loss at epoch {state.epoch + 1}", state.history)
            for key, v in g.items():
                if not np.all(np.isfinite(v)):
                    raise DivergenceError(f"non-finite gradient for {key!r} at epoch {state.epoch + 1}", state.history)
            _adam_inplace(state.params, g, state.adam, config.learning_rate)
            for key in sums:
                sums[key] += comps[key] * len(idx) / n
        state.epoch += 1
        val_total = _evaluate(state.params, kind, val_log, config) if val_log is not None and len(val_log) else sums["total"]
        ndcg, dci = _val_metrics(state.params, val_log, val_dataset, config)
        row = {"epoch": state.epoch, **sums, "val_total": val_total, "val_ndcg10": ndcg, "val_delta_ci": dci}
        state.history.append(row)
        if not math.isfinite(val_total):
            raise DivergenceError(f"non-finite validation loss at epoch {state.epoch}", state.history)
        if val_total < state.best_val - config.min_delta:
            state.best_val = val_total
            state.best_params = state.params.copy()
            state.wait = 0
        else:
            state.wait += 1
            if state.wait >= config.patience:
                state.stopped = True
    return state


def new_model(schema, config: TrainConfig, two_tower: bool) -> ModelParams:
    if not two_tower:
        schema = tuple(s for s in schema if s.name != "position")
    return init_params(schema, config.dim, config.n_heads, config.hidden, config.temperature, two_tower, config.seed)


def train(log: ClickLog, config: TrainConfig, val_log=None, val_dataset=None, params: ModelParams | None = None):
    """InfoRank training; returns (best params, per-epoch history)."""
    params = params or new_model(log.schema, config, two_tower=True)
    st = fit_model(params, log, config, "inforank", val_log, val_dataset)
    return st.best_params, st.history


def train_click_baseline(log: ClickLog, config: TrainConfig, val_log=None, val_dataset=None) -> ModelParams:
    """Single-head model fit to raw clicks, no position feature and no debiasing."""
    st = fit_model(new_model(log.schema, config, False), log, config, "click", val_log, val_dataset)
    return st.best_params


def train_ipw_baseline(log: ClickLog, config: TrainConfig, val_log=None, val_dataset=None) -> ModelParams:
    """Single-head model fit to clicks reweighted by the simulator's true examination propensities."""
    st = fit_model(new_model(log.schema, config, False), log, config, "ipw", val_log, val_dataset)
    return st.best_params


def train_labeled_upper_bound(dataset, config: TrainConfig, sessions: int = 1, epsilon: float = 0.1,
                              val_dataset=None) -> ModelParams:
    """Single-head model fit to binary relevance sampled from the graded labels."""
    log = relevance_log(dataset, config.seed, sessions, epsilon, config.max_rank)
    val_log = None
    if val_dataset is not None and len(val_dataset):
        val_log = relevance_log(val_dataset, config.seed + 1, sessions, epsilon, config.max_rank)
    st = fit_model(new_model(log.schema, config, False), log, config, "click", val_log, val_dataset)
    return st.best_params


# ---------------------------------------------------------------------------
# counterfactual risk


PROPENSITY_FLOOR = 1e-3


def positive_log_loss(f, c):
    """Logistic loss counted only on clicked items: c * log(1 + exp(-f))."""
    return np.asarray(c, np.float64) * np.logaddexp(0.0, -np.asarray(f, np.float64))


def ipw_risk(logs, propensities, scorer, loss=positive_log_loss) -> float:
    """Sum over impressions of loss(f(x), c) / P(O=1|x)."""
    if isinstance(logs, ClickLog):
        X, c = logs.features, logs.clicked.astype(np.float64)
    else:
        X, c = logs
        X, c = np.atleast_2d(np.asarray(X, np.float64)), np.asarray(c, np.float64)
    prop = np.asarray(propensities, dtype=np.float64)
    if np.any(~(prop >= PROPENSITY_FLOOR)):
        raise TrainingError(f"propensities must be at least {PROPENSITY_FLOOR}")
    return float(np.sum(loss(scorer(X), c) / prop))


# ---------------------------------------------------------------------------
# persistence


def write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_COLUMNS[1:]])


def save_train_state(state: TrainState, path) -> None:
    arrays = {}
    for prefix, d in (("params", state.params.values), ("best", state.best_params.values),
                      ("m", state.adam.m), ("v", state.adam.v)):
        for k, v in d.items():
            arrays[f"{prefix}:{k}"] = v
    meta = {
        "spec": state.params.spec.to_dict(), "epoch": state.epoch, "best_val": state.best_val,
        "wait": state.wait, "stopped": state.stopped, "adam_step": state.adam.step, "history": state.history,
    }
    np.savez(path, meta=np.array(json.dumps(meta)), **arrays)


def load_train_state(path) -> TrainState:
    from .model import ModelSpec

    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        parts = {"params": {}, "best": {}, "m": {}, "v": {}}
        for name in z.files:
            if ":" in name:
                prefix, key = name.split(":", 1)
                parts[prefix][key] = z[name].copy()
    spec = ModelSpec.from_dict(meta["spec"])
    return TrainState(
        ModelParams(spec, parts["params"]), AdamState(parts["m"], parts["v"], meta["adam_step"]), meta["epoch"],
        ModelParams(spec, parts["best"]), meta["best_val"], meta["wait"], meta["history"], meta["stopped"],
    )
