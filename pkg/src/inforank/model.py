"""Attention-based observation/relevance estimator.

Feature slots are embedded to ``d``-dim vectors, mixed by multi-head
attention over slots, pooled into a single embedding ``p`` and read out by
small MLP heads. The two-tower variant has a relevance head that also sees
an observation token (o = 0 or 1, prepended as an extra slot) and an
observation head that sees x only. The single-tower variant has one
``score`` head and is used by the baselines.

Every forward function returns a cache consumed by its ``*_backward``
counterpart; gradients are accumulated into a dict shaped like the params.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .clicks import DEFAULT_MAX_RANK, group_features, rank_by_scores
from .data import schema_from_list, schema_to_list

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture. ``schema`` lists the slots read from the leading columns of x."""

    schema: tuple
    dim: int = 8
    n_heads: int = 2
    hidden: tuple = ()
    temperature: float = 1.0
    two_tower: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.n_heads < 1:
            raise ModelError("dim and n_heads must be >= 1")
        if self.temperature <= 0:
            raise ModelError("temperature must be > 0")
        if not self.schema:
            raise ModelError("the model needs at least one feature slot")
        if not self.hidden:
            object.__setattr__(self, "hidden", (2 * self.dim, self.dim))
        object.__setattr__(self, "schema", tuple(self.schema))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def head_names(self) -> tuple:
        return ("relevance", "observation") if self.two_tower else ("score",)

    @property
    def n_slots(self) -> int:
        return len(self.schema)

    def to_dict(self) -> dict:
        return {
            "schema": schema_to_list(self.schema), "dim": self.dim, "n_heads": self.n_heads,
            "hidden": list(self.hidden), "temperature": self.temperature, "two_tower": self.two_tower,
        }

    @classmethod
    def from_dict(cls, d) -> "ModelSpec":
        return cls(schema_from_list(d["schema"]), int(d["dim"]), int(d["n_heads"]), tuple(d["hidden"]),
                   float(d["temperature"]), bool(d["two_tower"]))

    def schema_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ModelParams:
    spec: ModelSpec
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def keys(self):
        return self.values.keys()

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.values.items()})

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.values.items()}

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.values.values())


def _uniform(rng, shape, fan_in, fan_out):
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def init_params(schema, dim: int = 8, n_heads: int = 2, hidden=(), temperature: float = 1.0,
                two_tower: bool = True, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    spec = schema if isinstance(schema, ModelSpec) else ModelSpec(
        tuple(schema), dim, n_heads, tuple(hidden), temperature, two_tower)
    d, H = spec.dim, spec.n_heads
    rng = np.random.default_rng([seed, 0xA77])
    v = {}
    for s, slot in enumerate(spec.schema):
        if slot.is_categorical:
            v[f"embed/{s}"] = _uniform(rng, (slot.size, d), slot.size, d)
        else:
            v[f"real_w/{s}"] = _uniform(rng, (d,), 1, d)
            v[f"real_b/{s}"] = np.zeros(d)
    if spec.two_tower:
        v["obs_token"] = _uniform(rng, (2, d), 2, d)
    for name in ("W_T", "W_S", "W_C"):
        v[name] = _uniform(rng, (H, d, d), d, d)
    v["W_q"] = _uniform(rng, (d, d), d, d)
    v["b_q"] = np.zeros(d)
    v["W_p"] = _uniform(rng, (d, d), d, d)
    v["b_p"] = np.zeros(d)
    v["w"] = _uniform(rng, (d,), d, 1)
    for head in spec.head_names:
        widths = (d,) + spec.hidden
        for k in range(len(spec.hidden)):
            v[f"{head}/W{k}"] = _uniform(rng, (widths[k], widths[k + 1]), widths[k], widths[k + 1])
            v[f"{head}/b{k}"] = np.zeros(widths[k + 1])
        v[f"{head}/W_out"] = _uniform(rng, (widths[-1],), widths[-1], 1)
        v[f"{head}/b_out"] = np.zeros(())
    return ModelParams(spec, v)


# ---------------------------------------------------------------------------
# embedding


def _as_batch(X):
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    return (X[None, :] if single else X), single


def embed_forward(params: ModelParams, X, obs=None):
    """Slot vectors (B, N[+1], d); the observation token, if any, is slot 0."""
    spec = params.spec
    X, _ = _as_batch(X)
    if X.shape[1] < spec.n_slots:
        raise ModelError(f"x has {X.shape[1]} columns, the model reads {spec.n_slots}")
    B, d = X.shape[0], spec.dim
    off = 0 if obs is None else 1
    out = np.empty((B, spec.n_slots + off, d))
    codes = {}
    if obs is not None:
        if not spec.two_tower:
            raise ModelError("single-tower models take no observation token")
        obs = np.broadcast_to(np.asarray(obs), (B,))
        if np.any((obs != 0) & (obs != 1)):
            raise ModelError("observation value must be 0 or 1")
        obs = obs.astype(np.int64)
        out[:, 0] = params["obs_token"][obs]
    for s, slot in enumerate(spec.schema):
        col = X[:, s]
        if slot.is_categorical:
            c = col.astype(np.int64)
            if np.any(c != col) or np.any(c < 0) or np.any(c >= slot.size):
                raise ModelError(f"slot {s} ({slot.name or 'categorical'}): code outside vocabulary [0, {slot.size})")
            codes[s] = c
            out[:, off + s] = params[f"embed/{s}"][c]
        else:
            out[:, off + s] = col[:, None] * params[f"real_w/{s}"] + params[f"real_b/{s}"]
    return out, (X, obs, codes)


def embed_backward(params: ModelParams, cache, dslots, grads):
    X, obs, codes = cache
    off = 0 if obs is None else 1
    if obs is not None:
        np.add.at(grads["obs_token"], obs, dslots[:, 0])
    for s, slot in enumerate(params.spec.schema):
        g = dslots[:, off + s]
        if slot.is_categorical:
            np.add.at(grads[f"embed/{s}"], codes[s], g)
        else:
            grads[f"real_w/{s}"] += X[:, s] @ g
            grads[f"real_b/{s}"] += g.sum(0)


def embed_features(params: ModelParams, x, obs=None) -> np.ndarray:
    """Slot vectors for a single combined vector x (N rows, N+1 with an observation token)."""
    out, _ = embed_forward(params, np.asarray(x, dtype=np.float64)[None, :], None if obs is None else [obs])
    return out[0]


# ---------------------------------------------------------------------------
# attention encoder


@dataclass
class ForwardTrace:
    slots: np.ndarray
    T: np.ndarray
    S: np.ndarray
    C: np.ndarray
    beta: np.ndarray
    alpha: np.ndarray
    M: np.ndarray
    omega: np.ndarray
    t: np.ndarray
    p: np.ndarray


def encoder_forward(params: ModelParams, slots):
    """Slot vectors (B, N, d) -> pooled embedding p (B, d) and its trace."""
    iota = params.spec.temperature
    x = slots[:, None]
    T = x @ params["W_T"]
    S = x @ params["W_S"]
    C = x @ params["W_C"]
    beta = T @ S.transpose(0, 1, 3, 2)
    z = beta / iota
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    alpha = e / e.sum(-1, keepdims=True)
    M = (alpha @ C).mean(1)
    omega = expit(M @ params["W_q"] + params["b_q"])
    t = np.tanh(omega @ params["W_p"] + params["b_p"])
    p = (t * params["w"]).mean(1)
    return p, ForwardTrace(slots, T, S, C, beta, alpha, M, omega, t, p)


def encoder_backward(params: ModelParams, tr: ForwardTrace, dp, grads):
    """Accumulate parameter gradients; return d(loss)/d(slots)."""
    N = tr.slots.shape[1]
    H = params.spec.n_heads
    iota = params.spec.temperature
    w = params["w"]
    d = w.shape[0]
    grads["w"] += (dp[:, None, :] * tr.t).sum((0, 1)) / N
    du = (dp[:, None, :] * w / N) * (1.0 - tr.t**2)
    grads["W_p"] += tr.omega.reshape(-1, d).T @ du.reshape(-1, d)
    grads["b_p"] += du.sum((0, 1))
    dz = (du @ params["W_p"].T) * tr.omega * (1.0 - tr.omega)
    grads["W_q"] += tr.M.reshape(-1, d).T @ dz.reshape(-1, d)
    grads["b_q"] += dz.sum((0, 1))
    dA = np.broadcast_to((dz @ params["W_q"].T)[:, None] / H, tr.C.shape)
    dalpha = dA @ tr.C.transpose(0, 1, 3, 2)
    dC = tr.alpha.transpose(0, 1, 3, 2) @ dA
    dbeta = tr.alpha * (dalpha - (dalpha * tr.alpha).sum(-1, keepdims=True)) / iota
    dT = dbeta @ tr.S
    dS = dbeta.transpose(0, 1, 3, 2) @ tr.T
    dslots = np.zeros_like(tr.slots)
    for name, dY in (("W_T", dT), ("W_S", dS), ("W_C", dC)):
        grads[name] += np.tensordot(tr.slots, dY, axes=([0, 1], [0, 2])).transpose(1, 0, 2)
        dslots += (dY @ params[name].transpose(0, 2, 1)).sum(1)
    return dslots


def attention_encode(params: ModelParams, slot_vectors):
    """(p, trace) for one instance (N, d) or a batch (B, N, d)."""
    sv = np.asarray(slot_vectors, dtype=np.float64)
    if sv.ndim == 2:
        p, tr = encoder_forward(params, sv[None])
        return p[0], tr
    return encoder_forward(params, sv)


# ---------------------------------------------------------------------------
# MLP heads


def head_forward(params: ModelParams, head: str, p):
    acts = [p]
    a = p
    for k in range(len(params.spec.hidden)):
        a = np.maximum(a @ params[f"{head}/W{k}"] + params[f"{head}/b{k}"], 0.0)
        acts.append(a)
    logit = a @ params[f"{head}/W_out"] + params[f"{head}/b_out"]
    return logit, acts


def head_backward(params: ModelParams, head: str, acts, dlogit, grads):
    """dlogit (B,) -> d(loss)/dp."""
    a = acts[-1]
    grads[f"{head}/W_out"] += a.T @ dlogit
    grads[f"{head}/b_out"] += dlogit.sum()
    da = dlogit[:, None] * params[f"{head}/W_out"]
    for k in reversed(range(len(params.spec.hidden))):
        dz = da * (acts[k + 1] > 0)
        grads[f"{head}/W{k}"] += acts[k].T @ dz
        grads[f"{head}/b{k}"] += dz.sum(0)
        da = dz @ params[f"{head}/W{k}"].T
    return da


def tower_forward(params: ModelParams, head: str, X, obs=None):
    """x -> head logit, with caches for backward."""
    slots, ecache = embed_forward(params, X, obs)
    p, tr = encoder_forward(params, slots)
    logit, acts = head_forward(params, head, p)
    return logit, (ecache, tr, acts)


def tower_backward(params: ModelParams, head: str, cache, dlogit, grads):
    ecache, tr, acts = cache
    dp = head_backward(params, head, acts, dlogit, grads)
    dslots = encoder_backward(params, tr, dp, grads)
    embed_backward(params, ecache, dslots, grads)


# ---------------------------------------------------------------------------
# predictions


def _require_two_tower(params):
    if not params.spec.two_tower:
        raise ModelError("this operation needs the two-tower (relevance + observation) model")


def _out(v, single):
    return float(v[0]) if single else v


def predict_observation(params: ModelParams, X):
    """P(O=1 | x)."""
    _require_two_tower(params)
    Xb, single = _as_batch(X)
    logit, _ = tower_forward(params, "observation", Xb)
    return _out(expit(logit), single)


def predict_relevance(params: ModelParams, X, o):
    """P(R=1 | O=o, x)."""
    _require_two_tower(params)
    Xb, single = _as_batch(X)
    o_arr = np.asarray(o)
    if np.any((o_arr != 0) & (o_arr != 1)):
        raise ModelError("o must be 0 or 1")
    logit, _ = tower_forward(params, "relevance", Xb, np.broadcast_to(o_arr, (len(Xb),)))
    return _out(expit(logit), single)


def observation_label(p_obs):
    """Hard estimate of o: 1 iff P(O=1|x) > 0.5 (ties go to 0)."""
    return (np.asarray(p_obs) > 0.5).astype(np.int64)


def estimate_observation_label(params: ModelParams, X):
    Xb, single = _as_batch(X)
    lab = observation_label(predict_observation(params, Xb))
    return int(lab[0]) if single else lab


def head_outputs(params: ModelParams, X):
    """(P(R=1|O=1,x), P(R=1|O=0,x), P(O=1|x)) as three arrays."""
    _require_two_tower(params)
    Xb, _ = _as_batch(X)
    B = len(Xb)
    logit_r, _ = tower_forward(params, "relevance", np.concatenate([Xb, Xb]),
                               np.concatenate([np.ones(B, np.int64), np.zeros(B, np.int64)]))
    r = expit(logit_r)
    return r[:B], r[B:], predict_observation(params, Xb)


def predict_click(params: ModelParams, X, o=None):
    """P(C=1|x) = P(R=1|O=o,x) * P(O=1|x); ``o=None`` uses the estimated label."""
    Xb, single = _as_batch(X)
    q = predict_observation(params, Xb)
    if o is None:
        o = observation_label(q)
    return _out(predict_relevance(params, Xb, o) * q, single)


def combine_marginal(r1, r0, q):
    return r1 * q + r0 * (1.0 - q)


def marginal_relevance(params: ModelParams, X):
    """P(R=1|x) = sum_o P(R=1|O=o,x) P(O=o|x)."""
    Xb, single = _as_batch(X)
    r1, r0, q = head_outputs(params, Xb)
    return _out(combine_marginal(r1, r0, q), single)


def score(params: ModelParams, X):
    """Ranking score: marginal relevance (two-tower) or the single head's probability."""
    Xb, single = _as_batch(X)
    if params.spec.two_tower:
        return _out(marginal_relevance(params, Xb), single)
    logit, _ = tower_forward(params, "score", Xb)
    return _out(expit(logit), single)


def rank_by_relevance(params: ModelParams, group, position: int = 1, max_rank: int = DEFAULT_MAX_RANK):
    """Order a query group by descending score with every document placed at ``position``."""
    if len(group) == 0:
        return []
    X = group_features(group, position, max_rank)
    return rank_by_scores(group, score(params, X))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    meta = {
        "version": CHECKPOINT_VERSION, "spec": params.spec.to_dict(),
        "schema_hash": params.spec.schema_hash(), "extra": extra or {},
    }
    arrays = {f"param:{k}": v for k, v in params.values.items()}
    np.savez(path, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, expected_schema=None) -> ModelParams:
    """Load params; raises ModelError if the file or the expected slot schema does not match."""
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ModelError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        spec = ModelSpec.from_dict(meta["spec"])
        if spec.schema_hash() != meta["schema_hash"]:
            raise ModelError(f"{path}: schema hash mismatch (corrupted checkpoint)")
        values = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
    if expected_schema is not None:
        exp = tuple(expected_schema)
        if tuple(spec.schema) != exp[:len(spec.schema)]:
            raise ModelError(f"{path}: checkpoint schema does not match the data schema")
    ref = init_params(spec, seed=0)
    if set(ref.keys()) != set(values) or any(ref[k].shape != values[k].shape for k in values):
        raise ModelError(f"{path}: parameter set does not match the declared architecture")
    return ModelParams(spec, {k: values[k] for k in ref.keys()})
