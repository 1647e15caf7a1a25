"""Conditional mutual information between relevance and observation, and the ΔCI gap.

All quantities are in nats. Inputs are the three head outputs for an
instance x: P(R=1|O=1,x), P(R=1|O=0,x) and P(O=1|x).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

KAPPA = 1e-6


@dataclass(frozen=True)
class PointwiseHeads:
    p_r_given_o1: float
    p_r_given_o0: float
    p_o1: float

    def clamped(self, kappa: float = KAPPA) -> "PointwiseHeads":
        return PointwiseHeads(*(float(np.clip(v, kappa, 1 - kappa)) for v in self))

    def __iter__(self):
        return iter((self.p_r_given_o1, self.p_r_given_o0, self.p_o1))


def _unpack(h):
    if isinstance(h, PointwiseHeads):
        return tuple(np.float64(v) for v in h)
    r1, r0, q = h
    return np.asarray(r1, np.float64), np.asarray(r0, np.float64), np.asarray(q, np.float64)


def _bernoulli_kl(a, b):
    return xlogy(a, a / b) + xlogy(1 - a, (1 - a) / (1 - b))


def cmi_pointwise(h, kappa: float = KAPPA):
    """I(R;O|X=x) from the three head outputs; vectorized over arrays.

    Equals sum_o P(O=o|x) KL(P(R|O=o,x) || P(R|x)) with P(R|x) the
    observation-weighted mixture. Inputs are clamped to [kappa, 1-kappa];
    negative rounding residue is clipped to zero.
    """
    r1, r0, q = (np.clip(v, kappa, 1 - kappa) for v in _unpack(h))
    m = q * r1 + (1 - q) * r0
    val = q * _bernoulli_kl(r1, m) + (1 - q) * _bernoulli_kl(r0, m)
    val = np.maximum(val, 0.0)
    return float(val) if np.ndim(val) == 0 else val


def cmi_pointwise_grad(h, kappa: float = KAPPA):
    """Partial derivatives of :func:`cmi_pointwise` w.r.t. (r1, r0, q).

    The derivative through the mixture m vanishes because sum_o P(o) r_o = m,
    leaving q*(logit r1 - logit m), (1-q)*(logit r0 - logit m) and
    KL(r1||m) - KL(r0||m). Clamped coordinates get zero gradient.
    """
    raw = _unpack(h)
    r1, r0, q = (np.clip(v, kappa, 1 - kappa) for v in raw)
    m = q * r1 + (1 - q) * r0
    lm = np.log(m) - np.log1p(-m)
    g1 = q * (np.log(r1) - np.log1p(-r1) - lm)
    g0 = (1 - q) * (np.log(r0) - np.log1p(-r0) - lm)
    gq = _bernoulli_kl(r1, m) - _bernoulli_kl(r0, m)
    val = q * _bernoulli_kl(r1, m) + (1 - q) * _bernoulli_kl(r0, m)
    live = val > 0
    masks = [(v >= kappa) & (v <= 1 - kappa) & live for v in raw]
    return tuple(np.where(mk, g, 0.0) for mk, g in zip(masks, (g1, g0, gq)))


def cmi_batch(heads, kappa: float = KAPPA) -> float:
    """Mean pointwise CMI over a batch (list of PointwiseHeads or a (r1, r0, q) triple of arrays)."""
    if isinstance(heads, tuple) and len(heads) == 3 and not isinstance(heads[0], PointwiseHeads):
        r1, r0, q = (np.atleast_1d(np.asarray(v, np.float64)) for v in heads)
    else:
        heads = list(heads)
        if not heads:
            raise ValueError("cmi_batch needs a non-empty batch")
        r1, r0, q = (np.array(v, np.float64) for v in zip(*heads))
    if r1.size == 0:
        raise ValueError("cmi_batch needs a non-empty batch")
    return float(np.mean(cmi_pointwise((r1, r0, q), kappa)))


def delta_ci_pointwise(h):
    """|P(R=1|O=1,x) - P(R=1|O=0,x)|."""
    r1, r0, _ = _unpack(h)
    val = np.abs(r1 - r0)
    return float(val) if np.ndim(val) == 0 else val


def delta_ci_dataset(model, X) -> float:
    """Mean ΔCI of a two-tower model over the rows of X (e.g. a log's impressions)."""
    from .model import head_outputs

    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("delta_ci_dataset needs a non-empty evaluation set")
    r1, r0, _ = head_outputs(model, X)
    return float(np.mean(np.abs(r1 - r0)))
