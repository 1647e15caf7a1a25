"""Exact enumeration checks of the relevance/observation identities on small discrete worlds.

Nothing here samples: every expectation is a finite sum over outcomes.
The CMI code below deliberately shares nothing with ``infotheory`` so the
two can be checked against each other.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .training import PROPENSITY_FLOOR, ipw_risk, positive_log_loss

RESIDUAL_TOL = 1e-12


class OracleError(ValueError):
    pass


def _check_probs(name, v):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or not np.all((v >= 0) & (v <= 1)):
        raise OracleError(f"{name} must be a vector of probabilities in [0, 1]")
    return v


@dataclass
class DiscreteWorld:
    """Finite context space with P(X=x), P(O=1|x), P(R=1|O=o,x); clicks are C = R * O.

    ``features`` (one row per context point) is only needed by scorers.
    """

    px: np.ndarray
    p_o1: np.ndarray
    p_r_o1: np.ndarray
    p_r_o0: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        self.px = _check_probs("px", self.px)
        self.p_o1 = _check_probs("p_o1", self.p_o1)
        self.p_r_o1 = _check_probs("p_r_o1", self.p_r_o1)
        self.p_r_o0 = _check_probs("p_r_o0", self.p_r_o0)
        n = len(self.px)
        if n == 0 or any(len(v) != n for v in (self.p_o1, self.p_r_o1, self.p_r_o0)):
            raise OracleError("all per-x vectors must be non-empty and equally long")
        if abs(self.px.sum() - 1.0) > 1e-12:
            raise OracleError(f"P(X) sums to {self.px.sum()!r}, not 1")
        if self.features is not None:
            self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
            if len(self.features) != n:
                raise OracleError("features need one row per context point")

    @classmethod
    def single(cls, p_r_o1, p_r_o0, p_o1) -> "DiscreteWorld":
        return cls(np.ones(1), [p_o1], [p_r_o1], [p_r_o0])

    def __len__(self):
        return len(self.px)

    def joint(self, x: int) -> dict:
        """P(R=r, O=o | x) for the four (r, o) outcomes."""
        q, r1, r0 = float(self.p_o1[x]), float(self.p_r_o1[x]), float(self.p_r_o0[x])
        return {(1, 1): q * r1, (0, 1): q * (1 - r1), (1, 0): (1 - q) * r0, (0, 0): (1 - q) * (1 - r0)}

    def p_r1(self, x: int) -> float:
        j = self.joint(x)
        return j[(1, 1)] + j[(1, 0)]

    def p_c1(self, x: int) -> float:
        """P(C=1|x) by summing the joint over outcomes with r * o = 1."""
        return sum(p for (r, o), p in self.joint(x).items() if r * o == 1)

    def is_independent(self, x: int, tol: float = RESIDUAL_TOL) -> bool:
        return joint_independence_residual(self, x) <= tol


def joint_independence_residual(world: DiscreteWorld, x: int) -> float:
    """max over (r, o) of |P(r, o|x) - P(r|x) P(o|x)|."""
    j = world.joint(x)
    pr = {r: j[(r, 0)] + j[(r, 1)] for r in (0, 1)}
    po = {o: j[(0, o)] + j[(1, o)] for o in (0, 1)}
    return max(abs(j[(r, o)] - pr[r] * po[o]) for r in (0, 1) for o in (0, 1))


def brute_force_cmi(world: DiscreteWorld, x: int) -> float:
    """I(R;O|X=x) as the four-term sum over the joint, in nats."""
    j = world.joint(x)
    pr = {r: j[(r, 0)] + j[(r, 1)] for r in (0, 1)}
    po = {o: j[(0, o)] + j[(1, o)] for o in (0, 1)}
    total = 0.0
    for (r, o), p in j.items():
        if p > 0.0:
            total += p * math.log(p / (pr[r] * po[o]))
    return total


def brute_force_cmi_many(p_r_o1, p_r_o0, p_o1) -> np.ndarray:
    """Vectorized four-term CMI for arrays of head triples (no clamping)."""
    r1, r0, q = (np.asarray(v, dtype=np.float64) for v in (p_r_o1, p_r_o0, p_o1))
    joint = {(1, 1): q * r1, (0, 1): q * (1 - r1), (1, 0): (1 - q) * r0, (0, 0): (1 - q) * (1 - r0)}
    pr = {r: joint[(r, 0)] + joint[(r, 1)] for r in (0, 1)}
    po = {1: q, 0: 1 - q}
    total = np.zeros(np.broadcast(r1, r0, q).shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for (r, o), p in joint.items():
            total = total + np.where(p > 0, p * np.log(p / (pr[r] * po[o])), 0.0)
    return total


def _delta_ci(world: DiscreteWorld, x: int) -> float:
    q = world.p_o1[x]
    if q <= 0.0 or q >= 1.0:
        # one conditional sits on a null event; the difference carries no information
        return 0.0
    return abs(float(world.p_r_o1[x] - world.p_r_o0[x]))


def check_prop1(world: DiscreteWorld, tol: float = 1e-9) -> list:
    """Per-x zero tests of independence, CMI and ΔCI, and whether they agree.

    Each row holds the three measured quantities, the three boolean
    "is zero within tol" outcomes, and ``agree``.
    """
    if not tol > 0:
        raise OracleError("tol must be positive")
    rows = []
    for x in range(len(world)):
        resid = joint_independence_residual(world, x)
        cmi = brute_force_cmi(world, x)
        dci = _delta_ci(world, x)
        flags = (bool(resid <= tol), bool(cmi <= tol), bool(dci <= tol))
        rows.append({
            "x": x, "joint_residual": resid, "cmi": cmi, "delta_ci": dci,
            "independent": flags[0], "cmi_zero": flags[1], "delta_ci_zero": flags[2],
            "agree": len(set(flags)) == 1,
        })
    return rows


def verify_click_factorization(world: DiscreteWorld) -> dict:
    """|P(C=1|x) - P(R=1|x) P(O=1|x)| per x.

    The residual vanishes exactly for worlds where R and O are
    conditionally independent (or observation is degenerate);
    ``consistent`` says whether that held for every x.
    """
    per_x = [abs(world.p_c1(x) - world.p_r1(x) * float(world.p_o1[x])) for x in range(len(world))]
    indep = [world.is_independent(x) for x in range(len(world))]
    consistent = all((r <= RESIDUAL_TOL) == i for r, i in zip(per_x, indep))
    return {"residual": max(per_x), "per_x": per_x, "independent": all(indep), "consistent": consistent}


def verify_prop2(world: DiscreteWorld, scorer=None, loss=positive_log_loss) -> dict:
    """Expected IPW click risk vs the relevance risk, both by enumeration.

    lhs = sum_x P(x) E_{R,O}[ loss(f(x), R*O) / P(O=1|x) ], accumulated by
    running ``ipw_risk`` on every single-impression outcome;
    rhs = sum_x P(x) E_R[ loss(f(x), R) ]. They coincide when R and O are
    independent given x and the loss is zero on unclicked items.
    """
    if np.any(world.p_o1 < PROPENSITY_FLOOR):
        raise OracleError(f"every P(O=1|x) must be at least {PROPENSITY_FLOOR} (propensity bounded away from zero)")
    feats = world.features if world.features is not None else np.arange(len(world), dtype=np.float64)[:, None]
    if scorer is None:
        scorer = lambda X: X.sum(axis=1)  # noqa: E731
    lhs = rhs = 0.0
    for x in range(len(world)):
        fx = feats[x][None]
        q = float(world.p_o1[x])
        for (r, o), p in world.joint(x).items():
            if p == 0.0:
                continue
            lhs += world.px[x] * p * ipw_risk((fx, np.array([r * o], np.float64)), [q], scorer, loss)
        m = world.p_r1(x)
        for r, pr in ((1, m), (0, 1.0 - m)):
            rhs += world.px[x] * pr * float(np.sum(loss(scorer(fx), np.array([r], np.float64))))
    return {"lhs": float(lhs), "rhs": float(rhs), "residual": abs(float(lhs) - float(rhs)),
            "independent": all(world.is_independent(x) for x in range(len(world)))}


# ---------------------------------------------------------------------------
# history worlds


@dataclass
class HistoryWorld:
    """Context points with current relevance R and a history of earlier impressions.

    Given R and x, each of ``n_history`` earlier impressions is observed with
    probability ``p_hist_obs[x, R]`` and relevant with ``p_hist_rel[x, R]``,
    all independently. The history events are "every earlier impression was
    observed" (𝒪), "every one was relevant" (ℛ) and "every one was clicked"
    (𝒞 = 𝒪 and ℛ).
    """

    px: np.ndarray
    p_r1: np.ndarray
    p_hist_obs: np.ndarray
    p_hist_rel: np.ndarray
    n_history: int = 1

    def __post_init__(self):
        self.px = _check_probs("px", self.px)
        self.p_r1 = _check_probs("p_r1", self.p_r1)
        self.p_hist_obs = np.asarray(self.p_hist_obs, dtype=np.float64)
        self.p_hist_rel = np.asarray(self.p_hist_rel, dtype=np.float64)
        n = len(self.px)
        for name, v in (("p_hist_obs", self.p_hist_obs), ("p_hist_rel", self.p_hist_rel)):
            if v.shape != (n, 2) or not np.all((v >= 0) & (v <= 1)):
                raise OracleError(f"{name} must be an (n_x, 2) array of probabilities indexed by R")
        if abs(self.px.sum() - 1.0) > 1e-12:
            raise OracleError("P(X) must sum to 1")
        if self.n_history < 1:
            raise OracleError("n_history must be >= 1")

    def __len__(self):
        return len(self.px)

    def outcomes(self, x: int):
        """Yield (probability, R, all_observed, all_relevant) over the full joint for context x."""
        k = self.n_history
        for R in (0, 1):
            pR = self.p_r1[x] if R else 1.0 - self.p_r1[x]
            b, c = self.p_hist_obs[x, R], self.p_hist_rel[x, R]
            for obs in itertools.product((0, 1), repeat=k):
                po = math.prod(b if o else 1.0 - b for o in obs)
                for rel in itertools.product((0, 1), repeat=k):
                    pr = math.prod(c if r else 1.0 - c for r in rel)
                    yield pR * po * pr, R, all(obs), all(rel)


def _history_probs(world: HistoryWorld, x: int) -> dict:
    acc = {k: 0.0 for k in ("O", "Rh", "C", "R", "R_O", "R_Rh", "R_C")}
    for p, R, O, Rh in world.outcomes(x):
        acc["O"] += p * O
        acc["Rh"] += p * Rh
        acc["C"] += p * (O and Rh)
        acc["R"] += p * R
        acc["R_O"] += p * (R and O)
        acc["R_Rh"] += p * (R and Rh)
        acc["R_C"] += p * (R and O and Rh)
    return acc


def history_factorization_residual(world: HistoryWorld, x: int) -> float:
    """|P(𝒞|x) - P(𝒪|x) P(ℛ|x)|, zero when earlier clicks factor into observation and relevance."""
    a = _history_probs(world, x)
    return abs(a["C"] - a["O"] * a["Rh"])


def verify_popularity_identity(worlds) -> dict:
    """Both sides of P(R=1|𝒞,x) = P(R=1|𝒪,x) / P(R=1|x) * P(R=1|ℛ,x), by enumeration.

    Accepts one HistoryWorld or a list. Every world must satisfy the
    history factorization P(𝒞|x) = P(𝒪|x) P(ℛ|x); a violation raises
    OracleError since the identity is derived from it.
    """
    if isinstance(worlds, HistoryWorld):
        worlds = [worlds]
    rows = []
    for wi, w in enumerate(worlds):
        for x in range(len(w)):
            resid = history_factorization_residual(w, x)
            if resid > RESIDUAL_TOL:
                raise OracleError(
                    f"world {wi}, x={x}: P(C-history) != P(O-history) P(R-history) (residual {resid:.3e})")
            a = _history_probs(w, x)
            if min(a["C"], a["O"], a["Rh"], a["R"]) <= 0.0:
                raise OracleError(f"world {wi}, x={x}: a conditioning event has zero probability")
            lhs = a["R_C"] / a["C"]
            rhs = (a["R_O"] / a["O"]) / a["R"] * (a["R_Rh"] / a["Rh"])
            rows.append({"world": wi, "x": x, "lhs": lhs, "rhs": rhs, "residual": abs(lhs - rhs),
                         "p_r_given_hist_rel": a["R_Rh"] / a["Rh"]})
    return {"residual": max(r["residual"] for r in rows) if rows else 0.0, "rows": rows}


# ---------------------------------------------------------------------------
# random worlds


def _grid(rng, size, grid):
    return rng.integers(1, grid, size=size) / grid


def random_world(rng, n_x: int = 4, grid: int = 1000, tie_prob: float = 0.3, n_features: int = 3,
                 independent: bool = False) -> DiscreteWorld:
    """World with probabilities on the lattice {1/grid, ..., 1 - 1/grid}.

    A fraction ``tie_prob`` of context points (all of them if
    ``independent``) get P(R|O=1,x) = P(R|O=0,x) exactly; on the lattice
    every other gap is at least 1/grid.
    """
    px = rng.random(n_x) + 0.1
    px = px / px.sum()
    px[-1] = 1.0 - px[:-1].sum()
    q = _grid(rng, n_x, grid)
    r1 = _grid(rng, n_x, grid)
    r0 = _grid(rng, n_x, grid)
    tie = np.ones(n_x, bool) if independent else rng.random(n_x) < tie_prob
    r0 = np.where(tie, r1, r0)
    return DiscreteWorld(px, q, r1, r0, rng.normal(size=(n_x, n_features)))


def random_linear_scorer(rng, n_features: int = 3):
    w = rng.normal(size=n_features)
    b = float(rng.normal())
    return lambda X: np.asarray(X, np.float64) @ w + b


def random_history_world(rng, n_x: int = 3, n_history: int = 1) -> HistoryWorld:
    """History world satisfying the click factorization.

    Given x, either the history-observation or the history-relevance
    probability is made independent of R (chosen at random per x); the
    factorization holds exactly only then.
    """
    px = rng.random(n_x) + 0.1
    px = px / px.sum()
    px[-1] = 1.0 - px[:-1].sum()
    a = rng.uniform(0.05, 0.95, n_x)
    b = rng.uniform(0.05, 0.95, (n_x, 2))
    c = rng.uniform(0.05, 0.95, (n_x, 2))
    flat_obs = rng.random(n_x) < 0.5
    b[flat_obs, 1] = b[flat_obs, 0]
    c[~flat_obs, 1] = c[~flat_obs, 0]
    return HistoryWorld(px, a, b, c, n_history)
