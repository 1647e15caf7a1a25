"""Batch run of the enumeration oracles over random worlds, as a JSON-ready report."""

from __future__ import annotations

import numpy as np

from .infotheory import cmi_pointwise
from .oracle import (RESIDUAL_TOL, DiscreteWorld, brute_force_cmi_many, check_prop1, random_history_world,
                     random_linear_scorer, random_world, verify_click_factorization, verify_popularity_identity,
                     verify_prop2)


def run_oracle_checks(seed: int = 0, n_worlds: int = 1000, prop1_tol: float = 1e-9) -> dict:
    rng = np.random.default_rng([seed, 0x0AC1])
    checks = {}

    rows = [r for _ in range(n_worlds) for r in check_prop1(random_world(rng), prop1_tol)]
    agree = sum(r["agree"] for r in rows)
    checks["independence_cmi_gap_equivalence"] = {
        "pass": bool(agree == len(rows)), "agreement_rate": agree / len(rows), "n_points": len(rows), "tol": prop1_tol,
    }

    n_small = max(1, n_worlds // 10)
    res2 = [verify_prop2(random_world(rng, independent=True), random_linear_scorer(rng))["residual"]
            for _ in range(n_small)]
    checks["ipw_click_risk_unbiased"] = {"pass": bool(max(res2) <= RESIDUAL_TOL), "max_residual": max(res2),
                                         "n_worlds": n_small}

    res7 = [verify_popularity_identity(random_history_world(rng, n_history=1 + i % 3))["residual"]
            for i in range(n_small)]
    checks["history_click_identity"] = {"pass": bool(max(res7) <= RESIDUAL_TOL), "max_residual": max(res7),
                                        "n_worlds": n_small}

    fact = [verify_click_factorization(random_world(rng)) for _ in range(n_small)]
    checks["click_factorization"] = {"pass": bool(all(f["consistent"] for f in fact)), "n_worlds": n_small}

    trip = rng.integers(1, 1000, size=(3, 10 * n_worlds)) / 1000.0
    diff = np.abs(brute_force_cmi_many(*trip) - cmi_pointwise(tuple(trip)))
    checks["cmi_cross_check"] = {"pass": bool(diff.max() <= RESIDUAL_TOL), "max_abs_diff": float(diff.max()),
                                 "n_points": int(trip.shape[1])}
    return {"seed": seed, "checks": checks}


__all__ = ["run_oracle_checks", "DiscreteWorld"]
