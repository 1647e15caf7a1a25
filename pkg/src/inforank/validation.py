"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .clicks import ClickLog, SimulationError
from .data import check_codes


def check_features(X, n_features: int) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, but the ranker was fitted with {n_features}")
    return X


def check_click_data(X, y=None, observed=None, propensity=None, schema=None) -> ClickLog:
    """Normalize estimator inputs into a validated ClickLog."""
    if isinstance(X, ClickLog):
        if y is not None:
            raise ValueError("pass either a ClickLog or (X, y), not both")
        log = X
    else:
        if y is None or schema is None:
            raise ValueError("array input needs clicks y and a slot schema")
        X = check_array(X, dtype=np.float64)
        y = np.asarray(y)
        if y.shape != (X.shape[0],):
            raise ValueError("y must be a vector with one click per row of X")
        if np.any((y != 0) & (y != 1)):
            raise ValueError("clicks must be 0 or 1")
        n = len(y)
        observed = np.ones(n) if observed is None else np.asarray(observed)
        propensity = np.ones(n) if propensity is None else np.asarray(propensity, dtype=np.float64)
        check_codes(X, schema, "X")
        z = np.zeros(n, dtype=np.int64)
        try:
            log = ClickLog(z, z, z, observed.astype(np.int8), y.astype(np.int8), propensity, X, tuple(schema))
        except SimulationError as exc:
            raise ValueError(str(exc)) from None
    if len(log) == 0:
        raise ValueError("cannot fit on an empty click log")
    return log
