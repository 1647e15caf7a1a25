"""scikit-learn style rankers wrapping the functional training API.

All rankers take combined feature rows x = [user || item || position] and
follow the usual ``fit`` / ``predict`` / ``get_params`` protocol, so they
can be cloned, grid-searched and pickled like any sklearn estimator.
``predict`` returns ranking scores; single-tower rankers ignore the
position column.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, clone
from sklearn.utils.validation import check_is_fitted

from . import model as M
from .clicks import DEFAULT_MAX_RANK, ClickLog, rank_by_scores, group_features, relevance_log
from .infotheory import delta_ci_dataset
from .metrics import evaluate_ranking, score_groups
from .training import TrainConfig, fit_model, new_model
from .validation import check_click_data, check_features


class _NeuralRanker(BaseEstimator):
    _kind = "click"
    _two_tower = False

    def __init__(self, learning_rate=0.001, batch_size=128, l2_weight=0.01, max_epochs=100, patience=5,
                 dim=8, n_heads=2, hidden=(), temperature=1.0, inference_position=1,
                 max_rank=DEFAULT_MAX_RANK, random_state=0):
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.l2_weight = l2_weight
        self.max_epochs = max_epochs
        self.patience = patience
        self.dim = dim
        self.n_heads = n_heads
        self.hidden = hidden
        self.temperature = temperature
        self.inference_position = inference_position
        self.max_rank = max_rank
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, eta=getattr(self, "eta", 0.0),
            l2_weight=self.l2_weight, max_epochs=self.max_epochs, patience=self.patience,
            seed=int(self.random_state), observation_supervision=getattr(self, "observation_supervision", False),
            dim=self.dim, n_heads=self.n_heads, hidden=tuple(self.hidden), temperature=self.temperature,
            inference_position=self.inference_position, max_rank=self.max_rank,
            propensity_clip=getattr(self, "propensity_clip", 0.05),
        )

    def fit(self, X, y=None, *, observed=None, propensity=None, schema=None, eval_log=None, eval_dataset=None,
            warm_state=None):
        """Fit on a ClickLog, or on arrays ``X`` (rows of x), clicks ``y`` and a slot ``schema``."""
        log = check_click_data(X, y, observed, propensity, schema)
        config = self._train_config()
        params = new_model(log.schema, config, self._two_tower)
        state = fit_model(params, log, config, self._kind, eval_log, eval_dataset, state=warm_state)
        self.params_ = state.best_params
        self.history_ = state.history
        self.state_ = state
        self.schema_ = log.schema
        self.n_features_in_ = len(log.schema)
        return self

    def predict(self, X):
        """Ranking scores for rows of x."""
        check_is_fitted(self, "params_")
        X = check_features(X, self.n_features_in_)
        return M.score(self.params_, X)

    def rank(self, group):
        """Order a query group by descending score (ties by doc_id)."""
        check_is_fitted(self, "params_")
        if len(group) == 0:
            return []
        X = group_features(group, self.inference_position, self.max_rank)
        return rank_by_scores(group, self.predict(X))

    def score_dataset(self, dataset):
        check_is_fitted(self, "params_")
        return score_groups(self.predict, dataset, self.inference_position, self.max_rank)

    def evaluate(self, dataset, eval_log: ClickLog | None = None, cutoffs=(3, 5, 10), metadata=None):
        """NDCG@cutoffs and MAP@10 on ``dataset``; ΔCI on ``eval_log`` for two-tower models."""
        dci = float("nan")
        if self._two_tower and eval_log is not None and len(eval_log):
            dci = self.delta_ci(eval_log.features)
        return evaluate_ranking(self.score_dataset(dataset), dataset, cutoffs, dci, metadata)


class InfoRankRanker(_NeuralRanker):
    """Two-tower estimator trained with the click loss plus ``eta`` times the CMI penalty.

    ``eta=0`` gives the unregularized ablation. Scores are the marginal
    relevance P(R=1|x) evaluated with the position slot at
    ``inference_position``.
    """

    _kind = "inforank"
    _two_tower = True

    def __init__(self, eta=0.5, observation_supervision=False, learning_rate=0.001, batch_size=128,
                 l2_weight=0.01, max_epochs=100, patience=5, dim=8, n_heads=2, hidden=(), temperature=1.0,
                 inference_position=1, max_rank=DEFAULT_MAX_RANK, random_state=0):
        super().__init__(learning_rate, batch_size, l2_weight, max_epochs, patience, dim, n_heads, hidden,
                         temperature, inference_position, max_rank, random_state)
        self.eta = eta
        self.observation_supervision = observation_supervision

    def predict_observation(self, X):
        check_is_fitted(self, "params_")
        return M.predict_observation(self.params_, check_features(X, self.n_features_in_))

    def predict_relevance(self, X, o):
        check_is_fitted(self, "params_")
        return M.predict_relevance(self.params_, check_features(X, self.n_features_in_), o)

    def predict_click(self, X, o=None):
        check_is_fitted(self, "params_")
        return M.predict_click(self.params_, check_features(X, self.n_features_in_), o)

    def delta_ci(self, X) -> float:
        check_is_fitted(self, "params_")
        return delta_ci_dataset(self.params_, check_features(X, self.n_features_in_))


class ClickRanker(_NeuralRanker):
    """Lower bound: one sigmoid head fit to raw clicks on user-item features."""

    _kind = "click"


class IPWRanker(_NeuralRanker):
    """One sigmoid head fit to clicks divided by the logged (true) examination propensity."""

    _kind = "ipw"

    def __init__(self, propensity_clip=0.05, learning_rate=0.001, batch_size=128, l2_weight=0.01,
                 max_epochs=100, patience=5, dim=8, n_heads=2, hidden=(), temperature=1.0,
                 inference_position=1, max_rank=DEFAULT_MAX_RANK, random_state=0):
        super().__init__(learning_rate, batch_size, l2_weight, max_epochs, patience, dim, n_heads, hidden,
                         temperature, inference_position, max_rank, random_state)
        self.propensity_clip = propensity_clip


class LabeledRanker(_NeuralRanker):
    """Upper bound: one sigmoid head fit to binary relevance sampled from the graded labels."""

    _kind = "click"

    def __init__(self, sessions=1, epsilon=0.1, learning_rate=0.001, batch_size=128, l2_weight=0.01,
                 max_epochs=100, patience=5, dim=8, n_heads=2, hidden=(), temperature=1.0,
                 inference_position=1, max_rank=DEFAULT_MAX_RANK, random_state=0):
        super().__init__(learning_rate, batch_size, l2_weight, max_epochs, patience, dim, n_heads, hidden,
                         temperature, inference_position, max_rank, random_state)
        self.sessions = sessions
        self.epsilon = epsilon

    def fit(self, dataset, y=None, *, eval_dataset=None, warm_state=None, **kwargs):
        """Fit on a Dataset with graded labels."""
        seed = int(self.random_state)
        log = relevance_log(dataset, seed, self.sessions, self.epsilon, self.max_rank)
        eval_log = None
        if eval_dataset is not None and len(eval_dataset):
            eval_log = relevance_log(eval_dataset, seed + 1, self.sessions, self.epsilon, self.max_rank)
        return super().fit(log, eval_log=eval_log, eval_dataset=eval_dataset, warm_state=warm_state)


TRAINERS = {
    "inforank": lambda **kw: InfoRankRanker(**kw),
    "inforank_minus": lambda **kw: InfoRankRanker(**{**kw, "eta": 0.0}),
    "click": lambda **kw: ClickRanker(**kw),
    "ipw": lambda **kw: IPWRanker(**kw),
    "labeled": lambda **kw: LabeledRanker(**kw),
}


def make_ranker(name: str, **params):
    """Instantiate a ranker by trainer name, dropping parameters it does not accept."""
    if name not in TRAINERS:
        raise ValueError(f"unknown trainer {name!r}; expected one of {sorted(TRAINERS)}")
    probe = TRAINERS[name]()
    accepted = probe.get_params()
    return TRAINERS[name](**{k: v for k, v in params.items() if k in accepted})


__all__ = ["InfoRankRanker", "ClickRanker", "IPWRanker", "LabeledRanker", "TRAINERS", "make_ranker", "clone"]
