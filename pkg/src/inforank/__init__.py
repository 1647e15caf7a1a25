"""Unbiased learning to rank from clicks by making relevance and observation conditionally independent."""

__version__ = "0.1.0"

from .data import Dataset, Document, QueryGroup, SlotSpec, SynthConfig, binarize_relevance, generate_synthetic
from .clicks import CCMParams, ClickLog, PBMParams, UBMParams, make_click_model, simulate_log
from .infotheory import cmi_batch, cmi_pointwise, delta_ci_pointwise
from .estimators import ClickRanker, InfoRankRanker, IPWRanker, LabeledRanker, make_ranker
from .metrics import map_at_10, ndcg_at_k

__all__ = [
    "Dataset", "Document", "QueryGroup", "SlotSpec", "SynthConfig", "binarize_relevance", "generate_synthetic",
    "CCMParams", "ClickLog", "PBMParams", "UBMParams", "make_click_model", "simulate_log",
    "cmi_batch", "cmi_pointwise", "delta_ci_pointwise",
    "ClickRanker", "InfoRankRanker", "IPWRanker", "LabeledRanker", "make_ranker",
    "map_at_10", "ndcg_at_k",
]
