import math

import numpy as np
import pytest

from inforank.data import SynthConfig
from inforank.experiment import (EXPERIMENT_L2_WEIGHT, ExperimentSettings, Runner, aggregate, degree_params,
                                 settings_with, write_table)


@pytest.fixture(scope="module")
def runner():
    s = ExperimentSettings(synth=SynthConfig(n_queries=30, docs_per_query=8, n_items=50), train_sessions=1,
                           val_sessions=1, label_fraction=0.05,
                           train={"l2_weight": EXPERIMENT_L2_WEIGHT, "max_epochs": 2, "dim": 4,
                                  "learning_rate": 0.01})
    return Runner(s)


def test_degree_params():
    assert degree_params("PBM", 1.5) == {"tau": 1.5}
    assert degree_params("ccm", 0.2) == {"gamma1": 0.2}
    with pytest.raises(ValueError):
        degree_params("ubm", 1.0)


def test_default_settings():
    s = ExperimentSettings()
    assert s.synth.n_queries >= 200 and s.synth.docs_per_query == 20
    assert s.click_family == "pbm" and s.train["l2_weight"] == EXPERIMENT_L2_WEIGHT
    assert settings_with(s, train_sessions=2).train_sessions == 2
    assert s.digest() == ExperimentSettings().digest() != settings_with(s, epsilon=0.2).digest()


def test_fit_is_cached_and_default_click_params_share_entries(runner):
    a = runner.fit("click", 0)
    assert runner.fit("click", 0, click_params={"tau": 1.0}) is a
    assert runner.fit("click", 0, click_params={"tau": 0.0}) is not a
    assert runner.fit("labeled", 0, click_params={"tau": 0.0}) is runner.fit("labeled", 0)
    assert runner.fit("inforank", 0, eta=0.5) is runner.fit("inforank", 0)
    assert runner.fit("inforank_minus", 0).eta == 0.0
    with pytest.raises(ValueError, match="unknown trainer"):
        runner.fit("svm", 0)


def test_evaluate_row(runner):
    row = runner.evaluate("inforank", 0)
    assert {"trainer", "seed", "eta", "map_at_10", "delta_ci", "val_delta_ci", "epochs", "ndcg@10"} <= set(row)
    assert 0 <= row["ndcg@10"] <= 1 and row["delta_ci"] >= 0 and row["eta"] == 0.5
    assert math.isnan(runner.evaluate("click", 0)["delta_ci"])


def test_sweeps_have_grid_cardinality(runner):
    rows = runner.bias_sweep([0.0, 1.0], ["click"], [0])
    assert [r["degree"] for r in rows] == [0.0, 1.0]
    assert len(runner.eta_sweep([0.0, 0.5], [0])) == 2
    fr = runner.fraction_sweep([0.5, 1.0], ["click"], [0])
    assert [r["fraction"] for r in fr] == [0.5, 1.0]
    assert len(runner.cell(0, None, 0.5).train) < len(runner.cell(0).train)
    with pytest.raises(ValueError):
        runner.bias_sweep([], ["click"], [0])
    with pytest.raises(ValueError):
        runner.fraction_sweep([0.0], ["click"], [0])


def test_curves(runner):
    shift, ref, pop, top = runner.curves("inforank", 0)
    assert len(shift.x) == len(ref.x) and np.all(shift.y >= 1)
    assert len(pop.x) == len(top.x)


def test_aggregate_mean_and_stderr():
    rows = [{"t": "a", "m": 1.0}, {"t": "a", "m": 3.0}, {"t": "b", "m": 2.0}]
    out = aggregate(rows, ["t"], ["m"])
    assert out[0] == {"t": "a", "n_seeds": 2, "m": 2.0, "m_stderr": 1.0}
    assert out[1]["m_stderr"] == 0.0


def test_write_table(tmp_path):
    write_table(tmp_path / "t.csv", [{"a": 0.1, "b": 1}, {"a": 0.2, "c": "x"}])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["a,b,c", "0.1,1,", "0.2,,x"]
    with pytest.raises(ValueError):
        write_table(tmp_path / "e.csv", [])


def test_cost_accounting_covers_cached_work(runner):
    runner.evaluate("click", 1)
    cost = runner.cost_of("click", 1)
    assert len(cost) == 3 and all(v > 0 for v in cost.values())
    assert runner.cost_of("click", 1, click_params={"tau": 1.0}) == cost
