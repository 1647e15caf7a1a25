import json
import os

import pytest

from inforank.cli import main
from inforank.config import DEFAULT_CONFIG_TEXT, ConfigError, load_config, parse_config
from inforank.experiment import EXPERIMENT_L2_WEIGHT

TINY = """\
[dataset]
n_queries = 30
docs_per_query = 8
n_items = 50

[clicks]
family = pbm
train_sessions = 1
val_sessions = 1
test_sessions = 1
label_fraction = 0.05

[training]
trainers = inforank, inforank_minus, click
max_epochs = 2
dim = 4
learning_rate = 0.01

[eval]
eta_grid = 0, 0.5
degree_grid = 0, 1
fraction_grid = 0.5, 1.0
sweep_trainers = click

[run]
seeds = 0, 1
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return str(p)


def test_default_config_parses():
    cfg = parse_config(DEFAULT_CONFIG_TEXT)
    assert cfg.settings.synth.n_queries == 200 and cfg.settings.synth.docs_per_query == 20
    assert cfg.settings.train["l2_weight"] == EXPERIMENT_L2_WEIGHT
    assert cfg.eta_grid == (0.0, 0.2, 0.5, 1.0)
    assert cfg.seeds == (0, 1, 2, 3, 4)


@pytest.mark.parametrize("text,match", [
    ("[bogus]\nx = 1\n", "unknown section"),
    ("[training]\nlearnin_rate = 0.1\n", "unknown key"),
    ("[training]\ntrainers = lambdamart\n", "unknown trainer"),
    ("[training]\neta = -1\n", "eta"),
    ("[training]\nbatch_size = many\n", "bad config value"),
    ("[run]\nseeds =\n", "seeds"),
    ("[dataset]\npath = nowhere.txt\nschema = user:real\n", "does not exist"),
    ("not an ini", "malformed"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_dataset_path_needs_schema(tmp_path):
    (tmp_path / "d.txt").write_text("")
    with pytest.raises(ConfigError, match="schema"):
        parse_config("[dataset]\npath = d.txt\n", str(tmp_path))


def test_digest_ignores_output_dir():
    a = parse_config(TINY)
    b = parse_config(TINY + "output_dir = elsewhere\n")
    c = parse_config(TINY.replace("max_epochs = 2", "max_epochs = 3"))
    assert a.digest() == b.digest() != c.digest()


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.ini")


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.ini"
    cfg.write_text(TINY)
    assert _run("generate", "--config", cfg, "--out", root / "gen") == 0
    assert _run("simulate", "--config", cfg, "--dataset", root / "gen", "--out", root / "sim") == 0
    assert _run("train", "--config", cfg, "--logs", root / "sim", "--out", root / "ck") == 0
    assert _run("evaluate", "--config", cfg, "--logs", root / "sim", "--checkpoints", root / "ck",
                "--out", root / "ev") == 0
    return root, cfg


def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    assert os.path.exists(root / "gen" / "seed_0" / "dataset.npz")
    for f in ("train.jsonl", "val.npz", "test.jsonl", "initial_ranker.npz"):
        assert os.path.exists(root / "sim" / "seed_0" / f)
    for f in ("inforank.npz", "inforank.history.csv", "click.state.npz"):
        assert os.path.exists(root / "ck" / "seed_0" / f)
    man = json.loads((root / "ev" / "manifest.json").read_text())
    assert man["command"] == "evaluate" and man["seeds"] == [0, 1] and len(man["config_hash"]) == 64
    summary = (root / "ev" / "summary.csv").read_text().splitlines()
    assert summary[0].startswith("trainer,n_seeds,ndcg@3")
    rep = json.loads((root / "ev" / "seed_0" / "inforank.metrics.json").read_text())
    assert rep["delta_ci"] >= 0 and "timestamp" not in json.dumps(man)


def test_evaluate_rerun_is_byte_identical(pipeline):
    root, cfg = pipeline
    assert _run("evaluate", "--config", cfg, "--logs", root / "sim", "--checkpoints", root / "ck",
                "--out", root / "ev2") == 0
    for f in ("per_seed.csv", "summary.csv", "seed_0/curves.csv", "manifest.json"):
        assert (root / "ev" / f).read_bytes() == (root / "ev2" / f).read_bytes(), f


def test_train_rerun_is_byte_identical(pipeline):
    root, cfg = pipeline
    assert _run("train", "--config", cfg, "--logs", root / "sim", "--out", root / "ck2") == 0
    for t in ("inforank", "click"):
        assert (root / "ck" / "seed_0" / f"{t}.history.csv").read_bytes() == \
            (root / "ck2" / "seed_0" / f"{t}.history.csv").read_bytes()


def test_resume_extends_history(pipeline):
    root, cfg = pipeline
    longer = root / "longer.ini"
    longer.write_text(TINY.replace("max_epochs = 2", "max_epochs = 3"))
    assert _run("train", "--config", longer, "--logs", root / "sim", "--out", root / "full3") == 0
    assert _run("train", "--config", cfg, "--logs", root / "sim", "--out", root / "res") == 0
    assert _run("train", "--config", longer, "--logs", root / "sim", "--out", root / "res", "--resume") == 0
    a = (root / "full3" / "seed_0" / "inforank.history.csv").read_text()
    b = (root / "res" / "seed_0" / "inforank.history.csv").read_text()
    assert a == b and len(a.splitlines()) == 4


def test_eta_override_and_unknown_trainer(pipeline, capsys):
    root, cfg = pipeline
    assert _run("train", "--config", cfg, "--logs", root / "sim", "--out", root / "bad",
                "--trainer", "lambdamart") == 2
    assert "unknown trainer" in capsys.readouterr().err
    assert _run("train", "--config", cfg, "--logs", root / "sim", "--out", root / "e0", "--trainer", "inforank",
                "--eta", "0") == 0
    man = json.loads((root / "e0" / "manifest.json").read_text())
    assert man["eta_override"] == 0.0 and man["trainers"] == ["inforank"]
    assert _run("train", "--config", cfg, "--logs", root / "sim", "--out", root / "e1", "--eta", "-1") == 2


def test_nonempty_out_requires_force(pipeline):
    root, cfg = pipeline
    assert _run("generate", "--config", cfg, "--out", root / "gen") == 2
    assert _run("generate", "--config", cfg, "--out", root / "gen", "--force") == 0


def test_missing_inputs_exit_2(tmp_path, cfg_path):
    assert _run("simulate", "--config", cfg_path, "--out", tmp_path / "s") == 2
    assert _run("simulate", "--config", cfg_path, "--dataset", tmp_path / "none", "--out", tmp_path / "s2") == 2
    assert _run("evaluate", "--config", cfg_path, "--logs", tmp_path, "--checkpoints", tmp_path / "x",
                "--out", tmp_path / "ev") == 2


def test_bad_config_exit_2(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[training]\neta = -2\n")
    assert _run("generate", "--config", p, "--out", tmp_path / "g") == 2


def test_sweep_tables_are_reproducible(tmp_path, cfg_path):
    for out in ("a", "b"):
        assert _run("sweep", "--config", cfg_path, "--out", tmp_path / out, "--sweep", "eta",
                    "--sweep", "fraction", "--seed", "0") == 0
    for f in ("eta_sweep.csv", "eta_sweep_summary.csv", "fraction_sweep.csv", "fraction_sweep_summary.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    header = (tmp_path / "a" / "eta_sweep_summary.csv").read_text().splitlines()[0]
    assert header.startswith("eta,n_seeds,ndcg@10")


def test_oracle_check_command(tmp_path):
    assert _run("oracle-check", "--out", tmp_path / "o", "--n-worlds", "50") == 0
    rep = json.loads((tmp_path / "o" / "oracle_report.json").read_text())
    assert all(c["pass"] for c in rep["checks"].values())


def test_summary_is_hand_average_of_per_seed_files(pipeline):
    import csv

    root, _ = pipeline
    with open(root / "ev" / "summary.csv") as fh:
        summary = {r["trainer"]: r for r in csv.DictReader(fh)}
    for t in ("inforank", "inforank_minus", "click"):
        vals = [json.loads((root / "ev" / f"seed_{s}" / f"{t}.metrics.json").read_text())["ndcg"]["10"]
                for s in (0, 1)]
        assert float(summary[t]["ndcg@10"]) == pytest.approx(sum(vals) / 2, abs=1e-15)
        assert summary[t]["n_seeds"] == "2"
    for t in ("inforank", "inforank_minus"):
        assert float(summary[t]["delta_ci"]) >= 0


def test_config_change_changes_manifest_hash(tmp_path, cfg_path):
    other = tmp_path / "other.ini"
    other.write_text(TINY.replace("n_items = 50", "n_items = 51"))
    assert _run("generate", "--config", cfg_path, "--out", tmp_path / "a", "--seed", "0") == 0
    assert _run("generate", "--config", other, "--out", tmp_path / "b", "--seed", "0") == 0
    ha = json.loads((tmp_path / "a" / "manifest.json").read_text())["config_hash"]
    hb = json.loads((tmp_path / "b" / "manifest.json").read_text())["config_hash"]
    assert ha != hb
    assert _run("generate", "--config", cfg_path, "--out", tmp_path / "c", "--seed", "0") == 0
    assert (tmp_path / "a" / "seed_0" / "dataset.npz").read_bytes() == (tmp_path / "c" / "seed_0" / "dataset.npz").read_bytes()


@pytest.mark.parametrize("family", ["ubm", "ccm"])
def test_simulate_other_click_models(pipeline, tmp_path, family):
    root, _ = pipeline
    cfg = tmp_path / f"{family}.ini"
    cfg.write_text(TINY.replace("family = pbm", f"family = {family}"))
    assert _run("simulate", "--config", cfg, "--dataset", root / "gen", "--out", tmp_path / "s", "--seed", "0") == 0
    lines = (tmp_path / "s" / "seed_0" / "train.jsonl").read_text().splitlines()
    recs = [json.loads(l) for l in lines[1:]]
    assert recs and all(r["observed"] >= r["clicked"] for r in recs)


def test_checkpoint_schema_mismatch_exit_2(pipeline, tmp_path):
    root, cfg = pipeline
    wide = tmp_path / "wide.ini"
    wide.write_text(TINY.replace("n_items = 50", "n_items = 50\nn_item_real = 3"))
    assert _run("generate", "--config", wide, "--out", tmp_path / "g", "--seed", "0") == 0
    assert _run("simulate", "--config", wide, "--dataset", tmp_path / "g", "--out", tmp_path / "s", "--seed", "0") == 0
    assert _run("evaluate", "--config", cfg, "--logs", tmp_path / "s", "--checkpoints", root / "ck",
                "--out", tmp_path / "ev", "--seed", "0") == 2


def test_sweep_grid_cardinality(tmp_path, cfg_path):
    import csv

    assert _run("sweep", "--config", cfg_path, "--out", tmp_path / "sw", "--sweep", "bias", "--seed", "0") == 0
    with open(tmp_path / "sw" / "bias_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 1  # degrees x sweep trainers for one seed
    assert sorted({float(r["degree"]) for r in rows}) == [0.0, 1.0]
