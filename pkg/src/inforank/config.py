"""INI experiment configuration.

Sections: ``[dataset]`` (synthetic generator fields, or ``path`` to a sparse
text file plus its ``schema``), ``[clicks]``, ``[training]``, ``[eval]`` and
``[run]``. Unknown keys are errors so typos do not silently fall back to
defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field, fields

from .data import SlotSpec, SynthConfig
from .experiment import EXPERIMENT_L2_WEIGHT, TRAINER_NAMES, ExperimentSettings
from .training import TrainConfig


class ConfigError(ValueError):
    pass


CLICK_KEYS = {"family", "tau", "gamma1", "gamma2", "gamma3", "train_sessions", "val_sessions", "test_sessions",
              "label_fraction", "epsilon", "max_rank"}
TRAIN_KEYS = {"trainers", "learning_rate", "batch_size", "eta", "l2_weight", "max_epochs", "patience", "min_delta",
              "observation_supervision", "dim", "n_heads", "hidden", "temperature", "inference_position",
              "propensity_clip"}
EVAL_KEYS = {"cutoffs", "eta_grid", "degree_grid", "fraction_grid", "sweep_trainers"}
RUN_KEYS = {"seeds", "output_dir"}


@dataclass
class ExperimentConfig:
    settings: ExperimentSettings = field(default_factory=ExperimentSettings)
    trainers: tuple = ("inforank", "inforank_minus", "click", "labeled")
    seeds: tuple = (0, 1, 2, 3, 4)
    eta_grid: tuple = (0.0, 0.2, 0.5, 1.0)
    degree_grid: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    fraction_grid: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    sweep_trainers: tuple = ("inforank", "click")
    output_dir: str = "runs"
    dataset_path: str | None = None
    dataset_schema: tuple | None = None
    dataset_y_max: int | None = None

    def validate(self) -> "ExperimentConfig":
        if not self.trainers:
            raise ConfigError("at least one trainer is required")
        for t in tuple(self.trainers) + tuple(self.sweep_trainers):
            if t not in TRAINER_NAMES:
                raise ConfigError(f"unknown trainer {t!r}; expected one of {list(TRAINER_NAMES)}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.dataset_path is not None:
            if not os.path.exists(self.dataset_path):
                raise ConfigError(f"dataset file {self.dataset_path!r} does not exist")
            if not self.dataset_schema:
                raise ConfigError("a dataset path needs a schema (e.g. 'schema = user:cat:5, item:real')")
        try:
            self.settings.synth.validate()
            TrainConfig(**{k: v for k, v in self.settings.train.items() if k in _train_fields()})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def to_dict(self) -> dict:
        return {
            "settings": self.settings.to_dict(), "trainers": list(self.trainers), "seeds": list(self.seeds),
            "eta_grid": list(self.eta_grid), "degree_grid": list(self.degree_grid),
            "fraction_grid": list(self.fraction_grid), "sweep_trainers": list(self.sweep_trainers),
            "output_dir": self.output_dir, "dataset_path": self.dataset_path,
            "dataset_schema": None if self.dataset_schema is None else [s.to_dict() for s in self.dataset_schema],
            "dataset_y_max": self.dataset_y_max,
        }

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory is excluded)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def _train_fields():
    return {f.name for f in fields(TrainConfig)}


def _floats(text):
    return tuple(float(v) for v in _items(text))


def _ints(text):
    return tuple(int(v) for v in _items(text))


def _items(text):
    return [v.strip() for v in text.replace("\n", ",").split(",") if v.strip()]


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_schema(text):
    """'user:cat:5, user:real, item:cat:8' -> tuple of SlotSpec (names numbered per side)."""
    out = []
    counts: dict = {}
    for item in _items(text):
        parts = item.split(":")
        side, kind = parts[0], parts[1]
        n = counts.get((side, kind), 0)
        counts[(side, kind)] = n + 1
        if kind == "cat":
            out.append(SlotSpec("categorical", int(parts[2]), f"{side}_cat{n}"))
        elif kind == "real":
            out.append(SlotSpec("real", 0, f"{side}_real{n}"))
        else:
            raise ValueError(f"slot kind must be cat or real, got {kind!r}")
    return tuple(out)


def _check_keys(section, allowed, name):
    extra = set(section) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(extra))}")


def parse_config(text: str, base_dir: str = ".") -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    unknown = set(cp.sections()) - {"dataset", "clicks", "training", "eval", "run"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    cfg = ExperimentConfig()
    s = cfg.settings
    try:
        if cp.has_section("dataset"):
            sec = dict(cp["dataset"])
            synth_fields = {f.name: f.type for f in fields(SynthConfig)}
            _check_keys(sec, set(synth_fields) | {"path", "schema", "y_max"}, "dataset")
            synth = {}
            for k, v in sec.items():
                if k == "path":
                    cfg.dataset_path = os.path.join(base_dir, v)
                elif k == "schema":
                    cfg.dataset_schema = _parse_schema(v)
                elif k in ("y_max",):
                    cfg.dataset_y_max = int(v)
                    synth[k] = int(v)
                else:
                    synth[k] = float(v) if synth_fields[k] in ("float", float) else int(v)
            s.synth = SynthConfig(**synth)
        if cp.has_section("clicks"):
            sec = dict(cp["clicks"])
            _check_keys(sec, CLICK_KEYS, "clicks")
            params = {}
            for k, v in sec.items():
                if k == "family":
                    s.click_family = v.strip().lower()
                elif k in ("tau", "gamma1", "gamma2", "gamma3"):
                    params[k] = float(v)
                elif k in ("label_fraction", "epsilon"):
                    setattr(s, k, float(v))
                else:
                    setattr(s, k, int(v))
            s.click_params = params
        if cp.has_section("training"):
            sec = dict(cp["training"])
            _check_keys(sec, TRAIN_KEYS, "training")
            train = {"l2_weight": EXPERIMENT_L2_WEIGHT}
            tf = {f.name: f.type for f in fields(TrainConfig)}
            for k, v in sec.items():
                if k == "trainers":
                    cfg.trainers = tuple(_items(v))
                elif k == "hidden":
                    train[k] = _ints(v)
                elif k == "observation_supervision":
                    train[k] = _bool(v)
                elif tf[k] in ("int", int):
                    train[k] = int(v)
                else:
                    train[k] = float(v)
            s.train = train
        if cp.has_section("eval"):
            sec = dict(cp["eval"])
            _check_keys(sec, EVAL_KEYS, "eval")
            for k, v in sec.items():
                if k == "cutoffs":
                    s.cutoffs = _ints(v)
                elif k == "sweep_trainers":
                    cfg.sweep_trainers = tuple(_items(v))
                else:
                    setattr(cfg, k, _floats(v))
        if cp.has_section("run"):
            sec = dict(cp["run"])
            _check_keys(sec, RUN_KEYS, "run")
            if "seeds" in sec:
                cfg.seeds = _ints(sec["seeds"])
            if "output_dir" in sec:
                cfg.output_dir = sec["output_dir"]
    except ConfigError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    return parse_config(text, os.path.dirname(os.path.abspath(path)))


DEFAULT_CONFIG_TEXT = """\
[dataset]
n_queries = 200
docs_per_query = 20
n_items = 400

[clicks]
family = pbm
tau = 1.0
train_sessions = 5
val_sessions = 5
test_sessions = 1
label_fraction = 0.01

[training]
trainers = inforank, inforank_minus, click, labeled
learning_rate = 0.001
batch_size = 128
eta = 0.5
l2_weight = 0.0001
max_epochs = 100
patience = 5

[eval]
cutoffs = 3, 5, 10
eta_grid = 0, 0.2, 0.5, 1.0
degree_grid = 0, 0.5, 1.0, 1.5, 2.0
fraction_grid = 0.2, 0.4, 0.6, 0.8, 1.0
sweep_trainers = inforank, click

[run]
seeds = 0, 1, 2, 3, 4
output_dir = runs
"""
