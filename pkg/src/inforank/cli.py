"""Command-line driver: generate | simulate | train | evaluate | sweep | oracle-check.

Every command writes into ``--out`` (one ``seed_<s>`` subdirectory per
seed where that applies) together with a ``manifest.json`` holding the
full config, its hash and the seeds. Outputs are pure functions of the
manifest, so re-running a command reproduces its CSV files byte for byte.

Exit codes: 0 success, 2 config or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .clicks import InitialRanker, SimulationError, make_click_model, rank_initial, read_click_log, simulate_log
from .clicks import train_initial_ranker, write_click_log
from .config import DEFAULT_CONFIG_TEXT, ConfigError, ExperimentConfig, load_config, parse_config
from .data import DatasetError, filter_dataset, generate_synthetic, load_dataset, load_sparse_text, save_dataset
from .data import split_dataset
from .estimators import make_ranker
from .experiment import Runner, aggregate, write_table
from .infotheory import delta_ci_dataset
from .metrics import EvaluationError, evaluate_ranking, frequency_curve, position_shift_curve, score_groups
from .metrics import write_curves
from .model import ModelError, load_checkpoint, rank_by_relevance, save_checkpoint, score
from .training import DivergenceError, TrainingError, load_train_state, save_train_state, write_history

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class CLIError(Exception):
    def __init__(self, msg, code=EXIT_CONFIG):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(path, force: bool) -> str:
    if os.path.isdir(path) and os.listdir(path) and not force:
        raise CLIError(f"output directory {path!r} is not empty; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def _write_manifest(out, command, cfg: ExperimentConfig, seeds, extra=None) -> None:
    manifest = {
        "command": command, "config": cfg.to_dict(), "config_hash": cfg.digest(), "seeds": list(seeds),
        "version": __version__, **(extra or {}),
    }
    with open(os.path.join(out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(path) -> dict:
    f = os.path.join(path, "manifest.json")
    if not os.path.exists(f):
        raise CLIError(f"{path!r} has no manifest.json; was it produced by this tool?")
    with open(f, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _seeds(args, cfg):
    return (args.seed,) if args.seed is not None else tuple(cfg.seeds)


def _seed_dir(root, seed):
    return os.path.join(root, f"seed_{seed}")


def _config(args) -> ExperimentConfig:
    if args.config is None:
        return parse_config(DEFAULT_CONFIG_TEXT)
    return load_config(args.config)


def _base_dataset(cfg: ExperimentConfig, seed: int):
    if cfg.dataset_path is not None:
        return load_sparse_text(cfg.dataset_path, cfg.dataset_schema, cfg.dataset_y_max)
    return generate_synthetic(cfg.settings.synth, seed)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, cfg):
    out = _prepare_out(args.out, args.force)
    seeds = _seeds(args, cfg)
    for seed in seeds:
        d = _seed_dir(out, seed)
        os.makedirs(d, exist_ok=True)
        ds = filter_dataset(_base_dataset(cfg, seed), cfg.settings.max_rank)
        save_dataset(ds, os.path.join(d, "dataset.npz"))
    _write_manifest(out, "generate", cfg, seeds)
    return 0


def cmd_simulate(args, cfg):
    if args.dataset is None:
        raise CLIError("simulate needs --dataset (output of generate)")
    out = _prepare_out(args.out, args.force)
    s = cfg.settings
    seeds = _seeds(args, cfg)
    model = make_click_model(s.click_family, **s.click_params)
    for seed in seeds:
        src = os.path.join(_seed_dir(args.dataset, seed), "dataset.npz")
        if not os.path.exists(src):
            raise CLIError(f"no dataset for seed {seed} under {args.dataset!r}")
        ds = load_dataset(src)
        tr, va, te = split_dataset(ds, seed)
        ranker = train_initial_ranker(tr, s.label_fraction, seed)
        d = _seed_dir(out, seed)
        os.makedirs(d, exist_ok=True)
        for name, part, sessions, off in (("train", tr, s.train_sessions, 0), ("val", va, s.val_sessions, 1),
                                          ("test", te, s.test_sessions, 2)):
            save_dataset(part, os.path.join(d, f"{name}.npz"))
            write_click_log(simulate_log(part, ranker, model, seed + off, sessions, s.epsilon, s.max_rank),
                            os.path.join(d, f"{name}.jsonl"))
        np.savez(os.path.join(d, "initial_ranker.npz"), weights=ranker.weights, bias=np.array(ranker.bias))
    _write_manifest(out, "simulate", cfg, seeds, {"dataset": os.path.abspath(args.dataset)})
    return 0


def _trainer_kwargs(cfg, seed, eta_override):
    kw = dict(cfg.settings.train)
    kw.update(random_state=seed, max_rank=cfg.settings.max_rank, epsilon=cfg.settings.epsilon,
              sessions=cfg.settings.train_sessions)
    if eta_override is not None:
        kw["eta"] = eta_override
    return kw


def cmd_train(args, cfg):
    if args.logs is None:
        raise CLIError("train needs --logs (output of simulate)")
    trainers = tuple(args.trainer) if args.trainer else tuple(cfg.trainers)
    for t in trainers:
        make_ranker(t)  # unknown names fail before any work is done
    resume = getattr(args, "resume", False)
    out = args.out if resume and os.path.isdir(args.out) else _prepare_out(args.out, args.force)
    os.makedirs(out, exist_ok=True)
    seeds = _seeds(args, cfg)
    _write_manifest(out, "train", cfg, seeds, {"logs": os.path.abspath(args.logs), "trainers": list(trainers),
                                               "eta_override": args.eta})
    for seed in seeds:
        src = _seed_dir(args.logs, seed)
        if not os.path.isdir(src):
            raise CLIError(f"no logs for seed {seed} under {args.logs!r}")
        train_log = read_click_log(os.path.join(src, "train.jsonl"))
        val_log = read_click_log(os.path.join(src, "val.jsonl"))
        tr = load_dataset(os.path.join(src, "train.npz"))
        va = load_dataset(os.path.join(src, "val.npz"))
        d = _seed_dir(out, seed)
        os.makedirs(d, exist_ok=True)
        for t in trainers:
            est = make_ranker(t, **_trainer_kwargs(cfg, seed, args.eta))
            state_path = os.path.join(d, f"{t}.state.npz")
            warm = load_train_state(state_path) if resume and os.path.exists(state_path) else None
            try:
                if t == "labeled":
                    est.fit(tr, eval_dataset=va, warm_state=warm)
                else:
                    est.fit(train_log, eval_log=val_log, eval_dataset=va, warm_state=warm)
            except DivergenceError as exc:
                if exc.history:
                    write_history(exc.history, os.path.join(d, f"{t}.history.csv"))
                raise
            save_checkpoint(est.params_, os.path.join(d, f"{t}.npz"), {"trainer": t, "seed": seed})
            save_train_state(est.state_, state_path)
            write_history(est.history_, os.path.join(d, f"{t}.history.csv"))
    return 0


def cmd_evaluate(args, cfg):
    if args.checkpoints is None or args.logs is None:
        raise CLIError("evaluate needs --checkpoints (output of train) and --logs (output of simulate)")
    out = _prepare_out(args.out, args.force)
    train_manifest = _read_manifest(args.checkpoints)
    trainers = tuple(args.trainer) if args.trainer else tuple(train_manifest.get("trainers", cfg.trainers))
    seeds = _seeds(args, cfg)
    s = cfg.settings
    rows = []
    for seed in seeds:
        src = _seed_dir(args.logs, seed)
        te = load_dataset(os.path.join(src, "test.npz"))
        test_log = read_click_log(os.path.join(src, "test.jsonl"))
        z = np.load(os.path.join(src, "initial_ranker.npz"))
        ranker = InitialRanker(z["weights"], float(z["bias"]), te.feature_schema, 0)
        d = _seed_dir(out, seed)
        os.makedirs(d, exist_ok=True)
        curves = []
        initial = [[doc.doc_id for doc in rank_initial(ranker, g)] for g in te.groups]
        truth = [[doc.doc_id for doc in sorted(g.documents, key=lambda x: (-x.graded_relevance, x.doc_id))]
                 for g in te.groups]
        for t in trainers:
            ck = os.path.join(_seed_dir(args.checkpoints, seed), f"{t}.npz")
            if not os.path.exists(ck):
                raise CLIError(f"missing checkpoint {ck!r}")
            params = load_checkpoint(ck, test_log.schema)
            pos = int(s.train.get("inference_position", 1))
            scores = score_groups(lambda X: score(params, X), te, pos, s.max_rank)
            dci = delta_ci_dataset(params, test_log.features) if params.spec.two_tower else float("nan")
            rep = evaluate_ranking(scores, te, s.cutoffs, dci, {"seed": seed, "trainer": t,
                                                                "config_hash": cfg.digest()})
            rep.to_json(os.path.join(d, f"{t}.metrics.json"))
            row = {"trainer": t, "seed": seed, "map_at_10": rep.map_at_10, "delta_ci": rep.delta_ci}
            row.update({f"ndcg@{k}": v for k, v in sorted(rep.ndcg.items())})
            rows.append(row)
            model_lists = [[doc.doc_id for doc in rank_by_relevance(params, g, pos, s.max_rank)] for g in te.groups]
            shift, ref = position_shift_curve(initial, model_lists, truth)
            shift.name, ref.name = f"{t}/position_shift", "relevance/position_shift"
            curves += [shift] + ([ref] if not any(c.name == ref.name for c in curves) else [])
            try:
                mean_pos, top = frequency_curve(model_lists)
                mean_pos.name, top.name = f"{t}/{mean_pos.name}", f"{t}/{top.name}"
                curves += [mean_pos, top]
            except EvaluationError:
                pass
        write_curves(os.path.join(d, "curves.csv"), curves)
    metrics = ["ndcg@%d" % k for k in s.cutoffs] + ["map_at_10", "delta_ci"]
    write_table(os.path.join(out, "per_seed.csv"), rows)
    write_table(os.path.join(out, "summary.csv"), aggregate(rows, ["trainer"], metrics))
    _write_manifest(out, "evaluate", cfg, seeds, {"checkpoints": os.path.abspath(args.checkpoints),
                                                  "logs": os.path.abspath(args.logs), "trainers": list(trainers)})
    return 0


SWEEPS = ("eta", "bias", "fraction")


def cmd_sweep(args, cfg):
    out = _prepare_out(args.out, args.force)
    seeds = _seeds(args, cfg)
    which = tuple(args.sweep) if args.sweep else SWEEPS
    runner = Runner(cfg.settings, None if cfg.dataset_path is None else _base_dataset(cfg, 0))
    trainers = tuple(args.trainer) if args.trainer else tuple(cfg.sweep_trainers)
    metrics = ["ndcg@10", "map_at_10", "delta_ci", "val_delta_ci"]
    if "eta" in which:
        rows = runner.eta_sweep(cfg.eta_grid, seeds)
        write_table(os.path.join(out, "eta_sweep.csv"), rows)
        write_table(os.path.join(out, "eta_sweep_summary.csv"), aggregate(rows, ["eta"], metrics))
    if "bias" in which:
        rows = runner.bias_sweep(cfg.degree_grid, trainers, seeds)
        write_table(os.path.join(out, "bias_sweep.csv"), rows)
        write_table(os.path.join(out, "bias_sweep_summary.csv"), aggregate(rows, ["degree", "trainer"], metrics))
    if "fraction" in which:
        rows = runner.fraction_sweep(cfg.fraction_grid, trainers, seeds)
        write_table(os.path.join(out, "fraction_sweep.csv"), rows)
        write_table(os.path.join(out, "fraction_sweep_summary.csv"),
                    aggregate(rows, ["fraction", "trainer"], metrics))
    _write_manifest(out, "sweep", cfg, seeds, {"sweeps": list(which), "trainers": list(trainers)})
    return 0


def cmd_oracle_check(args, cfg):
    from .oracle_report import run_oracle_checks

    out = _prepare_out(args.out, args.force)
    seed = args.seed if args.seed is not None else 0
    report = run_oracle_checks(seed, n_worlds=args.n_worlds)
    with open(os.path.join(out, "oracle_report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "oracle-check", cfg, (seed,))
    return 0 if all(r["pass"] for r in report["checks"].values()) else 1


# ---------------------------------------------------------------------------
# entry point


COMMANDS = {
    "generate": cmd_generate, "simulate": cmd_simulate, "train": cmd_train, "evaluate": cmd_evaluate,
    "sweep": cmd_sweep, "oracle-check": cmd_oracle_check,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="inforank", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI experiment config (defaults built in)")
        sp.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        sp.add_argument("--trainer", action="append", help="trainer name; repeatable")
        sp.add_argument("--eta", type=float, help="override the CMI weight for inforank")
        if name == "simulate":
            sp.add_argument("--dataset", help="directory written by generate")
        if name in ("train", "evaluate"):
            sp.add_argument("--logs", help="directory written by simulate")
        if name == "train":
            sp.add_argument("--resume", action="store_true", help="continue from saved training states")
        if name == "evaluate":
            sp.add_argument("--checkpoints", help="directory written by train")
        if name == "sweep":
            sp.add_argument("--sweep", action="append", choices=SWEEPS, help="which sweep; repeatable (default all)")
        if name == "oracle-check":
            sp.add_argument("--n-worlds", type=int, default=1000, help="random worlds per identity")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        if args.eta is not None and args.eta < 0:
            raise CLIError("--eta must be >= 0")
        return COMMANDS[args.command](args, cfg)
    except (CLIError, ConfigError, DatasetError, SimulationError, ModelError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "code", EXIT_CONFIG)
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (TrainingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
