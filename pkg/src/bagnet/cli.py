"""Command-line driver: ``bagnet <command> [--config FILE] [flags]``.

Settings come from built-in defaults, then a flat ``key = value`` config
file, then flags (flags win).  Every run writes ``config.txt`` (the fully
resolved settings, enough to rerun) plus its metrics and checkpoints into
the output directory.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import ConfigError, CorpusError, SynthConfig, frequency_bucket, generate_synthetic, load_corpus
from .embeddings import (EmbeddingFormatError, RankError, embeddings_for_corpus, export_word2vec_text,
                         import_word2vec_text)
from .entity_typing import (MODES, BagData, ETEncoderConfig, ETModel, predict, read_predictions,
                            train_typing, write_predictions)
from .evaluation import MetricError, relation_report, typing_report, write_report
from .experiments import JOINT_VARIANTS, RE_MODELS, TYPING_MODES, ExperimentConfig, means, sweep
from .nn.checkpoint import CheckpointError, load_params, save_params
from .nn.tensor import NumericalError
from .relation import (ET_KINDS, GAMMA_GRID, INTEGRATIONS, RelData, REEncoderConfig, REModel, pr_area,
                       predict_pairs, train_relation, write_pair_scores)
from .training import TrainConfig

log = logging.getLogger("bagnet")

COMMANDS = ("gen-corpus", "train-embeddings", "train-et", "train-re", "train-joint", "evaluate", "sweep")

# key -> (default, help); the default's type is the value type
OPTIONS: dict[str, tuple[object, str]] = {
    "seed": (0, "master seed for every random stream"),
    "out": ("", "output directory (default: runs/<command>-<timestamp>)"),
    "corpus": ("", "corpus directory"),
    "embeddings": ("", "word2vec text file; trained from the corpus when empty"),
    "dim": (100, "embedding dimension"),
    "emb_window": (5, "co-occurrence window for embeddings"),
    # synthetic corpus
    "n_types": (10, "synthetic: number of types"),
    "n_entities": (500, "synthetic: number of entities"),
    "n_relations": (10, "synthetic: number of relations"),
    "n_pairs": (2000, "synthetic: relation pairs to draw"),
    "noise_rate": (0.5, "synthetic: share of contexts that express no gold type"),
    "mislink_rate": (0.05, "synthetic: chance a noisy context carries a wrong-type trigger"),
    "relation_noise": (0.3, "synthetic: share of relation contexts without a trigger"),
    # models
    "mode": ("miml-att", "typing mode: " + ", ".join(MODES)),
    "et_encoder": ("cnn", "typing context encoder: cnn or mlp"),
    "encoder": ("contextwise", "relation encoder: contextwise, piecewise or entemb"),
    "integration": ("none", "type integration: " + ", ".join(INTEGRATIONS)),
    "et_kind": ("context", "joint typing component: " + ", ".join(ET_KINDS)),
    "et_predictions": ("", "typing predictions file for pipeline integrations"),
    "gamma": ("tune", "joint relation-loss weight, or 'tune' for the dev grid"),
    "n_filters": (50, "filters per width"),
    "hidden": (100, "hidden layer size"),
    "tau": (50, "type representation size for hidden integrations"),
    "freeze_type_emb": (False, "keep the attention type embeddings fixed"),
    # training
    "lr": (0.1, "AdaGrad learning rate"),
    "batch_size": (10, "bags per update"),
    "max_epochs": (30, "epoch limit"),
    "patience": (3, "early-stopping patience in epochs"),
    "q_max": (50, "contexts sampled per bag during training"),
    # evaluate / sweep
    "run": ("", "evaluate: training output directory to re-evaluate"),
    "experiment": ("typing", "sweep: typing, relation or joint-variants"),
    "n_seeds": (5, "sweep: number of seeds"),
    "workers": (0, "sweep: worker processes (0 = BAGNET_THREADS or CPU count)"),
}


def _parse_value(key: str, raw: str):
    default = OPTIONS[key][0]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def read_config(path) -> dict:
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in OPTIONS:
            raise ConfigError(f"{path}:{no}: unknown key {key!r}")
        out[key] = _parse_value(key, value)
    return out


def write_config(settings: dict, path) -> None:
    lines = [f"{k} = {v}" for k, v in settings.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def resolve(command: str, args: argparse.Namespace) -> dict:
    settings = {k: v[0] for k, v in OPTIONS.items()}
    if args.config:
        try:
            settings.update(read_config(args.config))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    for key in OPTIONS:
        val = getattr(args, key, None)
        if val is not None:
            settings[key] = _parse_value(key, str(val))
    if command == "train-joint":
        settings["integration"] = "joint-train"
    settings["command"] = command
    return settings


def out_dir(settings: dict) -> Path:
    out = settings["out"] or f"runs/{settings['command']}-{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot(settings: dict, out: Path) -> None:
    snap = dict(settings)
    snap["out"] = str(out)
    write_config({k: v for k, v in snap.items() if k != "command"}, out / "config.txt")
    (out / "seed.txt").write_text(f"{settings['seed']}\n")


def _train_cfg(s: dict) -> TrainConfig:
    return TrainConfig(lr=s["lr"], batch_size=s["batch_size"], max_epochs=s["max_epochs"],
                       patience=s["patience"], q_max=s["q_max"], seed=s["seed"])


def _require(s: dict, key: str):
    if not s[key]:
        raise ConfigError(f"{s['command']} needs --{key.replace('_', '-')} (or '{key}' in the config)")
    return s[key]


def _load(s: dict):
    corpus = load_corpus(_require(s, "corpus"))
    if s["embeddings"]:
        table = import_word2vec_text(s["embeddings"], expected_dim=s["dim"]).with_specials()
    else:
        table = embeddings_for_corpus(corpus, d=s["dim"], window=s["emb_window"])
    return corpus, table


def _synth(s: dict) -> SynthConfig:
    keys = {f.name for f in fields(SynthConfig)}
    return SynthConfig(**{k: v for k, v in s.items() if k in keys})


# ----------------------------------------------------------------- commands

def cmd_gen_corpus(s, out):
    corpus = generate_synthetic(_synth(s))
    corpus_mod.save_corpus(corpus, out)
    return {"entities": len(corpus.entities), "contexts": len(corpus.contexts),
            "pairs": len(corpus.instances)}


def cmd_train_embeddings(s, out):
    corpus = load_corpus(_require(s, "corpus"))
    table = embeddings_for_corpus(corpus, d=s["dim"], window=s["emb_window"])
    export_word2vec_text(table, out / "embeddings.txt")
    return {"vocab": len(table), "dim": table.dim, "checksum": table.checksum()}


def _et_model(s, corpus, table):
    if s["mode"] not in MODES:
        raise ConfigError(f"unknown mode {s['mode']!r}")
    enc = ETEncoderConfig(kind=s["et_encoder"], n_filters=s["n_filters"], hidden=s["hidden"],
                          window=corpus.window)
    return ETModel(table, corpus.types, enc, attention=s["mode"] == "miml-att",
                   freeze_type_emb=s["freeze_type_emb"], seed=s["seed"])


def _evaluate_et(s, corpus, model, out):
    agg = MODES[s["mode"]][1]
    data = {sp: BagData(model, corpus.bags(sp)) for sp in ("dev", "test")}
    scores = {sp: predict(model, d, agg) for sp, d in data.items()}
    buckets = {}
    for name in ("head", "tail"):
        buckets[name] = np.array([frequency_bucket(corpus.entities[b.entity]) == name
                                  for b in data["test"].bags], dtype=bool)
    report = typing_report(scores["dev"], data["dev"].labels, scores["test"], data["test"].labels, buckets)
    write_report(report, out, corpus.types)
    bags = corpus.bags()
    allp = predict(model, BagData(model, bags), agg)
    write_predictions(out / "predictions.tsv", [b.entity for b in bags], allp, corpus)
    return report.scalars()


def cmd_train_et(s, out):
    corpus, table = _load(s)
    model = _et_model(s, corpus, table)
    hist = train_typing(model, corpus.bags("train"), corpus.bags("dev"), s["mode"], _train_cfg(s))
    save_params(out / "model.bin", model.state_dict())
    metrics = _evaluate_et(s, corpus, model, out)
    metrics["best_epoch"] = hist.best_epoch
    return metrics


def _re_setup(s, corpus, table, gamma):
    ig = s["integration"]
    if ig not in INTEGRATIONS:
        raise ConfigError(f"unknown integration {ig!r}")
    enc = REEncoderConfig(kind=s["encoder"], n_filters=s["n_filters"], hidden=s["hidden"], tau=s["tau"],
                          window=corpus.window)
    et_cfg = ETEncoderConfig(kind=s["et_encoder"], n_filters=s["n_filters"], hidden=s["hidden"],
                             window=corpus.window)
    try:
        model = REModel(table, corpus.types, len(corpus.relations), enc, integration=ig,
                        et_kind=s["et_kind"], et_cfg=et_cfg, gamma=gamma, seed=s["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    probs = None
    if ig in ("binary", "binary-hidden", "predicted-hidden", "weighted"):
        probs = read_predictions(_require(s, "et_predictions"), corpus.types)
    data = {sp: RelData(model, corpus.relation_bags(sp), corpus, probs) for sp in ("train", "dev", "test")}
    return model, data


def _gammas(s) -> list[float]:
    if s["integration"] != "joint-train":
        return [1.0]
    if s["gamma"] == "tune":
        return list(GAMMA_GRID)
    try:
        g = float(s["gamma"])
    except ValueError:
        raise ConfigError(f"gamma must be a number or 'tune', got {s['gamma']!r}") from None
    if g < 0:
        raise ConfigError("gamma must be non-negative")
    return [g]


def _evaluate_re(corpus, model, data, out):
    probs = predict_pairs(model, data["test"])
    report = relation_report(probs, data["test"].gold, corpus.relation_names, corpus.na_id)
    write_report(report, out)
    write_pair_scores(out / "scores.tsv", data["test"], probs, corpus.relation_names)
    return report.scalars()


def cmd_train_re(s, out):
    corpus, table = _load(s)
    best = None
    for g in _gammas(s):
        model, data = _re_setup(s, corpus, table, g)
        train_relation(model, data["train"], data["dev"], _train_cfg(s))
        area = pr_area(model, data["dev"]) if len(data["dev"]) else 0.0
        log.info("gamma %s: dev area %.4f", g, area)
        if best is None or area > best[0]:
            best = (area, g, model, data)
    area, g, model, data = best
    save_params(out / "model.bin", model.state_dict())
    (out / "gamma.txt").write_text(f"{g!r}\n")
    metrics = _evaluate_re(corpus, model, data, out)
    metrics["extra"] = {"dev_area": area, "gamma": g}
    return metrics


def cmd_evaluate(s, out):
    run = Path(_require(s, "run"))
    saved = read_config(run / "config.txt")
    saved.update({k: s[k] for k in ("corpus", "embeddings") if s[k]})
    saved["command"] = "evaluate"
    merged = {k: v[0] for k, v in OPTIONS.items()} | saved
    corpus, table = _load(merged)
    state = load_params(run / "model.bin")
    if any(n.startswith("et.") for n in state):
        model = _et_model(merged, corpus, table)
        model.load_state_dict(state)
        return _evaluate_et(merged, corpus, model, out)
    gamma = float((run / "gamma.txt").read_text()) if (run / "gamma.txt").exists() else 1.0
    model, data = _re_setup(merged, corpus, table, gamma)
    model.load_state_dict(state)
    metrics = _evaluate_re(corpus, model, data, out)
    metrics["extra"] = {"dev_area": pr_area(model, data["dev"]) if len(data["dev"]) else 0.0,
                        "gamma": gamma}
    return metrics


def cmd_sweep(s, out):
    synth = {k: s[k] for k in ("n_types", "n_entities", "n_relations", "n_pairs", "noise_rate",
                               "mislink_rate", "relation_noise")}
    cfg = ExperimentConfig(dim=s["dim"], n_filters=s["n_filters"], hidden=s["hidden"], tau=s["tau"],
                           max_epochs=s["max_epochs"], patience=s["patience"],
                           batch_size=s["batch_size"], synth=synth)
    exp = s["experiment"]
    if exp == "typing":
        kind, names = "typing", TYPING_MODES
    elif exp == "relation":
        kind, names = "relation", RE_MODELS
    elif exp == "joint-variants":
        kind, names = "relation", JOINT_VARIANTS
    else:
        raise ConfigError(f"unknown experiment {exp!r}")
    seeds = [s["seed"] + i for i in range(s["n_seeds"])]
    table = sweep(kind, cfg, seeds, names, s["workers"] or None)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"seed{x}" for x in seeds] + ["mean"])
        for name in names:
            vals = table[name]
            w.writerow([name] + [repr(v) for v in vals] + [repr(float(np.mean(vals)))])
    return means(table)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train-embeddings": cmd_train_embeddings,
    "train-et": cmd_train_et,
    "train-re": cmd_train_re,
    "train-joint": cmd_train_re,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bagnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        for key, (default, help_) in OPTIONS.items():
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, help=f"{help_} [{default}]")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve(args.command, args)
        out = out_dir(settings)
        _snapshot(settings, out)
        metrics = HANDLERS[args.command](settings, out)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    except (ConfigError, RankError) as exc:
        print(f"bagnet: config error: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, EmbeddingFormatError, CheckpointError, MetricError, OSError, KeyError) as exc:
        print(f"bagnet: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"bagnet: numerical failure: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"bagnet: data error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
