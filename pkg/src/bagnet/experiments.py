"""Seeded synthetic experiments shared by the ``sweep`` command and the trend tests.

Every experiment builds its own corpus and embeddings from the seed, so
runs are independent and can be farmed out to worker processes.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .corpus import ConfigError, SynthConfig, generate_synthetic
from .embeddings import embeddings_for_corpus
from .entity_typing import (MODES, BagData, EntEmbModel, ETEncoderConfig, ETModel, predict,
                            train_entemb, train_typing, tuned_f1)
from .relation import GAMMA_GRID, RelData, REEncoderConfig, REModel, pr_area, train_relation
from .training import TrainConfig

TYPING_MODES = ("ds", "miml-max", "miml-max-avg", "miml-avg", "miml-att")
RE_MODELS = ("contextwise", "piecewise", "entemb", "binary", "binary-hidden",
             "predicted-hidden", "weighted", "joint-train")
JOINT_VARIANTS = ("joint-train", "joint-dual", "joint-entemb", "joint-all-entemb")


@dataclass
class ExperimentConfig:
    dim: int = 50
    n_filters: int = 20
    hidden: int = 50
    tau: int = 50
    et_lr: float = 0.1
    re_lr: float = 0.03
    max_epochs: int = 15
    patience: int = 3
    batch_size: int = 10
    freeze_type_emb: bool = True
    gammas: tuple[float, ...] = GAMMA_GRID
    synth: dict = field(default_factory=dict)

    def synth_config(self, seed: int) -> SynthConfig:
        return replace(SynthConfig(**self.synth), seed=seed)

    def train_config(self, seed: int, lr: float) -> TrainConfig:
        return TrainConfig(lr=lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=seed)

    def et_encoder(self) -> ETEncoderConfig:
        return ETEncoderConfig(n_filters=self.n_filters, hidden=self.hidden)


def _setup(cfg: ExperimentConfig, seed: int):
    corpus = generate_synthetic(cfg.synth_config(seed))
    table = embeddings_for_corpus(corpus, d=cfg.dim)
    return corpus, table


def typing_trend(cfg: ExperimentConfig, seed: int, modes=TYPING_MODES) -> dict[str, float]:
    """Tuned dev micro-F1 per typing mode for one seed.

    MIML-MAX-AVG reuses the MIML-MAX parameters (same training run).
    """
    corpus, table = _setup(cfg, seed)
    train, dev = corpus.bags("train"), corpus.bags("dev")
    out = {}
    trained = {}
    for mode in modes:
        train_mode = "miml-max" if mode == "miml-max-avg" else mode
        if train_mode not in trained:
            model = ETModel(table, corpus.types, cfg.et_encoder(), attention=train_mode == "miml-att",
                            freeze_type_emb=cfg.freeze_type_emb, seed=seed)
            train_typing(model, train, dev, train_mode, cfg.train_config(seed, cfg.et_lr))
            trained[train_mode] = model
        model = trained[train_mode]
        data = BagData(model, dev)
        out[mode] = tuned_f1(predict(model, data, MODES[mode][1]), data.labels)
    return out


def pipeline_type_probs(cfg: ExperimentConfig, corpus, table, seed: int) -> dict[str, np.ndarray]:
    """Entity-level MIML-ATT type probabilities for every entity with contexts."""
    model = ETModel(table, corpus.types, cfg.et_encoder(), attention=True,
                    freeze_type_emb=cfg.freeze_type_emb, seed=seed)
    train_typing(model, corpus.bags("train"), corpus.bags("dev"), "miml-att",
                 cfg.train_config(seed, cfg.et_lr))
    bags = corpus.bags()
    probs = predict(model, BagData(model, bags), "att")
    return {b.entity: p for b, p in zip(bags, probs)}


def _re_model(cfg, corpus, table, seed, name, gamma=1.0):
    kind, integration, et_kind = "contextwise", "none", "context"
    if name in ("piecewise", "entemb"):
        kind = name
    elif name in ("binary", "binary-hidden", "predicted-hidden", "weighted", "joint-train"):
        integration = name
    elif name == "joint-dual":
        integration, et_kind = "joint-train", "dual"
    elif name == "joint-entemb":
        integration, et_kind = "joint-train", "entemb"
    elif name == "joint-all-entemb":
        kind, integration, et_kind = "entemb", "joint-train", "entemb"
    enc = REEncoderConfig(kind=kind, n_filters=cfg.n_filters, hidden=cfg.hidden, tau=cfg.tau)
    return REModel(table, corpus.types, len(corpus.relations), enc, integration=integration,
                   et_kind=et_kind, et_cfg=cfg.et_encoder(), gamma=gamma, seed=seed)


def relation_trend(cfg: ExperimentConfig, seed: int, models=RE_MODELS) -> dict[str, float]:
    """Dev PR area per RE model for one seed; joint models get the best dev gamma."""
    corpus, table = _setup(cfg, seed)
    probs = None
    if any(m in ("binary", "binary-hidden", "predicted-hidden", "weighted") for m in models):
        probs = pipeline_type_probs(cfg, corpus, table, seed)
    train, dev = corpus.relation_bags("train"), corpus.relation_bags("dev")
    out = {}
    for name in models:
        gammas = cfg.gammas if name.startswith("joint") else (1.0,)
        best = -1.0
        for g in gammas:
            model = _re_model(cfg, corpus, table, seed, name, g)
            tr, dv = RelData(model, train, corpus, probs), RelData(model, dev, corpus, probs)
            train_relation(model, tr, dv, cfg.train_config(seed, cfg.re_lr))
            best = max(best, pr_area(model, dv))
        out[name] = best
    return out


def entemb_typing(cfg: ExperimentConfig, seed: int) -> float:
    """Tuned dev micro-F1 of the entity-embedding typing baseline."""
    corpus, table = _setup(cfg, seed)
    model = EntEmbModel(table, len(corpus.types), hidden=cfg.hidden, seed=seed)
    split = {s: [b.entity for b in corpus.bags(s)] for s in ("train", "dev")}
    vec = {s: model.entity_vectors(ids) for s, ids in split.items()}
    lab = {s: np.array([corpus.label_vector(e) for e in ids]) for s, ids in split.items()}
    train_entemb(model, vec["train"], lab["train"], vec["dev"], lab["dev"],
                 cfg.train_config(seed, cfg.et_lr))
    return tuned_f1(model.probs(vec["dev"]).data, lab["dev"])


EXPERIMENTS = {"typing": typing_trend, "relation": relation_trend}


def _run_one(args):
    kind, cfg, seed, names = args
    start = time.perf_counter()
    fn = EXPERIMENTS[kind]
    res = fn(cfg, seed, names) if names else fn(cfg, seed)
    return kind, seed, res, time.perf_counter() - start


def worker_count(requested: int | None = None) -> int:
    env = os.environ.get("BAGNET_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        cap = 0
    if cap < 1:
        raise ConfigError(f"BAGNET_THREADS must be a positive integer, got {env!r}")
    return max(1, min(cap, requested or cap))


def sweep(kind: str, cfg: ExperimentConfig, seeds, names=None, workers: int | None = None):
    """Run one experiment per seed; returns ``{name: [score per seed]}`` in seed order."""
    if kind not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {kind!r}")
    jobs = [(kind, cfg, s, tuple(names) if names else None) for s in seeds]
    n = worker_count(workers)
    if n == 1 or len(jobs) == 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(n, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    table: dict[str, list[float]] = {}
    for _, _, res, _ in sorted(results, key=lambda r: list(seeds).index(r[1])):
        for k, v in res.items():
            table.setdefault(k, []).append(float(v))
    return table


def means(table: dict[str, list[float]]) -> dict[str, float]:
    return {k: float(np.mean(v)) for k, v in table.items()}


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
