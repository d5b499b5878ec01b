"""Corpus-level entity typing.

A context is encoded into ``c`` (MLP over the concatenated window embeddings
or a CNN over the left and right windows), scored per type with
``sigmoid(w_t . c + b_t)``, and a bag of contexts is turned into one
probability per type by MAX, AVG or per-type selective attention.

Modes pair a training aggregation with a prediction aggregation::

    ds            per-context loss   avg
    miml-max      max                max
    miml-avg      avg                avg
    miml-max-avg  max                avg
    miml-att      att                att
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import PAD, Bag, Context, Corpus
from .embeddings import EmbeddingTable
from .encoders import conv_pool, lookup, make_filters
from .evaluation import micro_f1, tune_thresholds
from .nn import ops
from .nn.init import glorot, rng_stream, zeros
from .nn.tensor import Parameter, Tensor
from .training import History, TrainConfig, fit

log = logging.getLogger(__name__)

MODES = {
    "ds": (None, "avg"),
    "miml-max": ("max", "max"),
    "miml-avg": ("avg", "avg"),
    "miml-max-avg": ("max", "avg"),
    "miml-att": ("att", "att"),
}


def mode_aggregations(mode: str) -> tuple[str | None, str]:
    try:
        return MODES[mode]
    except KeyError:
        raise ValueError(f"unknown typing mode {mode!r}; choose from {', '.join(MODES)}") from None


@dataclass
class ETEncoderConfig:
    kind: str = "cnn"
    n_filters: int = 50
    widths: tuple[int, ...] = (2, 3)
    hidden: int = 100
    window: int = 5

    def validate(self):
        if self.kind not in ("cnn", "mlp"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.hidden <= 0 or self.n_filters <= 0:
            raise ValueError("hidden size and filter count must be positive")
        if any(w < 1 or w > self.window for w in self.widths):
            raise ValueError("window widths must lie in [1, window]")


class ETModel:
    """Context encoder plus per-type output layer, optionally with attention."""

    def __init__(self, table: EmbeddingTable, type_names: list[str], cfg: ETEncoderConfig | None = None,
                 attention: bool = False, freeze_type_emb: bool = False, seed: int = 0,
                 prefix: str = "et"):
        self.cfg = cfg = cfg or ETEncoderConfig()
        cfg.validate()
        self.table = table
        self.type_names = list(type_names)
        self.prefix = prefix
        self.attention = attention
        rng = rng_stream(seed, f"init:{prefix}")
        d, T, h = table.dim, len(type_names), cfg.hidden
        self.filters: list[Parameter] = []
        if cfg.kind == "cnn":
            self.filters = make_filters(rng, f"{prefix}.conv", cfg.n_filters, cfg.widths, d)
            phi = 2 * cfg.n_filters * len(cfg.widths)
        else:
            phi = 2 * cfg.window * d
        self.phi_dim = phi
        self.W_h = glorot(rng, (h, phi), f"{prefix}.W_h")
        self.W_out = glorot(rng, (T, h), f"{prefix}.W_out")
        self.b_out = zeros((T,), f"{prefix}.b_out")
        self.M = self.type_emb = None
        if attention:
            self.M = glorot(rng, (h, d), f"{prefix}.M")
            init = np.stack([table.vector(n) for n in type_names])
            self.type_emb = Tensor(init) if freeze_type_emb else Parameter(init, f"{prefix}.type_emb")

    # ------------------------------------------------------------ plumbing
    def parameters(self) -> list[Parameter]:
        ps = self.filters + [self.W_h, self.W_out, self.b_out]
        if self.attention:
            ps.append(self.M)
            if isinstance(self.type_emb, Parameter):
                ps.append(self.type_emb)
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name!r}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name!r}")
            p.data[...] = state[p.name]

    def context_ids(self, contexts: list[Context]) -> np.ndarray:
        """Token ids of shape (N, 2, W); unknown tokens map to ``<UNK>``."""
        W = self.cfg.window
        rows = []
        for c in contexts:
            left = (list(c.left) + [PAD] * W)[:W] if len(c.left) < W else list(c.left[-W:])
            right = (list(c.right) + [PAD] * W)[:W]
            rows.append([self.table.ids(left), self.table.ids(right)])
        return np.asarray(rows, dtype=np.int64).reshape(-1, 2, W)

    # ------------------------------------------------------------- forward
    def features(self, ids: np.ndarray) -> Tensor:
        """phi(c): (N, 2 * n * |widths|) for the CNN, (N, 2W * d) for the MLP."""
        N, _, W = ids.shape
        x = lookup(self.table.vectors, ids.reshape(2 * N, W))
        if self.cfg.kind == "cnn":
            return ops.reshape(conv_pool(x, self.filters, k=1), (N, -1))
        return ops.reshape(x, (N, -1))

    def encode(self, ids: np.ndarray) -> Tensor:
        return ops.tanh(ops.matmul(self.features(ids), ops.transpose(self.W_h)))

    def logits(self, c: Tensor) -> Tensor:
        return ops.add(ops.matmul(c, ops.transpose(self.W_out)), self.b_out)

    def context_probs(self, c: Tensor) -> Tensor:
        return ops.sigmoid(self.logits(c))

    def attention_scores(self, c: Tensor) -> Tensor:
        """``c_i M t`` for every context and type: (N, T)."""
        return ops.matmul(ops.matmul(c, self.M), ops.transpose(self.type_emb))

    def bag_probs(self, c: Tensor, seg: ops.Segments, agg: str) -> Tensor:
        if agg == "max":
            return ops.segment_max(self.context_probs(c), seg)
        if agg == "avg":
            return ops.segment_mean(self.context_probs(c), seg)
        if agg == "att":
            if not self.attention:
                raise ValueError("attention aggregation needs a model built with attention=True")
            alpha = ops.segment_softmax(self.attention_scores(c), seg)
            # w_t . (sum_i alpha_it c_i) == sum_i alpha_it (w_t . c_i)
            per_ctx = ops.matmul(c, ops.transpose(self.W_out))
            return ops.sigmoid(ops.add(ops.segment_sum(ops.mul(alpha, per_ctx), seg), self.b_out))
        raise ValueError(f"unknown aggregation {agg!r}")


# ------------------------------------------------------- single-item helpers

def encode_context(model: ETModel, context: Context) -> np.ndarray:
    return model.encode(model.context_ids([context])).data[0]


def context_type_prob(model: ETModel, c: np.ndarray, t: int) -> float:
    return float(model.context_probs(Tensor(np.atleast_2d(c))).data[0, t])


def bag_prob(model: ETModel, bag: Bag, t: int, aggregation: str) -> float:
    if not bag.contexts:
        raise ValueError("empty bag")
    c = model.encode(model.context_ids(bag.contexts))
    return float(model.bag_probs(c, ops.Segments([len(bag.contexts)]), aggregation).data[0, t])


# ------------------------------------------------------------------ training

class BagData:
    """Pre-tokenized bags: ids per bag and a label matrix."""

    def __init__(self, model: ETModel, bags: list[Bag]):
        self.bags = bags
        self.ids = [model.context_ids(b.contexts) for b in bags]
        self.labels = np.stack([b.labels for b in bags]) if bags else np.zeros((0, len(model.type_names)))

    def __len__(self):
        return len(self.bags)

    def batch(self, idx, rng=None, q_max=None):
        chunks = []
        for i in idx:
            ids = self.ids[i]
            if q_max is not None and len(ids) > q_max:
                keep = np.sort(rng.choice(len(ids), size=q_max, replace=False))
                ids = ids[keep]
            chunks.append(ids)
        return np.concatenate(chunks), ops.Segments([len(c) for c in chunks]), self.labels[idx]


def predict(model: ETModel, data: BagData, agg: str, chunk: int = 512) -> np.ndarray:
    """Bag probabilities (bags x types), all contexts used."""
    out = []
    i = 0
    while i < len(data):
        j, n = i, 0
        while j < len(data) and (n == 0 or n + len(data.ids[j]) <= chunk):
            n += len(data.ids[j])
            j += 1
        ids, seg, _ = data.batch(range(i, j))
        out.append(model.bag_probs(model.encode(ids), seg, agg).data)
        i = j
    return np.concatenate(out) if out else np.zeros((0, len(model.type_names)))


def tuned_f1(scores: np.ndarray, gold: np.ndarray) -> float:
    return micro_f1(scores, gold, tune_thresholds(scores, gold))


def train_typing(model: ETModel, train: list[Bag], dev: list[Bag], mode: str,
                 cfg: TrainConfig | None = None) -> History:
    """DS or MIML training with early stopping on tuned dev micro-F1.

    Model selection uses the *training* aggregation's predictions, so
    ``miml-max-avg`` ends with exactly the parameters ``miml-max`` would.
    """
    cfg = cfg or TrainConfig()
    train_agg, _ = mode_aggregations(mode)
    if train_agg == "att" and not model.attention:
        raise ValueError("miml-att needs a model built with attention=True")
    tr, dv = BagData(model, train), BagData(model, dev)
    rng = rng_stream(cfg.seed, "shuffle")
    sub_rng = rng_stream(cfg.seed, "subsample")
    select_agg = train_agg or "avg"

    def loss_fn(idx):
        if train_agg is None:
            ids, seg, y = tr.batch(idx)
            return ops.bce(y[seg.ids], model.context_probs(model.encode(ids)))
        ids, seg, y = tr.batch(idx, sub_rng, cfg.q_max)
        return ops.bce(y, model.bag_probs(model.encode(ids), seg, train_agg))

    def dev_fn():
        return tuned_f1(predict(model, dv, select_agg), dv.labels)

    return fit(model.parameters(), len(tr), loss_fn, cfg, rng, dev_fn if len(dv) else None)


def train_ds(model, train, dev, cfg=None) -> History:
    return train_typing(model, train, dev, "ds", cfg)


def train_miml(model, train, dev, mode, cfg=None) -> History:
    if mode == "ds":
        raise ValueError("train_miml takes a MIML mode")
    return train_typing(model, train, dev, mode, cfg)


def typing_loss(model: ETModel, bags: list[Bag], mode: str) -> float:
    """Training objective of ``mode`` over ``bags`` at the current parameters."""
    train_agg, _ = mode_aggregations(mode)
    ids, seg, y = BagData(model, bags).batch(range(len(bags)))
    c = model.encode(ids)
    if train_agg is None:
        return ops.bce(y[seg.ids], model.context_probs(c)).item()
    return ops.bce(y, model.bag_probs(c, seg, train_agg)).item()


# -------------------------------------------------------------------- EntEmb

class EntEmbModel:
    """One-hidden-layer MLP over an entity's distributional vector."""

    def __init__(self, table: EmbeddingTable, n_types: int, hidden: int = 100, seed: int = 0,
                 prefix: str = "entemb"):
        rng = rng_stream(seed, f"init:{prefix}")
        d = table.dim
        self.table = table
        self.W1 = glorot(rng, (hidden, d), f"{prefix}.W1")
        self.b1 = zeros((hidden,), f"{prefix}.b1")
        self.W2 = glorot(rng, (n_types, hidden), f"{prefix}.W2")
        self.b2 = zeros((n_types,), f"{prefix}.b2")

    def parameters(self) -> list[Parameter]:
        return [self.W1, self.b1, self.W2, self.b2]

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for p in self.parameters():
            p.data[...] = state[p.name]

    def entity_vectors(self, entity_ids) -> np.ndarray:
        missing = [e for e in entity_ids if e not in self.table]
        if missing:
            log.warning("%d entities lack vectors and use <UNK>", len(missing))
        return self.table.vectors[self.table.ids(entity_ids)]

    def hidden(self, x: Tensor) -> Tensor:
        return ops.tanh(ops.add(ops.matmul(x, ops.transpose(self.W1)), self.b1))

    def logits(self, x: Tensor) -> Tensor:
        return ops.add(ops.matmul(self.hidden(x), ops.transpose(self.W2)), self.b2)

    def probs(self, x) -> Tensor:
        return ops.sigmoid(self.logits(x if isinstance(x, Tensor) else Tensor(x)))


def train_entemb(model: EntEmbModel, vectors: np.ndarray, labels: np.ndarray,
                 dev_vectors: np.ndarray | None = None, dev_labels: np.ndarray | None = None,
                 cfg: TrainConfig | None = None) -> History:
    cfg = cfg or TrainConfig()
    rng = rng_stream(cfg.seed, "shuffle")

    def loss_fn(idx):
        return ops.bce(labels[idx], model.probs(vectors[idx]))

    dev_fn = None
    if dev_vectors is not None and len(dev_vectors):
        def dev_fn():
            return tuned_f1(model.probs(dev_vectors).data, dev_labels)

    return fit(model.parameters(), len(vectors), loss_fn, cfg, rng, dev_fn)


def predict_entemb(model: EntEmbModel, entity_ids) -> np.ndarray:
    return model.probs(model.entity_vectors(list(entity_ids))).data


def join_models(p_a: np.ndarray, p_b: np.ndarray) -> np.ndarray:
    """Combine two typing models: elementwise mean of their probability vectors."""
    p_a, p_b = np.asarray(p_a, dtype=float), np.asarray(p_b, dtype=float)
    for p in (p_a, p_b):
        if ((p < 0) | (p > 1)).any():
            raise ValueError("probabilities must lie in [0, 1]")
    return (p_a + p_b) / 2.0


# --------------------------------------------------------- predictions file

PRED_FLOOR = 1e-4


def write_predictions(path, entity_ids, probs: np.ndarray, corpus: Corpus) -> None:
    """``entity<TAB>type<TAB>prob`` for probs above 1e-4 plus every gold type."""
    lines = []
    for eid, row in zip(entity_ids, probs):
        gold = set(corpus.entities[eid].types)
        for t, p in enumerate(row):
            if p > PRED_FLOOR or t in gold:
                lines.append(f"{eid}\t{corpus.types[t]}\t{float(p)!r}")
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_predictions(path, type_names: list[str]) -> dict[str, np.ndarray]:
    index = {n: i for i, n in enumerate(type_names)}
    out: dict[str, np.ndarray] = {}
    for no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 3 or parts[1] not in index:
            raise ValueError(f"{path}:{no}: malformed prediction line")
        p = float(parts[2])
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"{path}:{no}: probability outside [0, 1]")
        out.setdefault(parts[0], np.zeros(len(type_names)))[index[parts[1]]] = p
    return out
