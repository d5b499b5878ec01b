"""Multi-instance relation extraction with entity-type integration.

Encoders
    contextwise  left/middle/right parts (overlapping on the arguments) are
                 convolved separately, 3-max pooled, concatenated, and fed
                 through a tanh hidden layer together with the two type
                 representations.
    piecewise    the whole sentence is convolved, the feature map is split
                 at the argument positions and 1-max pooled per piece; a
                 softmax layer follows directly.
    entemb       ignores the context; an MLP over the two argument vectors.

Type integrations (``t^k = f(W_t p^k)`` for argument ``k``)
    none, binary, binary-hidden, predicted-hidden, weighted, joint-train.

A pair's relation probability is the max over its contexts, and training
minimizes ``-log P(r(z)|z)`` (optionally plus the two typing costs).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import PAD, Corpus, RelationInstance
from .embeddings import EmbeddingTable
from .encoders import conv_pool, lookup, make_filters
from .entity_typing import EntEmbModel, ETEncoderConfig, ETModel
from .evaluation import relation_pr
from .nn import ops
from .nn.init import glorot, rng_stream, zeros
from .nn.tensor import Parameter, Tensor
from .training import History, TrainConfig, fit

log = logging.getLogger(__name__)

INTEGRATIONS = ("none", "binary", "binary-hidden", "predicted-hidden", "weighted", "joint-train")
ET_KINDS = ("context", "entemb", "dual")
GAMMA_GRID = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
BINARY_THRESHOLD = 0.5
PARTS = ("left", "middle", "right")


@dataclass
class REEncoderConfig:
    kind: str = "contextwise"
    n_filters: int = 50
    widths: tuple[int, ...] = (2, 3)
    k: int = 3
    hidden: int = 100
    window: int = 5
    middle_max: int = 10
    tau: int = 50
    share_filters: bool = False  # contextwise: one filter bank for all three parts

    def validate(self):
        if self.kind not in ("contextwise", "piecewise", "entemb"):
            raise ValueError(f"unknown relation encoder {self.kind!r}")
        if any(w < 1 or w > self.window + 1 for w in self.widths):
            raise ValueError("window widths must lie in [1, window + 1]")
        if self.kind == "contextwise" and self.window + 2 - max(self.widths) < self.k:
            raise ValueError(f"left/right parts of {self.window + 1} tokens are too short for "
                             f"{self.k}-max pooling with width {max(self.widths)}")


def binarize(p: np.ndarray) -> np.ndarray:
    """1 where ``p > 0.5``; the boundary itself maps to 0."""
    return (np.asarray(p) > BINARY_THRESHOLD).astype(np.float64)


def _check_probs(p: np.ndarray):
    if ((p < 0) | (p > 1)).any():
        raise ValueError("type probabilities must lie in [0, 1]")


def _fit_left(toks, n):
    toks = list(toks)[-n:] if n else []
    return [PAD] * (n - len(toks)) + toks


def _fit_right(toks, n):
    toks = list(toks)[:n]
    return toks + [PAD] * (n - len(toks))


def _fit_middle(toks, n):
    toks = list(toks)
    if not toks:
        return [PAD]
    if len(toks) > n:
        toks = toks[:n - n // 2] + toks[len(toks) - n // 2:]
    return toks


# ------------------------------------------------------------------ inputs

class RelData:
    """Token ids and side inputs for a list of relation bags."""

    def __init__(self, model: "REModel", instances: list[RelationInstance], corpus: Corpus,
                 type_probs: dict[str, np.ndarray] | None = None):
        cfg = model.cfg
        W, M = cfg.window, cfg.middle_max
        tab = model.table
        T = len(corpus.types)
        self.instances = instances
        self.gold = np.array([r.relation for r in instances], dtype=np.int64)
        self.left, self.middle, self.right, self.sent, self.valid = [], [], [], [], []
        self.et_windows, self.ent_ids = [], []
        self.y1, self.y2, self.p1, self.p2 = [], [], [], []
        S = 2 * W + M + 2
        missing = 0
        for inst in instances:
            L, Mi, R, Se, V, Ew = [], [], [], [], [], []
            for c in inst.contexts:
                left = _fit_left(c.left, W)
                mid = _fit_middle(c.middle, M)
                right = _fit_right(c.right, W)
                L.append(tab.ids(left + [inst.e1]))
                Mi.append(tab.ids(_fit_right([inst.e1] + mid + [inst.e2], M + 2)))
                R.append(tab.ids([inst.e2] + right))
                sent = left + [inst.e1] + mid + [inst.e2] + right
                V.append(len(sent))
                Se.append(tab.ids(_fit_right(sent, S)))
                # typing windows around each argument inside the RE sentence
                before1, after1 = list(c.left), list(c.middle) + [inst.e2] + list(c.right)
                before2, after2 = list(c.left) + [inst.e1] + list(c.middle), list(c.right)
                Ew.append([[tab.ids(_fit_left(before1, W)), tab.ids(_fit_right(after1, W))],
                           [tab.ids(_fit_left(before2, W)), tab.ids(_fit_right(after2, W))]])
            self.left.append(np.array(L))
            self.middle.append(np.array(Mi))
            self.right.append(np.array(R))
            self.sent.append(np.array(Se))
            self.valid.append(np.array(V))
            self.et_windows.append(np.array(Ew))
            self.ent_ids.append(tab.ids([inst.e1, inst.e2]))
            self.y1.append(corpus.label_vector(inst.e1))
            self.y2.append(corpus.label_vector(inst.e2))
            if type_probs is not None:
                for e, dest in ((inst.e1, self.p1), (inst.e2, self.p2)):
                    if e not in type_probs:
                        missing += 1
                    p = type_probs.get(e, np.zeros(T))
                    _check_probs(p)
                    dest.append(p)
        if missing:
            log.warning("%d arguments have no typing predictions; using zeros", missing)
        self.ent_ids = np.array(self.ent_ids, dtype=np.int64).reshape(-1, 2)
        self.y1 = np.array(self.y1).reshape(-1, T)
        self.y2 = np.array(self.y2).reshape(-1, T)
        self.p1 = np.array(self.p1).reshape(-1, T) if type_probs is not None else None
        self.p2 = np.array(self.p2).reshape(-1, T) if type_probs is not None else None

    def __len__(self):
        return len(self.instances)

    def batch(self, idx, rng=None, q_max=None) -> dict:
        keep = []
        for i in idx:
            q = len(self.left[i])
            if q_max is not None and q > q_max:
                keep.append(np.sort(rng.choice(q, size=q_max, replace=False)))
            else:
                keep.append(np.arange(q))
        idx = np.asarray(list(idx), dtype=np.int64)
        seg = ops.Segments([len(k) for k in keep])
        cat = lambda arrs: np.concatenate([arrs[i][k] for i, k in zip(idx, keep)])
        b = {
            "seg": seg, "gold": self.gold[idx],
            "left": cat(self.left), "middle": cat(self.middle), "right": cat(self.right),
            "sent": cat(self.sent), "valid": cat(self.valid), "et": cat(self.et_windows),
            "ents": self.ent_ids[idx][seg.ids], "ents_bag": self.ent_ids[idx],
            "y1": self.y1[idx], "y2": self.y2[idx],
        }
        if self.p1 is not None:
            b["p1"], b["p2"] = self.p1[idx][seg.ids], self.p2[idx][seg.ids]
        return b


# ------------------------------------------------------------------- model

class REModel:
    def __init__(self, table: EmbeddingTable, type_names: list[str], n_relations: int,
                 cfg: REEncoderConfig | None = None, integration: str = "none",
                 et_kind: str = "context", et_cfg: ETEncoderConfig | None = None,
                 gamma: float = 1.0, seed: int = 0):
        self.cfg = cfg = cfg or REEncoderConfig()
        cfg.validate()
        if integration not in INTEGRATIONS:
            raise ValueError(f"unknown integration {integration!r}")
        if cfg.kind == "piecewise" and integration != "none":
            raise ValueError("type integration is only defined for the contextwise/entemb encoders")
        if et_kind not in ET_KINDS:
            raise ValueError(f"unknown joint typing component {et_kind!r}")
        if gamma < 0:
            raise ValueError("gamma must be non-negative")
        self.table = table
        self.type_names = list(type_names)
        self.integration = integration
        self.et_kind = et_kind
        self.gamma = gamma
        T, d, h, n = len(type_names), table.dim, cfg.hidden, cfg.n_filters
        out_dim = n_relations + 1
        rng = rng_stream(seed, "init:re")

        self.filters: list[Parameter] = []
        self.part_filters: list[list[Parameter]] = []
        if cfg.kind == "contextwise":
            if cfg.share_filters:
                self.filters = make_filters(rng, "re.conv", n, cfg.widths, d)
                self.part_filters = [self.filters] * 3
            else:
                self.part_filters = [make_filters(rng, f"re.conv.{part}", n, cfg.widths, d)
                                     for part in PARTS]
                self.filters = [H for bank in self.part_filters for H in bank]
            phi = 3 * cfg.k * n * len(cfg.widths)
        elif cfg.kind == "piecewise":
            self.filters = make_filters(rng, "re.conv", n, cfg.widths, d)
            phi = 3 * n * len(cfg.widths)
        else:
            phi = 2 * d
        self.phi_dim = phi

        # type-side parameters come from their own stream so the encoder
        # initialization is identical across integrations
        trng = rng_stream(seed, "init:re.types")
        self.W_t = None
        self.W_t_fixed = None
        if integration == "none":
            tau = 0
        elif integration == "binary":
            tau = T
        elif integration == "weighted":
            self.W_t_fixed = np.stack([table.vector(t) for t in type_names], axis=1)  # (d, T)
            tau = d
        else:
            tau = cfg.tau
            self.W_t = glorot(trng, (tau, T), "re.W_t")
        self.tau = tau

        self.W_h = None
        if cfg.kind == "piecewise":
            self.W_out = glorot(rng, (out_dim, phi), "re.W_out")
        else:
            self.W_h = glorot(rng, (h, phi + 2 * tau), "re.W_h", fan_in=phi + 2 * tau, fan_out=h)
            self.W_out = glorot(rng, (out_dim, h), "re.W_out")
        self.b_out = zeros((out_dim,), "re.b_out")

        self.et_ctx: ETModel | None = None
        self.et_emb: EntEmbModel | None = None
        if integration == "joint-train":
            if et_kind in ("context", "dual"):
                # the typing windows are cut from the RE sentence, so they share its width
                ecfg = replace(et_cfg or ETEncoderConfig(), window=cfg.window)
                if et_kind == "dual":
                    ecfg = replace(ecfg, kind="mlp")
                self.et_ctx = ETModel(table, type_names, ecfg, seed=seed, prefix="joint.et")
            if et_kind in ("entemb", "dual"):
                hid = et_cfg.hidden if et_cfg else 100
                self.et_emb = EntEmbModel(table, T, hidden=hid, seed=seed, prefix="joint.entemb")

    def parameters(self) -> list[Parameter]:
        ps = list(self.filters)
        if self.W_t is not None:
            ps.append(self.W_t)
        if self.W_h is not None:
            ps.append(self.W_h)
        ps += [self.W_out, self.b_out]
        if self.et_ctx is not None:
            ps += self.et_ctx.parameters()
        if self.et_emb is not None:
            ps += self.et_emb.parameters()
        return ps

    def re_parameters(self) -> list[Parameter]:
        ps = list(self.filters) + ([self.W_h] if self.W_h is not None else []) + [self.W_out, self.b_out]
        return ps + ([self.W_t] if self.W_t is not None else [])

    def state_dict(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state):
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name!r}")
            p.data[...] = state[p.name]

    # --------------------------------------------------------- encoders
    def features(self, b: dict) -> Tensor:
        cfg = self.cfg
        if cfg.kind == "contextwise":
            parts = [conv_pool(lookup(self.table.vectors, b[k]), bank, cfg.k)
                     for k, bank in zip(PARTS, self.part_filters)]
            return ops.concat(parts, axis=1)
        if cfg.kind == "piecewise":
            return self._piecewise(b)
        ents = b["ents"]
        return Tensor(self.table.vectors[ents].reshape(len(ents), -1))

    def _piecewise(self, b: dict) -> Tensor:
        x = lookup(self.table.vectors, b["sent"])
        N, S = b["sent"].shape
        p1 = self.cfg.window
        p2 = p1 + b["valid"] - self.cfg.window - 1 - 1  # e2 position per row
        feats = []
        for H in self.filters:
            w = H.shape[1]
            fm = ops.relu(ops.conv1d(x, H))  # (N, L, n)
            L = S - w + 1
            pos = np.arange(L)[None, :]
            last = (b["valid"] - w)[:, None]
            pieces = [pos <= p1, (pos > p1) & (pos <= p2[:, None]), (pos > p2[:, None]) & (pos <= last)]
            for m in pieces:
                mask = np.broadcast_to(m[:, :, None], fm.shape).astype(np.float64)
                feats.append(ops.masked_max(fm, mask, axis=1))
        return ops.concat(feats, axis=1)

    # ------------------------------------------------------ type inputs
    def type_repr(self, p) -> Tensor | None:
        """Type representation for a batch of probability vectors (N, T)."""
        ig = self.integration
        if ig == "none":
            return None
        if isinstance(p, np.ndarray):
            _check_probs(p)
            if ig in ("binary", "binary-hidden"):
                p = binarize(p)
            p = Tensor(p)
        if ig == "binary":
            return p
        if ig == "weighted":
            return ops.matmul(p, Tensor(self.W_t_fixed.T))
        return ops.tanh(ops.matmul(p, ops.transpose(self.W_t)))

    def joint_type_probs(self, b: dict):
        """Context-level typing of both arguments: returns ([P1, P2], entemb probs or None)."""
        ctx = emb = None
        if self.et_ctx is not None:
            et = b["et"]  # (N, 2 args, 2 sides, W)
            ctx = [self.et_ctx.context_probs(self.et_ctx.encode(et[:, k])) for k in (0, 1)]
        if self.et_emb is not None:
            ents = b["ents"]
            emb = [self.et_emb.probs(self.table.vectors[ents[:, k]]) for k in (0, 1)]
        return ctx, emb

    def context_log_probs(self, b: dict, joint=None) -> Tensor:
        phi = self.features(b)
        if self.cfg.kind == "piecewise":
            return ops.log_softmax(ops.add(ops.matmul(phi, ops.transpose(self.W_out)), self.b_out))
        inputs = [phi]
        if self.integration == "joint-train":
            ctx, emb = joint if joint is not None else self.joint_type_probs(b)
            if ctx is not None and emb is not None:
                probs = [ops.mul(ops.add(c, e), 0.5) for c, e in zip(ctx, emb)]
            else:
                probs = ctx if ctx is not None else emb
            inputs += [self.type_repr(probs[0]), self.type_repr(probs[1])]
        elif self.integration != "none":
            inputs += [self.type_repr(b["p1"]), self.type_repr(b["p2"])]
        full = inputs[0] if len(inputs) == 1 else ops.concat(inputs, axis=1)
        c = ops.tanh(ops.matmul(full, ops.transpose(self.W_h)))
        return ops.log_softmax(ops.add(ops.matmul(c, ops.transpose(self.W_out)), self.b_out))

    def relation_probs(self, b: dict) -> Tensor:
        """Per-context relation distribution (N, R+1)."""
        return Tensor(np.exp(self.context_log_probs(b).data))

    def pair_probs(self, b: dict) -> np.ndarray:
        """``P(r|z) = max_i P(r|c_i)``: (bags, R+1)."""
        p = np.exp(self.context_log_probs(b).data)
        return np.maximum.reduceat(p, b["seg"].starts, axis=0)

    # ------------------------------------------------------------ losses
    def losses(self, b: dict, per_instance: bool = False) -> dict[str, Tensor]:
        seg = b["seg"]
        joint = self.joint_type_probs(b) if self.integration == "joint-train" else None
        logp = self.context_log_probs(b, joint)
        gold_ctx = ops.pick(logp, b["gold"][seg.ids])
        if per_instance:
            re_loss = ops.neg(ops.sum(gold_ctx))
        else:
            re_loss = ops.neg(ops.sum(ops.segment_max(gold_ctx, seg)))
        out = {"re": re_loss}
        if joint is not None:
            ctx, emb = joint
            y = [b["y1"][seg.ids], b["y2"][seg.ids]]
            if ctx is not None:
                out["et_ctx1"] = ops.bce(y[0], ctx[0])
                out["et_ctx2"] = ops.bce(y[1], ctx[1])
            if emb is not None:
                out["et_emb1"] = ops.bce(y[0], emb[0])
                out["et_emb2"] = ops.bce(y[1], emb[1])
        return out

    def total_loss(self, b: dict, per_instance: bool = False) -> Tensor:
        parts = self.losses(b, per_instance)
        total = ops.mul(parts["re"], self.gamma) if self.integration == "joint-train" else parts["re"]
        for k, v in parts.items():
            if k != "re":
                total = ops.add(total, v)
        return total


# ------------------------------------------------------------- train/predict

def predict_pairs(model: REModel, data: RelData, chunk: int = 512) -> np.ndarray:
    out = []
    i = 0
    while i < len(data):
        j, n = i, 0
        while j < len(data) and (n == 0 or n + len(data.left[j]) <= chunk):
            n += len(data.left[j])
            j += 1
        out.append(model.pair_probs(data.batch(range(i, j))))
        i = j
    return np.concatenate(out) if out else np.zeros((0, model.W_out.shape[0]))


def pr_area(model: REModel, data: RelData) -> float:
    probs = predict_pairs(model, data)
    return relation_pr(probs, data.gold, model.W_out.shape[0] - 1)[2]


def train_relation(model: REModel, train: RelData, dev: RelData | None = None,
                   cfg: TrainConfig | None = None, per_instance: bool = False) -> History:
    """MI (max over contexts) training; joint models add the typing costs.

    Early stopping tracks dev PR area when ``dev`` is given.
    """
    cfg = cfg or TrainConfig()
    rng = rng_stream(cfg.seed, "shuffle")
    sub_rng = rng_stream(cfg.seed, "subsample")

    def loss_fn(idx):
        return model.total_loss(train.batch(idx, sub_rng, cfg.q_max), per_instance)

    dev_fn = (lambda: pr_area(model, dev)) if dev is not None and len(dev) else None
    return fit(model.parameters(), len(train), loss_fn, cfg, rng, dev_fn)


def train_mi(model, train, dev=None, cfg=None) -> History:
    return train_relation(model, train, dev, cfg)


def train_joint(model, train, dev=None, cfg=None) -> History:
    if model.integration != "joint-train":
        raise ValueError("train_joint needs a joint-train model")
    return train_relation(model, train, dev, cfg)


def relation_loss(model: REModel, data: RelData, per_instance: bool = False) -> float:
    return model.total_loss(data.batch(range(len(data))), per_instance).item()


# ------------------------------------------------------------- score files

def write_pair_scores(path, data: RelData, probs: np.ndarray, names: list[str]) -> None:
    """``e1<TAB>e2<TAB>relation<TAB>score`` for non-NA relations, score descending."""
    na = len(names) - 1
    rows = []
    for inst, row in zip(data.instances, probs):
        for r in range(len(names)):
            if r != na:
                rows.append((-float(row[r]), inst.e1, inst.e2, names[r]))
    rows.sort(key=lambda x: x[0])
    Path(path).write_text("".join(f"{a}\t{b}\t{n}\t{-s!r}\n" for s, a, b, n in rows), encoding="utf-8")
