"""Entities, typed contexts, relation instances, file I/O and a synthetic generator.

On-disk layout of a corpus directory (UTF-8, LF line endings)::

    types.txt       one type name per line, line index = type id
    relations.txt   one relation name per line (NA is implicit, id R)
    entities.tsv    entity_id  notable_type  type,type,...  train|dev|test
    contexts.tsv    entity_id  <W left tokens>  <W right tokens>
    relations.tsv   e1_id  e2_id  relation|NA  left  middle  right

Left/middle/right spans in ``relations.tsv`` exclude the two arguments; the
encoders add them back (the parts overlap on the arguments).  Tokens equal
to an entity id are treated as entity mentions: they are checked against
the split-containment rule and then replaced by the entity's notable type.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn.init import rng_stream

log = logging.getLogger(__name__)

PAD = "<PAD>"
UNK = "<UNK>"
NA = "NA"
SPLITS = ("train", "dev", "test")
DEFAULT_WINDOW = 5


class CorpusError(ValueError):
    """Malformed corpus file; message carries file and line number."""


class ContainmentError(CorpusError):
    """A sentence mentions an entity from a split it may not see."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Entity:
    id: str
    types: tuple[int, ...]
    notable: int
    split: str
    frequency: int = 0


@dataclass(frozen=True)
class Context:
    entity: str
    left: tuple[str, ...]
    right: tuple[str, ...]


@dataclass
class Bag:
    entity: str
    contexts: list[Context]
    labels: np.ndarray

    def __post_init__(self):
        if not self.contexts:
            raise ValueError(f"bag for {self.entity} has no contexts")


@dataclass(frozen=True)
class RelContext:
    left: tuple[str, ...]
    middle: tuple[str, ...]
    right: tuple[str, ...]


@dataclass
class RelationInstance:
    e1: str
    e2: str
    relation: int  # index into relations, or R for NA
    contexts: list[RelContext]

    def __post_init__(self):
        if not self.contexts:
            raise ValueError(f"relation instance {self.e1},{self.e2} has no contexts")


@dataclass
class Corpus:
    types: list[str]
    relations: list[str]
    entities: dict[str, Entity]
    contexts: list[Context]
    instances: list[RelationInstance] = field(default_factory=list)
    window: int = DEFAULT_WINDOW

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def na_id(self) -> int:
        return len(self.relations)

    @property
    def relation_names(self) -> list[str]:
        return self.relations + [NA]

    def type_id(self, name: str) -> int:
        return self.types.index(name)

    def label_vector(self, entity_id: str) -> np.ndarray:
        y = np.zeros(self.n_types)
        y[list(self.entities[entity_id].types)] = 1.0
        return y

    def bags(self, split: str | None = None) -> list[Bag]:
        by_entity: dict[str, list[Context]] = defaultdict(list)
        for c in self.contexts:
            by_entity[c.entity].append(c)
        out = []
        for eid, ent in self.entities.items():
            if split is not None and ent.split != split:
                continue
            if by_entity.get(eid):
                out.append(Bag(eid, by_entity[eid], self.label_vector(eid)))
        return out

    def relation_bags(self, split: str | None = None) -> list[RelationInstance]:
        return [r for r in self.instances
                if split is None or self.entities[r.e1].split == split]

    def sentences(self) -> list[tuple[list[str], str]]:
        """Token sequences with their split, for embedding training."""
        out = []
        for c in self.contexts:
            toks = [t for t in c.left if t != PAD] + [c.entity] + [t for t in c.right if t != PAD]
            out.append((toks, self.entities[c.entity].split))
        for r in self.instances:
            split = self.entities[r.e1].split
            for c in r.contexts:
                out.append((list(c.left) + [r.e1] + list(c.middle) + [r.e2] + list(c.right), split))
        return out


def frequency_bucket(entity: Entity, head: int = 100, tail: int = 5) -> str:
    if entity.frequency > head:
        return "head"
    if entity.frequency < tail:
        return "tail"
    return "mid"


def split_bags(corpus: Corpus) -> dict[str, list[Bag]]:
    return {s: corpus.bags(s) for s in SPLITS}


# ------------------------------------------------------------------ loading

def _read_lines(path: Path) -> list[str]:
    text = path.read_text(encoding="utf-8")
    if not text:
        return []
    return text.split("\n")[:-1] if text.endswith("\n") else text.split("\n")


def _names(path: Path) -> list[str]:
    names = _read_lines(path)
    if len(set(names)) != len(names):
        raise CorpusError(f"{path}: duplicate names")
    return names


def _toks(field_: str) -> tuple[str, ...]:
    return tuple(field_.split(" ")) if field_ else ()


def _allowed(sentence_split: str, mention_split: str) -> bool:
    if sentence_split == "train":
        return mention_split == "train"
    if sentence_split == "dev":
        return mention_split != "test"
    return True


def load_corpus(path, window: int = DEFAULT_WINDOW) -> Corpus:
    root = Path(path)
    types = _names(root / "types.txt")
    rel_file = root / "relations.txt"
    relations = _names(rel_file) if rel_file.exists() else []
    tindex = {n: i for i, n in enumerate(types)}
    rindex = {n: i for i, n in enumerate(relations)}
    rindex[NA] = len(relations)

    raw_entities: dict[str, tuple] = {}
    efile = root / "entities.tsv"
    for no, line in enumerate(_read_lines(efile), 1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise CorpusError(f"{efile}:{no}: expected 4 fields, got {len(parts)}")
        eid, notable, gold, split = parts
        if split not in SPLITS:
            raise CorpusError(f"{efile}:{no}: unknown split {split!r}")
        try:
            gold_ids = tuple(tindex[g] for g in gold.split(","))
            notable_id = tindex[notable]
        except KeyError as exc:
            raise CorpusError(f"{efile}:{no}: unknown type {exc.args[0]!r}") from None
        if notable_id not in gold_ids:
            raise CorpusError(f"{efile}:{no}: notable type not among gold types")
        if eid in raw_entities:
            raise CorpusError(f"{efile}:{no}: duplicate entity {eid!r}")
        raw_entities[eid] = (gold_ids, notable_id, split)

    violations: list[str] = []

    def resolve(tokens, sentence_split, where):
        out = []
        for t in tokens:
            ent = raw_entities.get(t)
            if ent is None:
                out.append(t)
                continue
            if not _allowed(sentence_split, ent[2]):
                violations.append(f"{where}: {sentence_split} sentence mentions {ent[2]} entity {t}")
            out.append(types[ent[1]])
        return tuple(out)

    contexts = []
    cfile = root / "contexts.tsv"
    lines = _read_lines(cfile) if cfile.exists() else []
    if not lines:
        log.warning("%s: no contexts; corpus has entities but zero bags", cfile)
    for no, line in enumerate(lines, 1):
        parts = line.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{cfile}:{no}: expected 3 fields, got {len(parts)}")
        eid = parts[0]
        if eid not in raw_entities:
            raise CorpusError(f"{cfile}:{no}: unknown entity {eid!r}")
        left, right = _toks(parts[1]), _toks(parts[2])
        if len(left) != window or len(right) != window:
            raise CorpusError(f"{cfile}:{no}: each side needs exactly {window} tokens")
        split = raw_entities[eid][2]
        contexts.append(Context(eid, resolve(left, split, f"{cfile}:{no}"),
                                resolve(right, split, f"{cfile}:{no}")))

    by_pair: dict[tuple[str, str], RelationInstance] = {}
    rfile = root / "relations.tsv"
    for no, line in enumerate(_read_lines(rfile) if rfile.exists() else [], 1):
        parts = line.split("\t")
        if len(parts) != 6:
            raise CorpusError(f"{rfile}:{no}: expected 6 fields, got {len(parts)}")
        e1, e2, rel = parts[:3]
        for e in (e1, e2):
            if e not in raw_entities:
                raise CorpusError(f"{rfile}:{no}: unknown entity {e!r}")
        if rel not in rindex:
            raise CorpusError(f"{rfile}:{no}: unknown relation {rel!r}")
        s1, s2 = raw_entities[e1][2], raw_entities[e2][2]
        if s1 != s2:
            violations.append(f"{rfile}:{no}: pair spans splits {s1}/{s2}")
        where = f"{rfile}:{no}"
        ctx = RelContext(*(resolve(_toks(p), s1, where) for p in parts[3:]))
        inst = by_pair.get((e1, e2))
        if inst is None:
            by_pair[(e1, e2)] = RelationInstance(e1, e2, rindex[rel], [ctx])
        elif inst.relation != rindex[rel]:
            raise CorpusError(f"{rfile}:{no}: pair {e1},{e2} has more than one relation")
        else:
            inst.contexts.append(ctx)

    if violations:
        raise ContainmentError("split containment violated:\n" + "\n".join(violations))

    freq: dict[str, int] = defaultdict(int)
    for c in contexts:
        freq[c.entity] += 1
    entities = {eid: Entity(eid, g, n, s, freq[eid]) for eid, (g, n, s) in raw_entities.items()}
    return Corpus(types, relations, entities, contexts, list(by_pair.values()), window)


def save_corpus(corpus: Corpus, path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)

    def write(name, rows):
        (root / name).write_text("".join(r + "\n" for r in rows), encoding="utf-8")

    write("types.txt", corpus.types)
    write("relations.txt", corpus.relations)
    write("entities.tsv", (
        "\t".join([e.id, corpus.types[e.notable], ",".join(corpus.types[t] for t in e.types), e.split])
        for e in corpus.entities.values()))
    write("contexts.tsv", (
        "\t".join([c.entity, " ".join(c.left), " ".join(c.right)]) for c in corpus.contexts))
    names = corpus.relation_names
    write("relations.tsv", (
        "\t".join([r.e1, r.e2, names[r.relation], " ".join(c.left), " ".join(c.middle), " ".join(c.right)])
        for r in corpus.instances for c in r.contexts))


# ---------------------------------------------------------------- synthetic

@dataclass
class SynthConfig:
    n_types: int = 10
    n_relations: int = 10
    n_entities: int = 500
    contexts_min: int = 3
    contexts_max: int = 12
    noise_rate: float = 0.5
    vocab_size: int = 400
    triggers_per_type: int = 5
    seed: int = 0
    window: int = DEFAULT_WINDOW
    max_types: int = 3
    # fraction of noisy contexts that carry a trigger of a type the entity
    # does not have (the mention was linked to the wrong entity)
    mislink_rate: float = 0.05
    n_pairs: int = 2000
    pair_contexts_min: int = 1
    pair_contexts_max: int = 4
    relation_noise: float = 0.3
    na_fraction: float = 0.3
    na_compatible: float = 0.8  # share of NA pairs whose argument types fit some relation
    relation_triggers: int = 4
    # probability that an argument's type trigger appears next to it in an RE sentence
    arg_cue_rate: float = 0.5
    middle_max: int = 6
    split_fractions: tuple[float, float, float] = (0.5, 0.2, 0.3)

    def validate(self) -> None:
        counts = ("n_types", "n_entities", "contexts_min", "contexts_max", "vocab_size",
                  "triggers_per_type", "window", "max_types", "relation_triggers", "middle_max")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_relations", "n_pairs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("noise_rate", "mislink_rate", "relation_noise", "na_fraction", "arg_cue_rate",
                     "na_compatible"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.contexts_min > self.contexts_max or self.pair_contexts_min > self.pair_contexts_max:
            raise ConfigError("context count range is empty")
        if self.max_types > self.n_types:
            raise ConfigError("max_types exceeds n_types")
        if self.contexts_min < self.max_types:
            raise ConfigError(
                f"contexts_min={self.contexts_min} cannot cover up to {self.max_types} gold types "
                "with one trigger-bearing context each")
        if 2 * self.max_types > 2 * self.window:
            raise ConfigError("window too small to hold the trigger tokens")
        if self.n_relations and self.n_types < 2:
            raise ConfigError("relations need at least two types")


def type_name(t: int) -> str:
    return f"/type{t:02d}"


def _filler(rng, cfg, n):
    return [f"w{i:03d}" for i in rng.integers(0, cfg.vocab_size, size=n)]


def _type_triggers(t, cfg):
    return [f"T{t:02d}_{j}" for j in range(cfg.triggers_per_type)]


def generate_synthetic(cfg: SynthConfig) -> Corpus:
    """Distantly supervised corpus whose noise is known by construction.

    Each context either expresses a non-empty subset of its entity's gold
    types through trigger tokens (probability ``1 - noise_rate``) or none of
    them.  Every (entity, gold type) pair gets at least one trigger-bearing
    context.  Relation pairs plant relation triggers in the middle span;
    relations come in groups of two that share triggers and differ only in
    the type of their first argument.
    """
    cfg.validate()
    rng = rng_stream(cfg.seed, "corpus")
    T, W = cfg.n_types, cfg.window
    types = [type_name(t) for t in range(T)]

    order = rng.permutation(cfg.n_entities)
    n_train = int(round(cfg.split_fractions[0] * cfg.n_entities))
    n_dev = int(round(cfg.split_fractions[1] * cfg.n_entities))
    split_of = {}
    for rank, i in enumerate(order):
        split_of[i] = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"

    entities: dict[str, Entity] = {}
    contexts: list[Context] = []
    for i in range(cfg.n_entities):
        eid = f"E{i:04d}"
        k = int(rng.integers(1, cfg.max_types + 1))
        gold = sorted(int(t) for t in rng.choice(T, size=k, replace=False))
        notable = int(rng.choice(gold))
        q = int(rng.integers(cfg.contexts_min, cfg.contexts_max + 1))

        n_noise = int(rng.binomial(q, cfg.noise_rate))
        if cfg.noise_rate < 1.0:
            n_noise = min(n_noise, q - 1)
        noisy = np.zeros(q, dtype=bool)
        noisy[rng.choice(q, size=n_noise, replace=False)] = True
        expressed: list[set[int]] = []
        for j in range(q):
            if noisy[j]:
                expressed.append(set())
                continue
            while True:
                sub = {t for t in gold if rng.random() < 0.5}
                if sub:
                    break
            expressed.append(sub)
        for t in gold:
            if any(t in s for s in expressed):
                continue
            carriers = [j for j in range(q) if expressed[j]]
            if cfg.noise_rate < 1.0 and carriers:
                expressed[int(rng.choice(carriers))].add(t)
            else:
                free = [j for j in range(q) if not expressed[j]]
                expressed[int(rng.choice(free))] = {t}

        others = [t for t in range(T) if t not in gold]
        for j in range(q):
            cue = sorted(expressed[j])
            if not cue and others and rng.random() < cfg.mislink_rate:
                cue = [int(rng.choice(others))]
            toks = _filler(rng, cfg, 2 * W)
            slots = rng.permutation(2 * W)
            pos = 0
            for t in cue:
                trig = _type_triggers(t, cfg)
                for _ in range(int(rng.integers(1, 3))):
                    toks[slots[pos]] = trig[int(rng.integers(len(trig)))]
                    pos += 1
            contexts.append(Context(eid, tuple(toks[:W]), tuple(toks[W:])))
        entities[eid] = Entity(eid, tuple(gold), notable, split_of[i], q)

    relations, instances = _synthetic_relations(cfg, rng, entities)
    return Corpus(types, relations, entities, contexts, instances, W)


def relation_signatures(cfg: SynthConfig) -> list[tuple[int, int]]:
    """(first-arg type, second-arg type) per relation; fixed by the type count."""
    rng = rng_stream(cfg.seed, "signatures")
    sigs = []
    for g in range((cfg.n_relations + 1) // 2):
        a = rng.choice(cfg.n_types, size=3, replace=False)
        sigs.append((int(a[0]), int(a[2])))
        sigs.append((int(a[1]), int(a[2])))
    return sigs[:cfg.n_relations]


def _synthetic_relations(cfg, rng, entities):
    R = cfg.n_relations
    if R == 0 or cfg.n_pairs == 0:
        return [f"rel{r:02d}" for r in range(R)], []
    sigs = relation_signatures(cfg)
    names = [f"rel{r:02d}" for r in range(R)]
    by_split_type: dict[tuple[str, int], list[str]] = defaultdict(list)
    by_split: dict[str, list[str]] = defaultdict(list)
    for e in entities.values():
        by_split[e.split].append(e.id)
        for t in e.types:
            by_split_type[(e.split, t)].append(e.id)

    instances = []
    seen = set()
    for _ in range(cfg.n_pairs):
        split = SPLITS[int(rng.choice(3, p=cfg.split_fractions))]
        for _attempt in range(20):
            if rng.random() < cfg.na_fraction:
                rel = R
                if rng.random() < cfg.na_compatible:
                    a, b = sigs[int(rng.integers(R))]
                    p1, p2 = by_split_type[(split, a)], by_split_type[(split, b)]
                    if not p1 or not p2:
                        continue
                    e1, e2 = p1[int(rng.integers(len(p1)))], p2[int(rng.integers(len(p2)))]
                    if e1 == e2:
                        continue
                else:
                    pool = by_split[split]
                    if len(pool) < 2:
                        continue
                    e1, e2 = (pool[i] for i in rng.choice(len(pool), size=2, replace=False))
            else:
                rel = int(rng.integers(R))
                a, b = sigs[rel]
                p1, p2 = by_split_type[(split, a)], by_split_type[(split, b)]
                if not p1 or not p2:
                    continue
                e1, e2 = p1[int(rng.integers(len(p1)))], p2[int(rng.integers(len(p2)))]
                if e1 == e2:
                    continue
            if (e1, e2) in seen:
                continue
            seen.add((e1, e2))
            q = int(rng.integers(cfg.pair_contexts_min, cfg.pair_contexts_max + 1))
            sig = sigs[rel] if rel < R else None
            ctxs = [_relation_context(cfg, rng, rel, entities[e1], entities[e2], sig) for _ in range(q)]
            instances.append(RelationInstance(e1, e2, rel, ctxs))
            break
    return names, instances


def _relation_context(cfg, rng, rel, ent1, ent2, sig=None):
    """One sentence for a pair; argument cues name the relation's signature types."""
    W = cfg.window
    cue1 = rng.random() < cfg.arg_cue_rate
    cue2 = rng.random() < cfg.arg_cue_rate
    left = _filler(rng, cfg, max(int(rng.integers(0, W + 1)), int(cue1)))
    right = _filler(rng, cfg, max(int(rng.integers(0, W + 1)), int(cue2)))
    middle = _filler(rng, cfg, int(rng.integers(1, cfg.middle_max + 1)))
    if rel < cfg.n_relations and rng.random() >= cfg.relation_noise:
        group = rel // 2
        for _ in range(int(rng.integers(1, 3))):
            pos = int(rng.integers(len(middle)))
            middle[pos] = f"R{group:02d}_{int(rng.integers(cfg.relation_triggers))}"
    if cue1:
        t = sig[0] if sig else int(rng.choice(ent1.types))
        left[-1 - int(rng.integers(min(2, len(left))))] = str(rng.choice(_type_triggers(t, cfg)))
    if cue2:
        t = sig[1] if sig else int(rng.choice(ent2.types))
        right[int(rng.integers(min(2, len(right))))] = str(rng.choice(_type_triggers(t, cfg)))
    return RelContext(tuple(left), tuple(middle), tuple(right))
