"""Word, entity and type vectors in one space.

Vectors come from a PPMI co-occurrence matrix factorized by truncated SVD,
trained on a stream where every sentence appears twice: once verbatim and
once with its train/dev entities replaced by their notable type.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import PAD, UNK, Corpus

log = logging.getLogger(__name__)


class EmbeddingFormatError(ValueError):
    pass


class RankError(ValueError):
    pass


@dataclass
class EmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray
    zero_rows: list[str] = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __contains__(self, token: str) -> bool:
        return token in self.vocab

    def __len__(self) -> int:
        return len(self.vocab)

    def index(self, token: str) -> int:
        return self.vocab.get(token, self.vocab[UNK])

    def ids(self, tokens) -> list[int]:
        unk = self.vocab[UNK]
        return [self.vocab.get(t, unk) for t in tokens]

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self.index(token)]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.vectors).tobytes()).hexdigest()

    def with_specials(self) -> "EmbeddingTable":
        """Append zero rows for ``<PAD>``/``<UNK>`` if they are missing."""
        missing = [t for t in (PAD, UNK) if t not in self.vocab]
        if not missing:
            return self
        vocab = dict(self.vocab)
        for t in missing:
            vocab[t] = len(vocab)
        vectors = np.vstack([self.vectors, np.zeros((len(missing), self.dim))])
        return EmbeddingTable(vocab, vectors, list(self.zero_rows))


def duplicate_with_types(corpus: Corpus) -> list[list[str]]:
    """Two copies of each sentence; the second swaps train/dev entities for their notable type."""
    replace = {e.id: corpus.types[e.notable] for e in corpus.entities.values() if e.split != "test"}
    stream = []
    for toks, _split in corpus.sentences():
        stream.append(list(toks))
        stream.append([replace.get(t, t) for t in toks])
    return stream


def cooccurrence(stream, window: int = 5) -> tuple[dict[str, int], np.ndarray]:
    vocab: dict[str, int] = {}
    for sent in stream:
        for t in sent:
            if t not in vocab:
                vocab[t] = len(vocab)
    V = len(vocab)
    ids, sid = [], []
    for k, sent in enumerate(stream):
        ids.extend(vocab[t] for t in sent)
        sid.extend([k] * len(sent))
    ids = np.asarray(ids, dtype=np.int64)
    sid = np.asarray(sid, dtype=np.int64)
    flat = np.zeros(V * V)
    for off in range(1, window + 1):
        same = sid[off:] == sid[:-off]
        a, b = ids[:-off][same], ids[off:][same]
        flat += np.bincount(a * V + b, minlength=V * V)
        flat += np.bincount(b * V + a, minlength=V * V)
    return vocab, flat.reshape(V, V)


def ppmi(counts: np.ndarray) -> np.ndarray:
    total = counts.sum()
    row = counts.sum(axis=1, keepdims=True)
    col = counts.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(counts * total / (row * col))
    pmi[~np.isfinite(pmi)] = 0.0
    return np.maximum(pmi, 0.0)


def train_embeddings(stream, d: int = 100, window: int = 5) -> EmbeddingTable:
    """PPMI + rank-``d`` SVD; a token's vector is its word plus context factor, L2-normalized."""
    if not stream or not any(stream):
        raise ValueError("empty token stream")
    vocab, counts = cooccurrence(stream, window)
    if len(vocab) < d:
        raise RankError(f"vocabulary of {len(vocab)} tokens is smaller than d={d}; use a smaller d")
    M = ppmi(counts)
    U, S, Vt = np.linalg.svd(M)
    U, S, Vt = U[:, :d], S[:d], Vt[:d]
    # fix the sign of each factor so repeated runs agree bit-for-bit
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(d)])
    flip[flip == 0] = 1.0
    root = np.sqrt(S)
    vec = (U * flip) * root + (Vt.T * flip) * root
    norms = np.linalg.norm(vec, axis=1)
    zero = norms < 1e-12
    vec[zero] = 0.0
    vec[~zero] /= norms[~zero, None]
    inv = list(vocab)
    flagged = [inv[i] for i in np.flatnonzero(M.sum(axis=1) == 0)]
    if flagged:
        log.warning("%d tokens never co-occur with anything and get zero vectors", len(flagged))
    return EmbeddingTable(vocab, vec, flagged).with_specials()


def embeddings_for_corpus(corpus: Corpus, d: int = 100, window: int = 5) -> EmbeddingTable:
    table = train_embeddings(duplicate_with_types(corpus), d=d, window=window)
    missing = [t for t in corpus.types if t not in table]
    if missing:
        log.warning("no vector for types %s", ", ".join(missing))
    return table


def export_word2vec_text(table: EmbeddingTable, path) -> None:
    lines = [f"{len(table.vocab)} {table.dim}"]
    for tok, i in table.vocab.items():
        lines.append(tok + " " + " ".join(repr(float(v)) for v in table.vectors[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def import_word2vec_text(path, expected_dim: int | None = None) -> EmbeddingTable:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise EmbeddingFormatError(f"{path}: empty file")
    try:
        V, d = (int(x) for x in lines[0].split())
    except ValueError:
        raise EmbeddingFormatError(f"{path}:1: header must be 'V d'") from None
    if expected_dim is not None and d != expected_dim:
        raise EmbeddingFormatError(f"{path}: dimension {d} does not match configured {expected_dim}")
    if len(lines) - 1 != V:
        raise EmbeddingFormatError(f"{path}: header promises {V} rows, found {len(lines) - 1}")
    vocab: dict[str, int] = {}
    vectors = np.zeros((V, d))
    for no, line in enumerate(lines[1:], 2):
        parts = line.rstrip(" ").split(" ")
        tok, vals = parts[0], parts[1:]
        if len(vals) != d:
            raise EmbeddingFormatError(f"{path}:{no}: expected {d} values, found {len(vals)}")
        if tok in vocab:
            raise EmbeddingFormatError(f"{path}:{no}: duplicate token {tok!r}")
        try:
            vectors[len(vocab)] = [float(v) for v in vals]
        except ValueError:
            raise EmbeddingFormatError(f"{path}:{no}: non-numeric value") from None
        vocab[tok] = len(vocab)
    zero = [t for t, i in vocab.items() if not vectors[i].any() and t not in (PAD, UNK)]
    return EmbeddingTable(vocab, vectors, zero).with_specials()
