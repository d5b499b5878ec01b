import math

import numpy as np
import pytest

from bagnet.corpus import PAD, UNK, SynthConfig, generate_synthetic
from bagnet.embeddings import (EmbeddingFormatError, RankError, cooccurrence, duplicate_with_types,
                               embeddings_for_corpus, export_word2vec_text, import_word2vec_text, ppmi,
                               train_embeddings)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(SynthConfig(n_entities=150, n_pairs=100, seed=5, mislink_rate=0.0))


@pytest.fixture(scope="module")
def table(corpus):
    return embeddings_for_corpus(corpus, d=30)


def test_cooccurrence_matches_loops():
    stream = [["a", "b", "c", "a"], ["c", "d"], ["a"]]
    vocab, M = cooccurrence(stream, window=2)
    ref = np.zeros_like(M)
    for sent in stream:
        for i, t in enumerate(sent):
            for j, u in enumerate(sent):
                if i != j and abs(i - j) <= 2:
                    ref[vocab[t], vocab[u]] += 1
    assert np.array_equal(M, ref)


def test_ppmi_matches_formula():
    rng = np.random.default_rng(0)
    C = rng.integers(0, 4, size=(6, 6)).astype(float)
    C = C + C.T
    P = ppmi(C)
    total = C.sum()
    for i in range(6):
        for j in range(6):
            if C[i, j] == 0:
                assert P[i, j] == 0
            else:
                val = math.log(C[i, j] * total / (C[i].sum() * C[:, j].sum()))
                assert P[i, j] == pytest.approx(max(val, 0.0), rel=1e-12, abs=1e-15)


def test_rows_are_unit_or_zero_and_specials_are_zero(table):
    norms = np.linalg.norm(table.vectors, axis=1)
    assert np.all((np.abs(norms - 1) < 1e-12) | (norms == 0))
    assert not table.vector(PAD).any() and not table.vector(UNK).any()
    assert table.index("never-seen") == table.index(UNK)


def test_training_is_deterministic(corpus, table):
    assert embeddings_for_corpus(corpus, d=30).checksum() == table.checksum()


def test_type_vectors_sit_near_their_triggers(corpus, table):
    own, other = [], []
    for t in range(corpus.n_types):
        v = table.vector(corpus.types[t])
        own.append(v @ table.vector(f"T{t:02d}_0"))
        other.append(v @ table.vector(f"T{(t + 1) % corpus.n_types:02d}_0"))
    assert np.mean(own) > np.mean(other) + 0.2


def test_duplication_replaces_only_train_and_dev_entities(corpus):
    stream = duplicate_with_types(corpus)
    assert len(stream) == 2 * len(corpus.sentences())
    replaced = set()
    for raw, dup in zip(stream[::2], stream[1::2]):
        replaced |= set(raw) - set(dup)
    splits = {corpus.entities[e].split for e in replaced}
    assert splits <= {"train", "dev"} and replaced


def test_rank_error_for_tiny_vocab():
    with pytest.raises(RankError):
        train_embeddings([["a", "b"], ["b", "c"]], d=10)


def test_isolated_token_gets_zero_row():
    tab = train_embeddings([["a", "b", "c"], ["lonely"], ["a", "c"]], d=2, window=1)
    assert "lonely" in tab.zero_rows and not tab.vector("lonely").any()


def test_word2vec_round_trip_is_exact(tmp_path, table):
    path = tmp_path / "emb.txt"
    export_word2vec_text(table, path)
    back = import_word2vec_text(path, expected_dim=30)
    assert back.vocab == table.vocab
    assert np.array_equal(back.vectors, table.vectors)


def test_word2vec_errors(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("2 3\na 1 2 3\nb 1 2 3\n")
    with pytest.raises(EmbeddingFormatError, match="dimension 3"):
        import_word2vec_text(p, expected_dim=4)
    p.write_text("2 3\na 1 2 3\nb 1 2\n")
    with pytest.raises(EmbeddingFormatError, match=":3:"):
        import_word2vec_text(p)
    p.write_text("2 3\na 1 2 3\na 1 2 3\n")
    with pytest.raises(EmbeddingFormatError, match="duplicate token 'a'"):
        import_word2vec_text(p)
