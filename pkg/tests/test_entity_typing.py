import numpy as np
import pytest

import oracles
from bagnet.corpus import Bag
from bagnet.entity_typing import (MODES, BagData, EntEmbModel, ETEncoderConfig, ETModel, bag_prob,
                                  context_type_prob, encode_context, join_models, mode_aggregations,
                                  predict, predict_entemb, read_predictions, train_entemb, train_typing,
                                  tuned_f1, typing_loss, write_predictions)
from bagnet.nn import ops
from bagnet.nn.gradcheck import grad_check
from bagnet.nn.tensor import Parameter
from bagnet.training import TrainConfig


@pytest.fixture(scope="module")
def world():
    return oracles.tiny_world()


def model_for(world, kind="cnn", attention=False, seed=0, **kw):
    corpus, table = world
    cfg = ETEncoderConfig(kind=kind, n_filters=2, hidden=3)
    return ETModel(table, corpus.types, cfg, attention=attention, seed=seed, **kw)


def test_mode_table():
    assert mode_aggregations("miml-max-avg") == ("max", "avg")
    assert mode_aggregations("ds") == (None, "avg")
    assert set(MODES) == {"ds", "miml-max", "miml-avg", "miml-max-avg", "miml-att"}
    with pytest.raises(ValueError):
        mode_aggregations("miml-min")


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        ETEncoderConfig(kind="rnn").validate()
    with pytest.raises(ValueError):
        ETEncoderConfig(widths=(7,)).validate()


def test_feature_dimensions(world):
    corpus, table = world
    ids = model_for(world).context_ids(corpus.contexts[:4])
    assert model_for(world).features(ids).shape == (4, 2 * 2 * 2)
    assert model_for(world, kind="mlp").features(ids).shape == (4, 2 * 5 * table.dim)


@pytest.mark.parametrize("kind, mode", [("mlp", "ds"), ("cnn", "ds"), ("cnn", "miml-max"),
                                        ("cnn", "miml-avg"), ("cnn", "miml-att"), ("mlp", "miml-att")])
def test_gradients(world, kind, mode):
    corpus, _ = world
    model = model_for(world, kind, attention=mode == "miml-att", seed=1)
    bags = oracles.random_bags(corpus, np.random.default_rng(0), 3, q_max=3)
    ids, seg, y = BagData(model, bags).batch(range(3))
    agg = MODES[mode][0]

    def loss():
        c = model.encode(ids)
        if agg is None:
            return ops.bce(y[seg.ids], model.context_probs(c))
        return ops.bce(y, model.bag_probs(c, seg, agg))

    assert grad_check(loss, model.parameters()) < 1e-4


def test_entemb_gradients(world):
    corpus, table = world
    model = EntEmbModel(table, corpus.n_types, hidden=4, seed=2)
    x = table.vectors[:5]
    y = (np.random.default_rng(1).random((5, corpus.n_types)) < 0.3).astype(float)
    assert grad_check(lambda: ops.bce(y, model.probs(x)), model.parameters()) < 1e-4


@pytest.mark.parametrize("agg", ["max", "avg", "att"])
def test_bag_probabilities_match_brute_force(world, agg):
    corpus, _ = world
    model = model_for(world, attention=True, seed=3)
    rng = np.random.default_rng(4)
    for bag in oracles.random_bags(corpus, rng, 40):
        C = model.encode(model.context_ids(bag.contexts)).data
        got = model.bag_probs(model.encode(model.context_ids(bag.contexts)), ops.Segments([len(C)]), agg).data[0]
        np.testing.assert_allclose(got, oracles.bag_probs(model, C, agg), rtol=0, atol=1e-12)


def test_attention_weights_sum_to_one(world):
    corpus, _ = world
    model = model_for(world, attention=True)
    bags = oracles.random_bags(corpus, np.random.default_rng(5), 30)
    ids, seg, _ = BagData(model, bags).batch(range(30))
    alpha = ops.segment_softmax(model.attention_scores(model.encode(ids)), seg).data
    sums = np.add.reduceat(alpha, seg.starts, axis=0)
    assert np.all(np.abs(sums - 1) <= 1e-12)


def test_min_avg_max_chain(world):
    corpus, _ = world
    model = model_for(world, seed=4)
    bags = oracles.random_bags(corpus, np.random.default_rng(6), 50)
    ids, seg, _ = BagData(model, bags).batch(range(50))
    c = model.encode(ids)
    P = model.context_probs(c).data
    lo = np.minimum.reduceat(P, seg.starts, axis=0)
    hi = np.maximum.reduceat(P, seg.starts, axis=0)
    avg, mx = model.bag_probs(c, seg, "avg").data, model.bag_probs(c, seg, "max").data
    assert np.all(lo <= avg) and np.all(avg <= mx) and np.array_equal(mx, hi)


@pytest.mark.parametrize("agg", ["max", "avg", "att"])
def test_bag_probs_ignore_context_order(world, agg):
    corpus, _ = world
    model = model_for(world, attention=True, seed=5)
    bag = oracles.random_bags(corpus, np.random.default_rng(7), 1, q_max=6)[0]
    flipped = Bag(bag.entity, bag.contexts[::-1], bag.labels)
    for t in range(corpus.n_types):
        assert bag_prob(model, flipped, t, agg) == pytest.approx(bag_prob(model, bag, t, agg), abs=1e-14)


def test_single_item_helpers_agree(world):
    corpus, _ = world
    model = model_for(world)
    ctx = corpus.contexts[0]
    c = encode_context(model, ctx)
    bag = Bag("x", [ctx], np.zeros(corpus.n_types))
    assert context_type_prob(model, c, 2) == pytest.approx(bag_prob(model, bag, 2, "max"), abs=0)


def test_single_context_bags_collapse_max_to_ds(world):
    corpus, table = world
    bags = [Bag(b.entity, b.contexts[:1], b.labels) for b in corpus.bags("train")[:25]]
    dev = corpus.bags("dev")[:10]
    a, b = model_for(world, seed=6), model_for(world, seed=6)
    assert typing_loss(a, bags, "ds") == typing_loss(a, bags, "miml-max")
    cfg = TrainConfig(max_epochs=3, seed=6)
    ha, hb = train_typing(a, bags, dev, "ds", cfg), train_typing(b, bags, dev, "miml-max", cfg)
    assert ha.losses == hb.losses


def test_max_avg_shares_max_parameters(world):
    corpus, _ = world
    cfg = TrainConfig(max_epochs=3, seed=1)
    a, b = model_for(world, seed=7), model_for(world, seed=7)
    train_typing(a, corpus.bags("train"), corpus.bags("dev"), "miml-max", cfg)
    train_typing(b, corpus.bags("train"), corpus.bags("dev"), "miml-max-avg", cfg)
    sa, sb = a.state_dict(), b.state_dict()
    assert sa.keys() == sb.keys() and all(np.array_equal(sa[k], sb[k]) for k in sa)


def test_att_requires_attention_model(world):
    corpus, _ = world
    with pytest.raises(ValueError, match="attention"):
        train_typing(model_for(world), corpus.bags("train")[:3], [], "miml-att")


def test_frozen_type_embeddings_are_not_parameters(world):
    m = model_for(world, attention=True, freeze_type_emb=True)
    assert all("type_emb" not in p.name for p in m.parameters())
    m = model_for(world, attention=True)
    assert any(p.name == "et.type_emb" for p in m.parameters())


def test_subsampling_caps_bag_size(world):
    corpus, _ = world
    model = model_for(world)
    data = BagData(model, corpus.bags("train")[:5])
    _, seg, _ = data.batch(range(5), np.random.default_rng(0), q_max=2)
    assert seg.sizes.max() <= 2


def test_training_learns_clean_corpus():
    corpus, table = oracles.tiny_world(seed=1, d=30, n_entities=300, vocab_size=400, noise_rate=0.0,
                                       mislink_rate=0.0)
    model = ETModel(table, corpus.types, ETEncoderConfig(n_filters=20, hidden=50), attention=True,
                    freeze_type_emb=True, seed=0)
    train_typing(model, corpus.bags("train"), corpus.bags("dev"), "miml-att", TrainConfig(max_epochs=20))
    dev = BagData(model, corpus.bags("dev"))
    assert tuned_f1(predict(model, dev, "att"), dev.labels) > 0.95


def test_entemb_and_join(world):
    corpus, table = world
    ids = [b.entity for b in corpus.bags("train")]
    model = EntEmbModel(table, corpus.n_types, hidden=8)
    y = np.array([corpus.label_vector(e) for e in ids])
    hist = train_entemb(model, model.entity_vectors(ids), y, cfg=TrainConfig(max_epochs=5))
    assert hist.losses[-1] < hist.losses[0]
    p = predict_entemb(model, ids[:3])
    assert p.shape == (3, corpus.n_types)
    np.testing.assert_array_equal(join_models(p, 1 - p), np.full_like(p, 0.5))
    with pytest.raises(ValueError):
        join_models(p, p + 1)


def test_predictions_file_round_trip(tmp_path, world):
    corpus, _ = world
    ids = list(corpus.entities)[:4]
    probs = np.random.default_rng(0).random((4, corpus.n_types))
    probs[0, 0] = 1e-6
    write_predictions(tmp_path / "p.tsv", ids, probs, corpus)
    back = read_predictions(tmp_path / "p.tsv", corpus.types)
    for e, row in zip(ids, probs):
        kept = row > 1e-4
        np.testing.assert_array_equal(back[e][kept], row[kept])


def test_parameters_are_named_uniquely(world):
    names = [p.name for p in model_for(world, attention=True).parameters()]
    assert len(names) == len(set(names)) and all(isinstance(p, Parameter)
                                                 for p in model_for(world).parameters())
