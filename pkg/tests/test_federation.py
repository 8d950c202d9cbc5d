import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedkgc.encoder import EncoderConfig, ModelWeights, init_weights
from fedkgc.federation import (ClientHandle, ClientTrainingError, FedConfig, aggregate, pool_graphs,
                               run_data_aggregation, run_federated, run_isolated, select_clients)
from fedkgc.kg import KnowledgeGraph, Triple
from fedkgc.training import Batch, TrainConfig, batch_loss, negative_mask, train_local_epoch

ENC = EncoderConfig(dim=8, prefix_len=2, vocab_size=128)
TRAIN = TrainConfig(batch_size=8, lr=5e-3, seed=3)


def make_graph(name, n_ent=16, n_triples=30, relations=("likes", "knows"), seed=0, suffix=""):
    rng = np.random.default_rng(seed)
    ents = [f"person{i}{suffix} town{i % 3}{suffix}" for i in range(n_ent)]
    triples = set()
    while len(triples) < n_triples:
        h, t = rng.choice(n_ent, 2, replace=False)
        triples.add(Triple(int(h), int(rng.integers(len(relations))), int(t)))
    triples = sorted(triples)
    return KnowledgeGraph(name, ents, list(relations),
                          {"train": triples[:-4], "test": triples[-4:]})


# -- selection ---------------------------------------------------------------------------

def test_sequential_round_robin():
    assert [select_clients("sequential", 5, 1, r, 0) for r in range(1, 7)] == [[0], [1], [2], [3], [4], [0]]


def test_random_selection():
    assert select_clients("random", 4, 4, 7, 1) == [0, 1, 2, 3]
    assert select_clients("random", 5, 2, 3, 9) == select_clients("random", 5, 2, 3, 9)
    picks = {tuple(select_clients("random", 5, 2, r, 9)) for r in range(1, 30)}
    assert len(picks) > 1
    assert all(len(set(p)) == 2 for p in picks)
    with pytest.raises(ValueError):
        select_clients("random", 3, 4, 1, 0)
    with pytest.raises(ValueError):
        select_clients("sequential", 3, 0, 1, 0)


# -- aggregation -------------------------------------------------------------------------

def mw(**tensors):
    return ModelWeights({k.replace("__", "/"): np.asarray(v, dtype=float) for k, v in tensors.items()})


def test_single_input_is_identity():
    w = init_weights(ENC, ["r"], 0)
    out = aggregate([(w, 1.0)])
    assert out.equal(w)


def test_equal_mean():
    out = aggregate([(mw(tok_emb=[1.0, 2.0]), 1), (mw(tok_emb=[3.0, 4.0]), 1)])
    np.testing.assert_array_equal(out["tok_emb"], [2.0, 3.0])


def test_triple_count_weights():
    sets = [(mw(tok_emb=[0.0]), 1000), (mw(tok_emb=[2.0]), 500), (mw(tok_emb=[4.0]), 500)]
    assert aggregate(sets)["tok_emb"][0] == pytest.approx(1.5, abs=1e-15)


def test_partial_owners_renormalize():
    a = mw(tok_emb=[0.0], rel_prefix__x=[2.0])
    b = mw(tok_emb=[4.0], rel_prefix__x=[6.0])
    c = mw(tok_emb=[8.0])
    out = aggregate([(a, 1), (b, 1), (c, 1)])
    assert out["tok_emb"][0] == pytest.approx(4.0)
    assert out["rel_prefix/x"][0] == pytest.approx(4.0)


def test_scope_tok_emb_passes_prefixes_through():
    a = mw(tok_emb=[0.0], rel_prefix__x=[2.0])
    b = mw(tok_emb=[4.0], rel_prefix__y=[6.0])
    out = aggregate([(a, 1), (b, 1)], scope="tok_emb")
    assert out["tok_emb"][0] == 2.0
    assert out["rel_prefix/x"][0] == 2.0 and out["rel_prefix/y"][0] == 6.0


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([(mw(tok_emb=[1.0, 2.0]), 1), (mw(tok_emb=[1.0]), 1)])
    with pytest.raises(ValueError):
        aggregate([(mw(tok_emb=[np.nan]), 1), (mw(tok_emb=[1.0]), 1)])
    with pytest.raises(ValueError):
        aggregate([(mw(tok_emb=[1.0]), 0)])
    with pytest.raises(ValueError):
        aggregate([])


floats = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.lists(floats, min_size=3, max_size=3), min_size=1, max_size=5),
       st.lists(st.floats(0.1, 100), min_size=5, max_size=5), st.randoms(use_true_random=False))
def test_aggregate_properties(vectors, ns, rnd):
    sets = [(mw(tok_emb=v), n) for v, n in zip(vectors, ns)]
    out = aggregate(sets)
    shuffled = list(sets)
    rnd.shuffle(shuffled)
    assert aggregate(shuffled).equal(out)
    arr = np.array(vectors)
    assert (out["tok_emb"] >= arr.min(axis=0)).all() and (out["tok_emb"] <= arr.max(axis=0)).all()
    same = [(mw(tok_emb=vectors[0]), n) for n in ns]
    assert aggregate(same).equal(mw(tok_emb=vectors[0]))


# -- round loop ---------------------------------------------------------------------------

def clients_for(graphs, enc=ENC):
    return [ClientHandle(i, g, enc) for i, g in enumerate(graphs)]


def test_single_round_equals_local_training():
    graphs = [make_graph("a", seed=1), make_graph("b", seed=2)]
    res = run_federated(clients_for(graphs), FedConfig(rounds=1, seed=4), TRAIN, ENC)
    w0 = init_weights(ENC, sorted({"likes", "knows"}), 4)
    local, _ = train_local_epoch(w0, graphs[0], TRAIN, ENC, 1, 0)
    assert res.global_weights.equal(local)
    assert res.history[0].selected == [0]
    assert res.history[0].checksum == local.checksum()


def test_zero_lr_keeps_initial_weights():
    graphs = [make_graph("a", seed=1), make_graph("b", seed=2, relations=("likes", "owns"))]
    cfg = TrainConfig(batch_size=8, lr=0.0)
    res = run_federated(clients_for(graphs), FedConfig(rounds=4, clients_per_round=2, selection="random"), cfg, ENC)
    assert res.global_weights.equal(init_weights(ENC, ["knows", "likes", "owns"], 0))


def test_global_namespace_is_union_of_relations():
    graphs = [make_graph("a", seed=1), make_graph("b", seed=2, relations=("likes", "owns"))]
    res = run_federated(clients_for(graphs), FedConfig(rounds=2), TRAIN, ENC)
    assert res.global_weights.relation_keys() == sorted(
        f"{r}#{d}" for r in ("knows", "likes", "owns") for d in ("fwd", "inv"))
    # round 1 trains client a only; b's private relation keeps its init value
    init = init_weights(ENC, ["knows", "likes", "owns"], 0)
    assert len(res.history) == 2
    assert not np.array_equal(res.global_weights["rel_prefix/owns#fwd"], init["rel_prefix/owns#fwd"])


def test_isolated_equals_single_client_federation():
    g = make_graph("solo", seed=5)
    fed = FedConfig(rounds=3, seed=2)
    w_iso, hist = run_isolated(g, 0, fed, TRAIN, ENC)
    res = run_federated(clients_for([g]), fed, TRAIN, ENC)
    assert w_iso.equal(res.global_weights)
    assert len(hist) == 3


def test_isolated_epoch_budget_and_seeds():
    g = make_graph("solo", seed=5)
    steps = []
    w1, _ = run_isolated(g, 0, FedConfig(rounds=3, seed=1), TrainConfig(batch_size=8, epochs=2), ENC,
                         on_step=lambda r, c, s, l: steps.append(s))
    per_epoch = len(g.train) // 8 + (1 if len(g.train) % 8 >= 2 else 0)
    assert len(steps) == 3 * 2 * per_epoch
    w2, _ = run_isolated(g, 0, FedConfig(rounds=3, seed=2), TrainConfig(batch_size=8, epochs=2), ENC)
    assert not w1.equal(w2)


def test_thread_count_does_not_change_results():
    graphs = [make_graph(n, seed=i) for i, n in enumerate("abc")]
    fed = FedConfig(rounds=3, clients_per_round=3, selection="random", weighting="triples")
    a = run_federated(clients_for(graphs), fed, TRAIN, ENC, threads=1)
    b = run_federated(clients_for(graphs), fed, TRAIN, ENC, threads=3)
    assert a.global_weights.equal(b.global_weights)
    assert [h.checksum for h in a.history] == [h.checksum for h in b.history]
    assert all(len(h.selected) == 3 for h in a.history)


def test_local_scope_keeps_prefixes_private():
    graphs = [make_graph("a", seed=1), make_graph("b", seed=2)]
    fed = FedConfig(rounds=2, scope="tok_emb")
    res = run_federated(clients_for(graphs), fed, TRAIN, ENC)
    init = init_weights(ENC, ["knows", "likes"], 0)
    # prefixes never leave the clients, so the server copy stays at init
    assert np.array_equal(res.global_weights["rel_prefix/likes#fwd"], init["rel_prefix/likes#fwd"])
    assert not np.array_equal(res.local_weights[0]["rel_prefix/likes#fwd"], init["rel_prefix/likes#fwd"])
    assert not np.array_equal(res.global_weights["tok_emb"], init["tok_emb"])


def test_failure_names_round_and_client():
    good = make_graph("a", seed=1)
    bad = KnowledgeGraph("bad", ["x y", "z w"], ["likes"], {"train": [Triple(0, 0, 1)]})
    with pytest.raises(ClientTrainingError) as exc:
        run_federated(clients_for([good, bad]), FedConfig(rounds=2), TRAIN, ENC)
    assert exc.value.round == 2 and exc.value.client == 1
    assert "round 2" in str(exc.value) and "client 1" in str(exc.value)


def test_client_api_has_no_data_accessors():
    public = {n for n, _ in inspect.getmembers(ClientHandle) if not n.startswith("_")}
    assert public == {"name", "num_train_triples", "relation_names", "tokenizer_config", "owned_names",
                      "receive", "train", "local_weights", "evaluate"}
    c = ClientHandle(0, make_graph("a"), ENC)
    for n in ("relation_names", "tokenizer_config", "owned_names"):
        out = getattr(c, n)()
        flat = str(out)
        assert "person" not in flat and "town" not in flat
    assert not any(isinstance(getattr(c, n, None), (list, tuple)) for n in vars(c) if not n.startswith("_"))


# -- data aggregation ------------------------------------------------------------------------

def test_data_aggregation_single_client_matches_isolated():
    g = make_graph("solo", seed=5, relations=("zeta", "alpha"))
    fed = FedConfig(rounds=2, seed=3)
    a, _ = run_data_aggregation([g], fed, TRAIN, ENC)
    b, _ = run_isolated(g, 0, fed, TRAIN, ENC)
    assert a.equal(b)


def test_pooled_graph_is_disjoint_union():
    a = make_graph("a", seed=1, suffix="x")
    b = make_graph("b", seed=2, suffix="y", relations=("likes", "owns"))
    p = pool_graphs([a, b])
    assert p.num_entities == a.num_entities + b.num_entities
    assert p.relations == ["knows", "likes", "owns"]
    assert len(p.train) == len(a.train) + len(b.train)
    assert p.entities[a.num_entities] == b.entities[0]


def test_pooled_batch_spans_sources():
    a = make_graph("a", seed=1, suffix="x")
    b = make_graph("b", seed=2, suffix="y")
    p = pool_graphs([a, b])
    off = a.num_entities
    batch = [p.train[0], p.train[1], p.train[len(a.train)], p.train[len(a.train) + 1]]
    tails = [t for _, _, t in batch]
    assert len(set(tails)) == 4
    assert (negative_mask(tails).sum(axis=1) == 3).all()
    _, grads = batch_loss(init_weights(ENC, p.relations, 0), Batch.from_graph(p, batch),
                          TRAIN, ENC)
    tk = ENC.tokenizer()
    rows = set(grads.rows["tok_emb"].tolist())
    assert set(tk.tokenize(a.entities[batch[0][2]])) <= rows
    assert set(tk.tokenize(p.entities[batch[2][2]])) <= rows
    assert batch[2][2] >= off
