import numpy as np
import pytest

from shakg.autodiff import ParameterStore
from shakg.encoders import (
    UNK,
    GatParams,
    GruParams,
    Vocabulary,
    detokenize,
    encode_component,
    encode_components,
    encode_graph,
    encode_graphs,
    encode_score,
    graph_input,
    tokenize,
    words_of,
)
from shakg.kg import Triple, graph_from_triples, to_adjacency


@pytest.fixture
def small_vocab():
    return Vocabulary(["take", "egg", "west", "of", "house", "a", "b", "c", "d"])


def test_tokenize(small_vocab):
    v = small_vocab
    assert tokenize("take egg", v) == [v.id("take"), v.id("egg")]
    assert tokenize("West of House.", v) == [v.id("west"), v.id("of"), v.id("house")]
    assert tokenize("xyzzy-unknown", Vocabulary(["take"])) == [UNK, UNK]


def test_unknown_word_is_one_unk():
    assert tokenize("xyzzy", Vocabulary(["take"])) == [UNK]


def test_vocab_round_trip(small_vocab, tmp_path):
    text = "West of House, take EGG!"
    ids = tokenize(text, small_vocab)
    assert detokenize(ids, small_vocab) == " ".join(words_of(text))
    small_vocab.save(tmp_path / "v.txt")
    again = Vocabulary.load(tmp_path / "v.txt")
    assert again.words == small_vocab.words and again.id("egg") == small_vocab.id("egg")


def test_empty_sequence_encodes_to_zero():
    store = ParameterStore(0)
    params = GruParams.create(store, "g", 12)
    out = encode_component([], params)
    assert out.shape == (1, 100) and not out.data.any()


def test_zero_parameters_give_zero_hidden():
    store = ParameterStore(0)
    params = GruParams.create(store, "g", 12)
    for t in store.entries.values():
        t.data = np.zeros_like(t.data)
    assert not encode_component([3, 4, 5], params).data.any()


def test_batched_encoding_matches_single(rng):
    store = ParameterStore(2)
    params = GruParams.create(store, "g", 12, d_emb=8, d_hidden=6)
    seqs = [[3, 4, 5], [], [7], [2, 2, 9, 10, 11]]
    batched = encode_components(seqs, params).data
    for i, s in enumerate(seqs):
        assert np.allclose(batched[i], encode_component(s, params).data[0], atol=1e-12)
    assert np.array_equal(encode_component([3, 4], params).data, encode_component([3, 4], params).data)


def test_gru_against_reference_recurrence():
    store = ParameterStore(4)
    params = GruParams.create(store, "g", 10, d_emb=5, d_hidden=4)
    c = params.cell
    E = params.embedding.data
    sig = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
    h = np.zeros(4)
    for tok in [3, 1, 7]:
        x = E[tok]
        r = sig(x @ c.W_ir.data + h @ c.W_hr.data + c.b_r.data[0])
        z = sig(x @ c.W_iz.data + h @ c.W_hz.data + c.b_z.data[0])
        n = np.tanh(x @ c.W_in.data + c.b_in.data[0] + r * (h @ c.W_hn.data + c.b_hn.data[0]))
        h = (1 - z) * n + z * h
    assert np.allclose(encode_component([3, 1, 7], params).data[0], h, atol=1e-12)


@pytest.mark.parametrize(
    "score, bits",
    [(0, []), (5, [0, 2]), (-3, [0, 1, 15]), (40000, list(range(15)))],
)
def test_encode_score(score, bits):
    expected = np.zeros(16)
    expected[bits] = 1.0
    assert np.array_equal(encode_score(score), expected)


def _gat(d_out=7, seed=0, vocab_size=12):
    store = ParameterStore(seed)
    emb = store.add("emb", vocab_size, 5, fan_in=1)
    return GatParams.create(store, "gat", emb, d_out)


def test_single_node_self_attention(small_vocab):
    gi = graph_input(["egg"], np.ones((1, 1), dtype=bool), small_vocab)
    out = encode_graph(gi, _gat())
    assert out.attention[0][0, 0] == 1.0


def test_empty_graph_is_zero(small_vocab):
    out = encode_graph(graph_input([], np.zeros((0, 0), dtype=bool), small_vocab), _gat())
    assert out.vectors.shape == (1, 7) and not out.vectors.data.any()


def _random_graph(rng, n):
    adj = rng.random((n, n)) < 0.4
    adj = adj | adj.T | np.eye(n, dtype=bool)
    return adj


def test_gat_rows_are_distributions_over_neighbours(rng, small_vocab):
    params = _gat()
    graphs = [graph_input(list("abcd")[:n], _random_graph(rng, n), small_vocab) for n in (1, 2, 3, 4, 4)]
    out = encode_graphs(graphs, params)
    for g, att in zip(graphs, out.attention):
        assert np.allclose(att.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(att[g.adjacency] > 0) and np.all(att[~g.adjacency] == 0)


def test_batched_gat_matches_single(rng, small_vocab):
    params = _gat()
    graphs = [graph_input(list("abcd")[:n], _random_graph(rng, n), small_vocab) for n in (3, 1, 4, 0)]
    batched = encode_graphs(graphs, params).vectors.data
    for i, g in enumerate(graphs):
        assert np.allclose(batched[i], encode_graph(g, params).vectors.data[0], atol=1e-12)


def test_gat_permutation_invariance(rng, small_vocab):
    params = _gat()
    nodes = ["a", "b", "c", "d"]
    adj = _random_graph(rng, 4)
    perm = rng.permutation(4)
    g1 = graph_input(nodes, adj, small_vocab)
    g2 = graph_input([nodes[i] for i in perm], adj[np.ix_(perm, perm)], small_vocab)
    assert np.allclose(encode_graph(g1, params).vectors.data, encode_graph(g2, params).vectors.data, atol=1e-9)


def test_node_features_use_first_word():
    vocab = Vocabulary(["gold", "watch"])
    kg = graph_from_triples({Triple("gold watch", "in", "watch")}, "watch")
    gi = graph_input(*to_adjacency(kg), vocab)
    assert set(gi.word_ids) == {vocab.id("gold"), vocab.id("watch")}


def test_call_counter(small_vocab):
    params = _gat()
    g = graph_input(["a"], np.ones((1, 1), dtype=bool), small_vocab)
    encode_graphs([g, g], params)
    encode_graph(g, params)
    assert params.calls == 2
