import numpy as np
import pytest

from shakg.attention import VARIANTS
from shakg.kg import STRATEGIES, num_parts


def batch_for(model, states):
    return [model.prepare(obs, kg) for obs, kg in states]


@pytest.mark.parametrize("variant", VARIANTS)
def test_variant_shapes(make_model, states, variant):
    model = make_model(variant=variant)
    enc = model.encode(batch_for(model, states))
    assert enc.encoding.v_t.shape == (len(states), 50) and enc.value.shape == (len(states), 1)
    if variant != "no-high-level":
        assert enc.encoding.alpha_high.shape == (len(states), 100, 4)
    if variant != "no-low-level":
        assert enc.encoding.alpha_low.shape == (len(states), 50, 4)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_strategy_part_counts(make_model, states, strategy):
    model = make_model(strategy=strategy)
    enc = model.encode(batch_for(model, states))
    assert enc.encoding.alpha_low.shape[2] == num_parts(strategy)


def test_no_low_level_never_encodes_sub_graphs(make_model, states):
    model = make_model(variant="no-low-level")
    model.act(batch_for(model, states), "greedy")
    assert model.graph_calls == {"full": 1, "sub": 0}
    assert not any(name.startswith("gat.sub") for name in model.params)


def test_same_seed_same_forward(make_model, states):
    a, b = make_model(seed=4), make_model(seed=4)
    ea = a.encode(batch_for(a, states))
    eb = b.encode(batch_for(b, states))
    assert np.array_equal(ea.encoding.v_t.data, eb.encoding.v_t.data)


def test_candidates_come_from_graph(make_model, states):
    model = make_model()
    obs, kg = states[2]
    words = {model.vocab.token(i) for i in model.prepare(obs, kg).candidates}
    assert {"key", "chest", "vault", "you"} <= words and "gem" not in words


def test_batch_and_single_agree(make_model, states):
    model = make_model(seed=2)
    inputs = batch_for(model, states)
    together = model.encode(inputs).value.data[:, 0]
    alone = [model.encode([x]).value.data[0, 0] for x in inputs]
    assert np.allclose(together, alone, atol=1e-12)
