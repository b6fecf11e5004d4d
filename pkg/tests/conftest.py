import numpy as np
import pytest

from shakg.env import MiniQuest, default_templates, miniquest_spec
from shakg.kg import KnowledgeGraph, graph_update, observation_triples
from shakg.model import ShaKgModel
from shakg.persistence import default_vocab


@pytest.fixture(scope="session")
def spec():
    return miniquest_spec()


@pytest.fixture(scope="session")
def templates():
    return default_templates()


@pytest.fixture(scope="session")
def vocab():
    return default_vocab()


@pytest.fixture
def env(spec, templates):
    return MiniQuest(spec, templates)


@pytest.fixture
def make_model(vocab, templates):
    def build(variant="full", strategy="full", seed=0):
        return ShaKgModel(vocab, templates, variant=variant, strategy=strategy, seed=seed)

    return build


def walkthrough_states(env):
    """(obs, kg) for the start state and after each walkthrough action."""
    obs = env.reset()
    kg = graph_update(KnowledgeGraph(), observation_triples(obs, "", None))
    states = [(obs, kg)]
    for action in env.walkthrough():
        prev = obs.room_id
        obs, _, _, valid = env.step(action)
        kg = graph_update(kg, observation_triples(obs, prev, action if valid else None))
        states.append((obs, kg))
    return states


@pytest.fixture
def states(env):
    return walkthrough_states(env)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
