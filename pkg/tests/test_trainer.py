from types import SimpleNamespace

import numpy as np
import pytest

from shakg.autodiff import backward, constant, row_softmax
from shakg.decoder import PolicyTerms
from shakg.env import MiniQuest
from shakg.layers import log_softmax_rows
from shakg.trainer import (
    EnvSlot,
    Rollout,
    TrainConfig,
    TrainingFault,
    aux_losses,
    batch_loss,
    binary_cross_entropy,
    compute_q_advantage,
    evaluate,
    rl_losses,
    scripted_policy,
    total_loss,
    train_run,
)


def terms_from_logits(template_logits, object_logits=(), chosen_t=None, chosen_o=None, active=None):
    tl = constant(np.atleast_2d(np.asarray(template_logits, dtype=float)))
    b = tl.shape[0]
    ol = [constant(np.atleast_2d(np.asarray(x, dtype=float))) for x in object_logits]
    return PolicyTerms(
        template_logp=log_softmax_rows(tl),
        template_probs=row_softmax(tl),
        object_logp=[log_softmax_rows(x) for x in ol],
        object_probs=[row_softmax(x) for x in ol],
        slot_active=np.zeros((b, 2)) if active is None else np.asarray(active, dtype=float),
        chosen_template=np.zeros(b, dtype=np.intp) if chosen_t is None else np.asarray(chosen_t),
        chosen_objects=np.full((b, 2), -1) if chosen_o is None else np.asarray(chosen_o),
    )


def fake_transition(reward=0.0, next_value=0.0, done=False, y_t=(1, 0), y_o=(), cands=(), value=0.0):
    return SimpleNamespace(
        reward=reward, next_value=next_value, done=done, value=value,
        template_labels=np.asarray(y_t, dtype=float), object_labels=np.asarray(y_o, dtype=float),
        inputs=SimpleNamespace(candidates=tuple(cands)),
    )


def encoded(values):
    return SimpleNamespace(value=constant(np.asarray(values, dtype=float).reshape(-1, 1)))


@pytest.mark.parametrize(
    "args, expected",
    [((0, 0, 0, 0.9, False), (0, 0)), ((1, 2, 1, 0.9, False), (2.8, 1.8)), ((5, 123.0, 5, 0.9, True), (5, 0))],
)
def test_q_advantage(args, expected):
    q, a = compute_q_advantage(*args)
    assert q == pytest.approx(expected[0], abs=1e-12) and a == pytest.approx(expected[1], abs=1e-12)


def test_uniform_entropy():
    _, _, ent = rl_losses([fake_transition()], terms_from_logits([0, 0, 0, 0]), encoded([0]), 0.9)
    assert ent.item() == pytest.approx(-1.3862943611198906, abs=1e-9)


def test_deterministic_policy_has_zero_entropy():
    _, _, ent = rl_losses([fake_transition()], terms_from_logits([0, -1e30, -1e30]), encoded([0]), 0.9)
    assert ent.item() == 0.0


def test_zero_advantage_zero_actor_loss():
    batch = [fake_transition(reward=1.0, next_value=2.0, value=2.8), fake_transition(reward=0.5, done=True, value=0.5)]
    actor, critic, _ = rl_losses(batch, terms_from_logits([[0.3, 1.0], [2.0, -1.0]]), encoded([2.8, 0.5]), 0.9)
    assert actor.item() == pytest.approx(0.0, abs=1e-15) and critic.item() == pytest.approx(0.0, abs=1e-24)


def test_template_bce_hand_value():
    lt, _ = aux_losses([fake_transition(y_t=(1, 0))], terms_from_logits([0.0, 0.0]))
    assert lt.item() == pytest.approx(0.6931471805599453, abs=1e-9)


def test_perfect_predictions_have_near_zero_bce():
    probs = constant(np.array([[1.0, 0.0, 1.0]]))
    loss = binary_cross_entropy(probs, np.array([[1.0, 0.0, 1.0]]), np.full((1, 3), 1 / 3))
    assert 0 <= loss.item() < 1e-5


def test_two_identical_slots_double_object_loss():
    cands = (2, 3)
    row = [-1e30, -1e30, 0.4, -0.2]
    t = fake_transition(y_o=(1, 0), cands=cands)
    one = aux_losses([t], terms_from_logits([0, 0], [row], active=[[1, 0]]))[1].item()
    two = aux_losses([t], terms_from_logits([0, 0], [row, row], active=[[1, 1]]))[1].item()
    assert one > 0 and two == 2 * one


def test_total_loss_weights():
    one = constant(np.ones((1, 1)))
    cfg = TrainConfig()
    assert total_loss(one, one, one, one, one, cfg).item() == pytest.approx(3.51, abs=1e-12)
    zero = TrainConfig(lambda_critic=0, lambda_entropy=0, lambda_template=0, lambda_object=0)
    two = constant(np.full((1, 1), 2.0))
    assert total_loss(two, one, one, one, one, zero).item() == 2.0


@pytest.fixture(scope="module")
def small_batch(request):
    from shakg.model import ShaKgModel
    from shakg.persistence import default_vocab
    from shakg.env import default_templates

    model = ShaKgModel(default_vocab(), default_templates(), seed=3)
    cfg = TrainConfig(num_envs=4, steps_per_update=3, seed=3)
    rollout = Rollout(model, cfg)
    batch = rollout.collect()
    rollout.close()
    return model, cfg, batch


def _grads(model, build):
    model.params.zero_grad()
    return {k: v.copy() for k, v in backward(build(), model.params).items()}


def test_total_gradient_is_weighted_sum(small_batch):
    model, cfg, batch = small_batch
    ts = batch.transitions

    def parts():
        terms, enc = model.score([t.inputs for t in ts], [t.template_index for t in ts], [t.object_ids for t in ts])
        return list(rl_losses(ts, terms, enc, cfg.gamma)) + list(aux_losses(ts, terms))

    weights = [1.0, cfg.lambda_critic, cfg.lambda_entropy, cfg.lambda_template, cfg.lambda_object]
    separate = [_grads(model, lambda i=i: parts()[i]) for i in range(5)]
    total = _grads(model, lambda: batch_loss(model, ts, cfg)[0])
    for name in total:
        expected = sum(w * g[name] for w, g in zip(weights, separate))
        assert np.allclose(total[name], expected, atol=1e-9, rtol=0), name


def test_advantage_and_critic_are_detached(small_batch):
    model, cfg, batch = small_batch
    ts = batch.transitions

    def losses():
        terms, enc = model.score([t.inputs for t in ts], [t.template_index for t in ts], [t.object_ids for t in ts])
        return rl_losses(ts, terms, enc, cfg.gamma)

    actor = _grads(model, lambda: losses()[0])
    critic = _grads(model, lambda: losses()[1])
    assert not actor["critic.W"].any() and not actor["critic.b"].any()
    assert critic["critic.W"].any()
    assert all(not v.any() for k, v in critic.items() if k.startswith("dec."))


def test_entropy_loss_non_positive(small_batch):
    model, cfg, batch = small_batch
    ts = batch.transitions
    terms, enc = model.score([t.inputs for t in ts], [t.template_index for t in ts], [t.object_ids for t in ts])
    _, _, ent = rl_losses(ts, terms, enc, cfg.gamma)
    t_loss, o_loss = aux_losses(ts, terms)
    assert ent.item() <= 0 and t_loss.item() >= 0 and o_loss.item() >= 0


def test_rollout_batch_shape_and_labels(make_model):
    model = make_model(seed=1)
    cfg = TrainConfig(seed=1)
    rollout = Rollout(model, cfg)
    batch = rollout.collect()
    rollout.close()
    assert len(batch.transitions) == 256
    for t in batch.transitions:
        assert set(np.unique(t.template_labels)) <= {0.0, 1.0}
        assert len(t.object_labels) == len(t.inputs.candidates)
        assert t.template_labels[model.templates.index("look")] == 1.0


def test_rollout_is_reproducible(make_model):
    def run():
        model = make_model(seed=2)
        r = Rollout(model, TrainConfig(num_envs=3, steps_per_update=4, seed=2))
        out = [(t.template_index, t.object_ids, t.reward, t.value, t.next_value, t.done) for t in r.collect().transitions]
        r.close()
        return out

    assert run() == run()


def test_valid_step_counter_skips_invalid_steps():
    slot = EnvSlot(MiniQuest(), seed=0)
    cfg = TrainConfig(episode_valid_step_limit=2, max_episode_steps=50)
    for _ in range(5):
        _, over, valid, _ = slot.advance("dance", cfg)
        assert not valid and not over
    assert slot.valid_steps == 0 and slot.steps == 5
    slot.advance("look", cfg)
    _, over, _, final = slot.advance("look", cfg)
    assert over and final == 0.0 and slot.steps == 0


def test_train_run_metrics(make_model, tmp_path):
    updates = []
    cfg = TrainConfig(num_envs=8, steps_per_update=8, total_steps=640, seed=4, max_episode_steps=12)
    res = train_run(cfg, make_model(seed=4), metrics_path=tmp_path / "m.csv", on_update=lambda u, p: updates.append(u))
    assert updates == list(range(cfg.total_steps // 64)) and res.updates == 10
    eps = [r.episode for r in res.metrics]
    assert eps == sorted(set(eps)) and eps[0] == 1
    scores = [r.raw_score for r in res.metrics]
    for i, r in enumerate(res.metrics):
        window = scores[max(0, i - 99): i + 1]
        assert r.avg100 == pytest.approx(np.mean(window), abs=1e-12)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "episode,step,raw_score,avg100"


def test_non_finite_loss_aborts_with_dump(make_model, tmp_path):
    model = make_model(seed=5)
    model.params["critic.b"].data[:] = np.nan
    cfg = TrainConfig(num_envs=2, steps_per_update=2, total_steps=4)
    with pytest.raises(TrainingFault, match="non-finite actor loss"):
        train_run(cfg, model, dump_dir=tmp_path)
    assert list(tmp_path.glob("fault_update0.txt"))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(gamma=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(num_envs=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(variant="bogus").validate()


def test_untrained_agent_scores_non_negative(make_model):
    cfg = TrainConfig(max_episode_steps=15)
    assert evaluate(make_model(seed=6), MiniQuest(), 100, cfg) >= 0


def test_scripted_optimal_policy_scores_max():
    env = MiniQuest()
    policy = scripted_policy(env.walkthrough())
    assert evaluate(None, env, 5, policy=policy) == 20.0


def test_greedy_evaluation_is_deterministic(make_model):
    model = make_model(seed=7)
    cfg = TrainConfig(max_episode_steps=15)
    assert evaluate(model, MiniQuest(), 2, cfg) == evaluate(model, MiniQuest(), 2, cfg)


def test_stored_values_match_recomputed_values(small_batch):
    model, cfg, batch = small_batch
    ts = batch.transitions
    _, enc = model.score([t.inputs for t in ts], [t.template_index for t in ts], [t.object_ids for t in ts])
    assert np.allclose(enc.value.data[:, 0], [t.value for t in ts], atol=1e-12, rtol=0)
