"""A2C with the valid-action auxiliary task, rollout collection and the training loop."""
from __future__ import annotations

import logging
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .attention import VARIANTS
from .autodiff import AdamState, Tensor, adam_step, add, backward, constant, log, matmul, mul, no_grad, scalar_mul, sum_columns
from .decoder import PolicyTerms
from .env import MiniQuest, ObservationBundle
from .kg import STRATEGIES, KnowledgeGraph, graph_update, observation_triples
from .layers import ones
from .model import EncodedBatch, ShaKgModel, StateInputs

log_ = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class TrainingFault(RuntimeError):
    pass


class EnvFault(RuntimeError):
    def __init__(self, env_id: int, cause: BaseException):
        super().__init__(f"environment {env_id} failed: {cause!r}")
        self.env_id = env_id


@dataclass
class TrainConfig:
    num_envs: int = 32
    steps_per_update: int = 8
    episode_valid_step_limit: int = 100
    # hard cap on all steps (valid or not) so a policy stuck on invalid actions still ends
    max_episode_steps: int = 200
    total_steps: int = 50_000
    gamma: float = 0.9
    lr: float = 0.003
    lambda_critic: float = 0.5
    lambda_entropy: float = 0.01
    lambda_template: float = 1.0
    lambda_object: float = 1.0
    variant: str = "full"
    strategy: str = "full"
    seed: int = 0

    def validate(self) -> None:
        for name in ("num_envs", "steps_per_update", "episode_valid_step_limit", "max_episode_steps", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown partition strategy {self.strategy!r}")

    @property
    def batch_size(self) -> int:
        return self.num_envs * self.steps_per_update

    @property
    def num_updates(self) -> int:
        return self.total_steps // self.batch_size


@dataclass
class Transition:
    inputs: StateInputs
    template_index: int
    object_ids: tuple
    log_prob: float
    reward: float
    value: float
    next_value: float
    done: bool
    template_labels: np.ndarray  # one entry per template
    object_labels: np.ndarray  # one entry per candidate in inputs.candidates


@dataclass
class EpisodeRecord:
    episode: int
    step: int
    raw_score: float


@dataclass
class RolloutBatch:
    transitions: list
    episodes: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses


def compute_q_advantage(r: float, v_next: float, v: float, gamma: float, done: bool) -> tuple[float, float]:
    bootstrap = gamma * v_next * (0.0 if done else 1.0)
    # (r - v) + bootstrap rather than q - v: same value, one rounding fewer
    return r + bootstrap, (r - v) + bootstrap


def _mean_rows(x: Tensor) -> Tensor:
    return matmul(ones(1, x.shape[0]), scalar_mul(x, 1.0 / x.shape[0]))


def _onehot(indices: np.ndarray, width: int, active: np.ndarray | None = None) -> np.ndarray:
    out = np.zeros((len(indices), width))
    rows = np.arange(len(indices))
    if active is None:
        active = np.ones(len(indices), dtype=bool)
    active = active.astype(bool)
    out[rows[active], indices[active]] = 1.0
    return out


def chosen_log_prob(terms: PolicyTerms) -> Tensor:
    """log pi_T(u) + sum over used slots of log pi_O(p_i), per row (B x 1)."""
    t_width = terms.template_logp.shape[1]
    total = sum_columns(mul(terms.template_logp, constant(_onehot(terms.chosen_template, t_width))))
    for slot, logp in enumerate(terms.object_logp):
        pick = _onehot(np.maximum(terms.chosen_objects[:, slot], 0), logp.shape[1], terms.slot_active[:, slot])
        total = add(total, sum_columns(mul(logp, constant(pick))))
    return total


def _check_finite(name: str, t: Tensor) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise TrainingFault(f"non-finite {name}")
    return t


def rl_losses(batch: Sequence[Transition], terms: PolicyTerms, encoded: EncodedBatch, gamma: float):
    """(actor, critic, entropy) losses; advantages and targets are constants."""
    if not batch:
        raise ValueError("empty batch")
    value = encoded.value
    # advantages use the values recorded at collection time, so they are constants
    qa = np.array([compute_q_advantage(t.reward, t.next_value, t.value, gamma, t.done) for t in batch])
    q, adv = qa[:, 0], qa[:, 1:2]

    actor = _mean_rows(mul(scalar_mul(chosen_log_prob(terms), -1.0), constant(adv)))
    td = add(constant(q[:, None]), scalar_mul(value, -1.0))
    critic = _mean_rows(mul(td, td))

    neg_entropy = sum_columns(mul(terms.template_probs, terms.template_logp))
    for slot, (p, lp) in enumerate(zip(terms.object_probs, terms.object_logp)):
        active = constant(terms.slot_active[:, slot:slot + 1])
        neg_entropy = add(neg_entropy, mul(sum_columns(mul(p, lp)), active))
    entropy = _mean_rows(neg_entropy)
    return _check_finite("actor loss", actor), _check_finite("critic loss", critic), _check_finite("entropy loss", entropy)


def _clamped_log(p: Tensor) -> Tensor:
    """log(clip(p, eps, 1-eps)); the clip is a constant shift, gradients pass straight through."""
    shift = np.clip(p.data, PROB_CLAMP, 1.0 - PROB_CLAMP) - p.data
    return log(add(p, constant(shift)))


def binary_cross_entropy(probs: Tensor, labels: np.ndarray, weights: np.ndarray) -> Tensor:
    """Per-row weighted sum of -[y log p + (1-y) log(1-p)] (B x 1)."""
    y = constant(labels)
    not_y = constant(1.0 - labels)
    complement = add(constant(np.ones(probs.shape)), scalar_mul(probs, -1.0))
    terms = add(mul(y, _clamped_log(probs)), mul(not_y, _clamped_log(complement)))
    per_row = scalar_mul(sum_columns(mul(terms, constant(weights))), -1.0)
    return per_row


def aux_losses(batch: Sequence[Transition], terms: PolicyTerms):
    """Valid-template and valid-object binary cross-entropy losses."""
    n_templates = terms.template_probs.shape[1]
    y_t = np.stack([t.template_labels for t in batch]).astype(np.float64)
    template = _mean_rows(binary_cross_entropy(terms.template_probs, y_t, np.full(y_t.shape, 1.0 / n_templates)))

    obj_loss = None
    if terms.object_probs:
        width = terms.object_probs[0].shape[1]
        y_o = np.zeros((len(batch), width))
        w_o = np.zeros((len(batch), width))
        for b, t in enumerate(batch):
            cands = list(t.inputs.candidates)
            if cands:
                y_o[b, cands] = t.object_labels
                w_o[b, cands] = 1.0 / len(cands)
        for slot, p in enumerate(terms.object_probs):
            weights = w_o * terms.slot_active[:, slot:slot + 1]
            term = binary_cross_entropy(p, y_o, weights)
            obj_loss = term if obj_loss is None else add(obj_loss, term)
        obj_loss = _mean_rows(obj_loss)
    else:
        obj_loss = constant(np.zeros((1, 1)))
    return _check_finite("template loss", template), _check_finite("object loss", obj_loss)


def total_loss(l_pi: Tensor, l_critic: Tensor, l_entropy: Tensor, l_template: Tensor, l_object: Tensor, config: TrainConfig) -> Tensor:
    out = l_pi
    for weight, term in (
        (config.lambda_critic, l_critic),
        (config.lambda_entropy, l_entropy),
        (config.lambda_template, l_template),
        (config.lambda_object, l_object),
    ):
        out = add(out, scalar_mul(term, weight))
    return out


def batch_loss(model: ShaKgModel, batch: Sequence[Transition], config: TrainConfig) -> tuple[Tensor, dict]:
    """Recompute the network on stored inputs and return the weighted total loss."""
    inputs = [t.inputs for t in batch]
    terms, encoded = model.score(inputs, [t.template_index for t in batch], [t.object_ids for t in batch])
    l_pi, l_critic, l_e = rl_losses(batch, terms, encoded, config.gamma)
    l_t, l_o = aux_losses(batch, terms)
    total = total_loss(l_pi, l_critic, l_e, l_t, l_o, config)
    parts = {"actor": l_pi.item(), "critic": l_critic.item(), "entropy": l_e.item(), "template": l_t.item(), "object": l_o.item()}
    return _check_finite("total loss", total), parts


# ---------------------------------------------------------------------------
# rollouts


def valid_labels(env: MiniQuest, model: ShaKgModel, candidates: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    pairs = env.valid_pairs()
    y_t = np.zeros(len(model.templates))
    words = set()
    for tidx, objs in pairs:
        y_t[tidx] = 1.0
        words.update(objs)
    y_o = np.array([1.0 if model.vocab.token(c) in words else 0.0 for c in candidates])
    return y_t, y_o


class EnvSlot:
    """One environment with its knowledge graph and episode bookkeeping."""

    def __init__(self, env: MiniQuest, seed: int):
        self.env = env
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.start()

    def start(self) -> None:
        self.obs = self.env.reset(self.seed)
        self.kg = graph_update(KnowledgeGraph(), observation_triples(self.obs, "", None))
        self.valid_steps = 0
        self.steps = 0

    def advance(self, action: str, limits: TrainConfig) -> tuple[float, bool, bool, float | None]:
        """Step the game; returns (reward, episode over, valid, final score if over)."""
        prev_room = self.obs.room_id
        obs, reward, done, valid = self.env.step(action)
        self.steps += 1
        if valid:
            self.valid_steps += 1
        self.kg = graph_update(self.kg, observation_triples(obs, prev_room, action if valid else None))
        self.obs = obs
        over = done or self.valid_steps >= limits.episode_valid_step_limit or self.steps >= limits.max_episode_steps
        final = float(obs.score) if over else None
        if over:
            self.start()
        return reward, over, valid, final


def _threads(default: int) -> int:
    raw = os.environ.get("SHAKG_THREADS")
    if raw is None:
        return default
    return max(1, int(raw))


class Rollout:
    """Parallel environments stepped in lock-step with one batched policy."""

    def __init__(self, model: ShaKgModel, config: TrainConfig, env_factory: Callable[[], MiniQuest] | None = None):
        self.model = model
        self.config = config
        factory = env_factory or _shared_miniquest_factory()
        self.slots = [EnvSlot(factory(), seed=config.seed * 100_003 + i) for i in range(config.num_envs)]
        self.total_steps = 0
        self.episodes = 0
        self.workers = min(_threads(config.num_envs), config.num_envs)
        self._pool = ThreadPoolExecutor(self.workers) if self.workers > 1 else None

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def collect(self, steps: int | None = None) -> RolloutBatch:
        steps = steps or self.config.steps_per_update
        model, cfg = self.model, self.config
        per_step = []
        episodes = []
        for _ in range(steps):
            inputs = [model.prepare(s.obs, s.kg) for s in self.slots]
            labels = [valid_labels(s.env, model, x.candidates) for s, x in zip(self.slots, inputs)]
            with no_grad():
                decisions, encoded = model.act(inputs, "sample", [s.rng for s in self.slots])
            values = encoded.value.data[:, 0].copy()

            def run(i: int):
                try:
                    return self.slots[i].advance(decisions[i].action, cfg)
                except Exception as exc:  # noqa: BLE001
                    raise EnvFault(i, exc) from exc

            results = self._map(run, range(len(self.slots)))
            row = []
            for i, (reward, over, valid, final) in enumerate(results):
                self.total_steps += 1
                d = decisions[i]
                row.append((inputs[i], d, reward, values[i], over, labels[i]))
                if over:
                    self.episodes += 1
                    episodes.append(EpisodeRecord(self.episodes, self.total_steps, final))
            per_step.append(row)

        with no_grad():
            tail = model.encode([model.prepare(s.obs, s.kg) for s in self.slots]).value.data[:, 0]
        transitions = []
        for t, row in enumerate(per_step):
            for i, (inp, d, reward, value, over, (y_t, y_o)) in enumerate(row):
                nxt = per_step[t + 1][i][3] if t + 1 < len(per_step) else tail[i]
                transitions.append(
                    Transition(
                        inputs=inp, template_index=d.template_index, object_ids=d.object_ids, log_prob=d.log_prob,
                        reward=reward, value=float(value), next_value=float(nxt), done=over,
                        template_labels=y_t, object_labels=y_o,
                    )
                )
        return RolloutBatch(transitions=transitions, episodes=episodes)


def _shared_miniquest_factory() -> Callable[[], MiniQuest]:
    from .env import default_templates, miniquest_spec

    spec, templates, cache = miniquest_spec(), default_templates(), {}
    return lambda: MiniQuest(spec, templates, cache)


def rollout_collect(model: ShaKgModel, config: TrainConfig, rollout: Rollout | None = None) -> RolloutBatch:
    rollout = rollout or Rollout(model, config)
    return rollout.collect(config.steps_per_update)


# ---------------------------------------------------------------------------
# training


@dataclass
class MetricRow:
    episode: int
    step: int
    raw_score: float
    avg100: float


@dataclass
class TrainResult:
    model: ShaKgModel
    metrics: list
    updates: int
    losses: list = field(default_factory=list)


def iter_training(
    config: TrainConfig,
    model: ShaKgModel,
    env_factory: Callable[[], MiniQuest] | None = None,
    on_update: Callable[[int, dict], None] | None = None,
    dump_dir: Path | None = None,
) -> Iterator[MetricRow]:
    """Alternate rollouts and Adam steps, yielding one metric row per finished episode."""
    config.validate()
    rollout = Rollout(model, config, env_factory)
    state = AdamState()
    window: deque = deque(maxlen=100)
    try:
        for update in range(config.num_updates):
            batch = rollout.collect(config.steps_per_update)
            for ep in batch.episodes:
                window.append(ep.raw_score)
                yield MetricRow(ep.episode, ep.step, ep.raw_score, float(np.mean(window)))
            model.params.zero_grad()
            try:
                loss, parts = batch_loss(model, batch.transitions, config)
            except TrainingFault:
                if dump_dir is not None:
                    _dump_batch(Path(dump_dir) / f"fault_update{update}.txt", batch)
                raise
            grads = backward(loss, model.params)
            adam_step(model.params, grads, state, lr=config.lr)
            parts["update"] = update
            if on_update is not None:
                on_update(update, parts)
    finally:
        rollout.close()


def _dump_batch(path: Path, batch: RolloutBatch) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for t in batch.transitions:
            fh.write(f"template={t.template_index} objects={t.object_ids} reward={t.reward} "
                     f"value={t.value} next={t.next_value} done={t.done} text={t.inputs.text}\n")


def train_run(
    config: TrainConfig,
    model: ShaKgModel | None = None,
    env_factory: Callable[[], MiniQuest] | None = None,
    metrics_path: str | Path | None = None,
    on_update: Callable[[int, dict], None] | None = None,
    dump_dir: Path | None = None,
) -> TrainResult:
    from .persistence import MetricsWriter, default_model

    model = model or default_model(config)
    losses: list = []

    def record(update, parts):
        losses.append(parts)
        if on_update is not None:
            on_update(update, parts)

    rows = []
    writer = MetricsWriter(metrics_path) if metrics_path is not None else None
    try:
        for row in iter_training(config, model, env_factory, record, dump_dir):
            rows.append(row)
            if writer is not None:
                writer.write(row)
    finally:
        if writer is not None:
            writer.close()
    return TrainResult(model=model, metrics=rows, updates=len(losses), losses=losses)


# ---------------------------------------------------------------------------
# evaluation


Policy = Callable[[ObservationBundle, KnowledgeGraph, int], str]


def scripted_policy(actions: Sequence[str]) -> Policy:
    """Plays ``actions`` in order (then repeats the last one)."""
    actions = list(actions)
    return lambda obs, kg, t: actions[min(t, len(actions) - 1)]


def run_episode(
    env: MiniQuest,
    config: TrainConfig,
    model: ShaKgModel | None = None,
    policy: Policy | None = None,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    on_step: Callable | None = None,
) -> float:
    """Play one episode; returns the final raw score."""
    slot_obs = env.reset()
    kg = graph_update(KnowledgeGraph(), observation_triples(slot_obs, "", None))
    valid_steps = steps = 0
    while True:
        if policy is not None:
            action, decision, encoded, inputs = policy(slot_obs, kg, steps), None, None, None
        else:
            inputs = model.prepare(slot_obs, kg)
            with no_grad():
                decisions, encoded = model.act([inputs], mode, [rng])
            decision = decisions[0]
            action = decision.action
        prev_room = slot_obs.room_id
        before = (slot_obs, kg)
        slot_obs, reward, done, valid = env.step(action)
        steps += 1
        valid_steps += valid
        new_triples = observation_triples(slot_obs, prev_room, action if valid else None)
        kg = graph_update(kg, new_triples)
        if on_step is not None:
            on_step(steps, before, action, reward, slot_obs, decision, encoded, inputs, new_triples)
        if done or valid_steps >= config.episode_valid_step_limit or steps >= config.max_episode_steps:
            return float(slot_obs.score)


def evaluate(
    model: ShaKgModel | None,
    env: MiniQuest,
    episodes: int,
    config: TrainConfig | None = None,
    mode: str = "greedy",
    policy: Policy | None = None,
    seed: int = 0,
) -> float:
    """Mean final raw score over ``episodes`` episodes without learning."""
    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    scores = [run_episode(env, config, model, policy, mode, rng) for _ in range(episodes)]
    return float(np.mean(scores))
