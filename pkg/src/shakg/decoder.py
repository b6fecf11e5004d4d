"""Template-then-objects recurrent action decoding with the graph mask."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ParameterStore, Tensor, add, constant, matmul, row_select, row_softmax
from .encoders import MASKED, Vocabulary
from .layers import GruCell, linear, log_softmax_rows

SLOT = "OBJ"
MAX_SLOTS = 2


class EmptyCandidateSet(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    text: str

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(self.text.split())

    @property
    def slots(self) -> int:
        return self.tokens.count(SLOT)


class TemplateSet:
    def __init__(self, templates: Sequence[str]):
        items = [Template(" ".join(t.split())) for t in templates if t.strip()]
        if len({t.text for t in items}) != len(items):
            raise ValueError("duplicate templates")
        for t in items:
            if t.slots > MAX_SLOTS:
                raise ValueError(f"template {t.text!r} has {t.slots} slots; at most {MAX_SLOTS} allowed")
        self.templates = items
        self._index = {t.text: i for i, t in enumerate(items)}

    def __len__(self) -> int:
        return len(self.templates)

    def __getitem__(self, i: int) -> Template:
        return self.templates[i]

    def __iter__(self):
        return iter(self.templates)

    def index(self, text: str) -> int:
        return self._index[" ".join(text.split())]

    def slots(self) -> np.ndarray:
        return np.array([t.slots for t in self.templates], dtype=np.intp)

    @classmethod
    def load(cls, path: str | Path) -> "TemplateSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln.strip() and not ln.lstrip().startswith("#")])

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t.text + "\n" for t in self.templates), encoding="utf-8")

    def parse(self, action: str) -> tuple[int, tuple[str, ...]] | None:
        """Match an action string against the templates (first match wins)."""
        words = action.split()
        for i, t in enumerate(self.templates):
            toks = t.tokens
            if len(toks) != len(words):
                continue
            objs = []
            for tok, w in zip(toks, words):
                if tok == SLOT:
                    objs.append(w)
                elif tok != w:
                    break
            else:
                return i, tuple(objs)
        return None


def render_action(template: Template | str, objects: Sequence[str]) -> str:
    """Fill the OBJ slots left to right."""
    tmpl = template if isinstance(template, Template) else Template(" ".join(template.split()))
    if len(objects) != tmpl.slots:
        raise ValueError(f"template {tmpl.text!r} needs {tmpl.slots} objects, got {len(objects)}")
    fill = iter(objects)
    return " ".join(next(fill) if tok == SLOT else tok for tok in tmpl.tokens)


@dataclass
class ActionDecision:
    template_index: int
    object_ids: tuple
    action: str
    log_prob: float
    template_probs: np.ndarray
    object_probs: list = field(default_factory=list)


@dataclass
class DecoderParams:
    W_lift_t: Tensor
    b_lift_t: Tensor
    template_gru: GruCell
    W_template: Tensor
    b_template: Tensor
    W_lift_o: Tensor
    b_lift_o: Tensor
    template_embedding: Tensor
    object_embedding: Tensor
    object_gru: GruCell
    W_object: Tensor
    b_object: Tensor

    @classmethod
    def create(cls, store: ParameterStore, n_templates: int, vocab_size: int, d_state: int = 50, d_hidden: int = 50, d_emb: int = 50):
        return cls(
            W_lift_t=store.add("dec.W_lift_t", d_state, d_hidden),
            b_lift_t=store.add("dec.b_lift_t", 1, d_hidden, init="zeros"),
            template_gru=GruCell.create(store, "dec.template_gru", d_state, d_hidden),
            W_template=store.add("dec.W_template", d_hidden, n_templates),
            b_template=store.add("dec.b_template", 1, n_templates, init="zeros"),
            W_lift_o=store.add("dec.W_lift_o", d_state, d_hidden),
            b_lift_o=store.add("dec.b_lift_o", 1, d_hidden, init="zeros"),
            template_embedding=store.add("dec.template_embedding", n_templates, d_emb, fan_in=1),
            object_embedding=store.add("dec.object_embedding", vocab_size, d_emb, fan_in=1),
            object_gru=GruCell.create(store, "dec.object_gru", d_emb, d_hidden),
            W_object=store.add("dec.W_object", d_hidden, vocab_size),
            b_object=store.add("dec.b_object", 1, vocab_size, init="zeros"),
        )


def candidate_mask(candidates: Sequence[Sequence[int]], vocab_size: int) -> np.ndarray:
    """0 on allowed object ids, a huge negative value elsewhere (B x |V|)."""
    mask = np.full((len(candidates), vocab_size), MASKED)
    for b, ids in enumerate(candidates):
        mask[b, list(ids)] = 0.0
    return mask


def template_logits(v_t: Tensor, params: DecoderParams) -> Tensor:
    h0 = linear(v_t, params.W_lift_t, params.b_lift_t)
    h = params.template_gru(v_t, h0)
    return linear(h, params.W_template, params.b_template)


def object_start(v_t: Tensor, params: DecoderParams) -> Tensor:
    return linear(v_t, params.W_lift_o, params.b_lift_o)


def object_step(h: Tensor, x: Tensor, mask: np.ndarray, params: DecoderParams) -> tuple[Tensor, Tensor]:
    """One object-GRU step: returns (masked logits, new hidden)."""
    h = params.object_gru(x, h)
    logits = add(linear(h, params.W_object, params.b_object), constant(mask))
    return logits, h


def _draw(p: np.ndarray, mode: str, rng: np.random.Generator | None) -> int:
    if mode == "greedy":
        return int(np.argmax(p))
    if mode != "sample":
        raise ValueError(f"unknown decode mode {mode!r}")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def decode_batch(
    v_t: Tensor,
    templates: TemplateSet,
    candidates: Sequence[Sequence[int]],
    params: DecoderParams,
    vocab: Vocabulary,
    mode: str = "sample",
    rngs: Sequence[np.random.Generator] | None = None,
) -> list[ActionDecision]:
    """Choose one action per row of ``v_t``.

    ``rngs`` supplies one generator per row (ignored for greedy decoding).
    """
    batch = v_t.shape[0]
    if rngs is None:
        rngs = [None] * batch
    slots = templates.slots()
    vocab_size = params.W_object.shape[1]
    p_t = row_softmax(template_logits(v_t, params)).data
    chosen_t = np.array([_draw(p_t[b], mode, rngs[b]) for b in range(batch)], dtype=np.intp)
    logp = np.log(p_t[np.arange(batch), chosen_t])

    need = slots[chosen_t]
    object_ids = [[] for _ in range(batch)]
    object_probs = [[] for _ in range(batch)]
    if need.max(initial=0) > 0:
        for b in range(batch):
            if need[b] and not len(candidates[b]):
                raise EmptyCandidateSet("empty candidate set")
        mask = candidate_mask(candidates, vocab_size)
        h = object_start(v_t, params)
        x = row_select(params.template_embedding, chosen_t)
        for slot in range(int(need.max())):
            logits, h = object_step(h, x, mask, params)
            p_o = row_softmax(logits).data
            prev = np.zeros(batch, dtype=np.intp)
            for b in range(batch):
                if need[b] > slot:
                    o = _draw(p_o[b], mode, rngs[b])
                    object_ids[b].append(o)
                    object_probs[b].append(p_o[b].copy())
                    logp[b] += np.log(p_o[b, o])
                    prev[b] = o
            x = row_select(params.object_embedding, prev)

    out = []
    for b in range(batch):
        tmpl = templates[int(chosen_t[b])]
        words = [vocab.token(i) for i in object_ids[b]]
        out.append(
            ActionDecision(
                template_index=int(chosen_t[b]),
                object_ids=tuple(object_ids[b]),
                action=render_action(tmpl, words),
                log_prob=float(logp[b]),
                template_probs=p_t[b].copy(),
                object_probs=object_probs[b],
            )
        )
    return out


def decode(
    v_t: Tensor,
    templates: TemplateSet,
    candidates: Sequence[int],
    params: DecoderParams,
    vocab: Vocabulary,
    mode: str = "sample",
    rng: np.random.Generator | None = None,
) -> ActionDecision:
    return decode_batch(v_t, templates, [candidates], params, vocab, mode, [rng])[0]


@dataclass
class PolicyTerms:
    """Differentiable decoder quantities for a batch of already-chosen actions."""

    template_logp: Tensor  # B x T
    template_probs: Tensor  # B x T
    object_logp: list  # per slot, B x |V|
    object_probs: list  # per slot, B x |V|
    slot_active: np.ndarray  # B x MAX_SLOTS, 1 where the chosen template uses the slot
    chosen_template: np.ndarray
    chosen_objects: np.ndarray  # B x MAX_SLOTS, -1 where unused


def score_actions(
    v_t: Tensor,
    templates: TemplateSet,
    candidates: Sequence[Sequence[int]],
    params: DecoderParams,
    chosen_template: Sequence[int],
    chosen_objects: Sequence[Sequence[int]],
) -> PolicyTerms:
    """Recompute decoder distributions with the chosen items teacher-forced."""
    batch = v_t.shape[0]
    chosen_t = np.asarray(chosen_template, dtype=np.intp)
    slots = templates.slots()[chosen_t]
    objs = np.full((batch, MAX_SLOTS), -1, dtype=np.intp)
    for b, ids in enumerate(chosen_objects):
        if len(ids) != slots[b]:
            raise ValueError(f"row {b}: template {templates[int(chosen_t[b])].text!r} takes {slots[b]} objects, got {len(ids)}")
        objs[b, : len(ids)] = ids
    active = (np.arange(MAX_SLOTS)[None, :] < slots[:, None]).astype(np.float64)

    t_logits = template_logits(v_t, params)
    terms = PolicyTerms(
        template_logp=log_softmax_rows(t_logits),
        template_probs=row_softmax(t_logits),
        object_logp=[],
        object_probs=[],
        slot_active=active,
        chosen_template=chosen_t,
        chosen_objects=objs,
    )
    used = int(slots.max(initial=0))
    if used == 0:
        return terms
    vocab_size = params.W_object.shape[1]
    mask = candidate_mask(candidates, vocab_size)
    for b in range(batch):
        for o in objs[b, : slots[b]]:
            if mask[b, o] != 0.0:
                raise ValueError(f"row {b}: object id {o} is masked out by the graph")
    h = object_start(v_t, params)
    x = row_select(params.template_embedding, chosen_t)
    for slot in range(used):
        logits, h = object_step(h, x, mask, params)
        terms.object_logp.append(log_softmax_rows(logits))
        terms.object_probs.append(row_softmax(logits))
        x = row_select(params.object_embedding, np.maximum(objs[:, slot], 0))
    return terms


def action_log_prob(
    v_t: Tensor,
    templates: TemplateSet,
    candidates: Sequence[int],
    params: DecoderParams,
    template_index: int,
    object_ids: Sequence[int],
) -> Tensor:
    """log pi_T(u) + sum_i log pi_O_i(p_i) for one chosen action (differentiable)."""
    terms = score_actions(v_t, templates, [candidates], params, [template_index], [list(object_ids)])
    pick = np.zeros((terms.template_logp.shape[1], 1))
    pick[template_index] = 1.0
    total = matmul(terms.template_logp, constant(pick))
    for slot, o in enumerate(object_ids):
        pick = np.zeros((terms.object_logp[slot].shape[1], 1))
        pick[o] = 1.0
        total = add(total, matmul(terms.object_logp[slot], constant(pick)))
    return total
