"""The full agent network: encoders -> stacked attention -> decoders + critic."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import VARIANTS, ShaParams, StateEncoding, stacked_attention
from .autodiff import ParameterStore, Tensor, concat_rows, constant
from .decoder import ActionDecision, DecoderParams, PolicyTerms, TemplateSet, decode_batch, score_actions
from .encoders import (
    SCORE_BITS,
    GatOutput,
    GatParams,
    GraphInput,
    GruParams,
    Vocabulary,
    encode_components,
    encode_graphs,
    encode_score,
    graph_input,
    tokenize,
)
from .env import ObservationBundle
from .kg import KnowledgeGraph, num_parts, object_candidates, partition, to_adjacency
from .layers import linear

TEXT_COMPONENTS = ("desc", "inv", "feed", "last_action")


@dataclass(frozen=True)
class Dims:
    d_high: int = 100
    d_low: int = 50
    d_emb: int = 50
    d_node: int = 25
    d_kg: int = 50
    d_score: int = SCORE_BITS
    d_dec: int = 50


@dataclass
class StateInputs:
    """Everything the network reads for one state, already converted to ids."""

    text: tuple  # four token-id tuples in TEXT_COMPONENTS order
    score: int
    full_graph: GraphInput
    sub_graphs: tuple
    candidates: tuple


@dataclass
class EncodedBatch:
    encoding: StateEncoding
    value: Tensor  # B x 1
    graph_attention: dict = field(default_factory=dict)  # channel -> per-state node attention


class ShaKgModel:
    """Parameters plus the batched forward pass for one model variant."""

    def __init__(
        self,
        vocab: Vocabulary,
        templates: TemplateSet,
        variant: str = "full",
        strategy: str = "full",
        seed: int = 0,
        dims: Dims = Dims(),
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
        self.vocab = vocab
        self.templates = templates
        self.variant = variant
        self.strategy = strategy
        self.dims = dims
        self.m = num_parts(strategy)
        # graph-encoder invocations per channel, counted for every variant
        self.graph_calls = {"full": 0, "sub": 0}
        store = self.params = ParameterStore(seed)
        v = len(vocab)
        self.text = {
            name: GruParams.create(store, f"text.{name}", v, dims.d_emb, dims.d_high) for name in TEXT_COMPONENTS
        }
        node_embedding = store.add("gat.node_embedding", v, dims.d_node, fan_in=1)
        self.gat_full = None
        if variant != "no-high-level":
            self.gat_full = GatParams.create(store, "gat.full", node_embedding, dims.d_kg)
        self.gat_subs = []
        if variant != "no-low-level":
            self.gat_subs = [GatParams.create(store, f"gat.sub{i}", node_embedding, dims.d_low) for i in range(self.m)]
        self.sha = ShaParams.create(store, variant, dims.d_high, dims.d_low, dims.d_kg, dims.d_score)
        self.decoder = DecoderParams.create(store, len(templates), v, dims.d_low, dims.d_dec, dims.d_dec)
        self.W_value = store.add("critic.W", dims.d_low, 1)
        self.b_value = store.add("critic.b", 1, 1, init="zeros")

    # -- inputs ------------------------------------------------------------

    def prepare(self, obs: ObservationBundle, kg: KnowledgeGraph) -> StateInputs:
        texts = (obs.desc, obs.inv, obs.feed, obs.last_action)
        subs = partition(kg, self.strategy)
        return StateInputs(
            text=tuple(tuple(tokenize(t, self.vocab)) for t in texts),
            score=int(obs.score),
            full_graph=graph_input(*to_adjacency(kg), self.vocab),
            sub_graphs=tuple(graph_input(*to_adjacency(p), self.vocab) for p in subs.parts),
            candidates=tuple(object_candidates(kg, self.vocab)),
        )

    # -- forward -----------------------------------------------------------

    def gat_calls(self) -> dict[str, int]:
        calls = {}
        if self.gat_full is not None:
            calls["full"] = self.gat_full.calls
        for i, g in enumerate(self.gat_subs):
            calls[f"sub{i}"] = g.calls
        return calls

    def encode(self, batch: Sequence[StateInputs]) -> EncodedBatch:
        text_vectors = [
            encode_components([s.text[k] for s in batch], self.text[name]) for k, name in enumerate(TEXT_COMPONENTS)
        ]
        v_text = concat_rows(text_vectors)
        v_score = constant(np.stack([encode_score(s.score) for s in batch]))
        graph_attention: dict[str, list] = {}

        def full_graph() -> Tensor:
            self.graph_calls["full"] += 1
            out: GatOutput = encode_graphs([s.full_graph for s in batch], self.gat_full)
            graph_attention["full"] = out.attention
            return out.vectors

        def sub_graphs() -> Tensor:
            self.graph_calls["sub"] += 1
            vectors = []
            for i, gat in enumerate(self.gat_subs):
                out = encode_graphs([s.sub_graphs[i] for s in batch], gat)
                graph_attention[f"sub{i}"] = out.attention
                vectors.append(out.vectors)
            return concat_rows(vectors)

        enc = stacked_attention(
            v_text, v_score, self.sha, self.variant,
            v_kg_full=full_graph, v_kg_subs=sub_graphs, text_channels=len(TEXT_COMPONENTS),
        )
        value = linear(enc.v_t, self.W_value, self.b_value)
        return EncodedBatch(encoding=enc, value=value, graph_attention=graph_attention)

    def act(
        self,
        batch: Sequence[StateInputs],
        mode: str = "sample",
        rngs: Sequence[np.random.Generator] | None = None,
        encoded: EncodedBatch | None = None,
    ) -> tuple[list[ActionDecision], EncodedBatch]:
        encoded = encoded if encoded is not None else self.encode(batch)
        decisions = decode_batch(
            encoded.encoding.v_t, self.templates, [s.candidates for s in batch],
            self.decoder, self.vocab, mode, rngs,
        )
        return decisions, encoded

    def score(
        self,
        batch: Sequence[StateInputs],
        templates: Sequence[int],
        objects: Sequence[Sequence[int]],
        encoded: EncodedBatch | None = None,
    ) -> tuple[PolicyTerms, EncodedBatch]:
        encoded = encoded if encoded is not None else self.encode(batch)
        terms = score_actions(
            encoded.encoding.v_t, self.templates, [s.candidates for s in batch],
            self.decoder, templates, objects,
        )
        return terms, encoded

    def signature(self) -> dict:
        """What a checkpoint must agree on to be loadable into this model."""
        return {
            "variant": self.variant,
            "strategy": self.strategy,
            "vocab": self.vocab.words,
            "templates": [t.text for t in self.templates],
            "dims": self.dims.__dict__,
        }
