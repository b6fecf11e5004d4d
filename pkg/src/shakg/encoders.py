"""Vocabulary, per-component GRU text encoders, score bits and GAT graph encoders."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (
    ParameterStore,
    Tensor,
    add,
    constant,
    leaky_relu,
    matmul,
    mul,
    row_select,
    row_softmax,
    tanh,
)
from .layers import GruCell, ones, run_gru

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
SCORE_BITS = 16
SCORE_CLAMP = 2**15 - 1

_WORD = re.compile(r"[a-z0-9]+")


class Vocabulary:
    """Token <-> id map; ids 0 and 1 are reserved for padding and unknown words."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._ids: dict[str, int] = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        self._tokens: list[str] = [PAD_TOKEN, UNK_TOKEN]
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._ids:
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
        return self._ids[token]

    def id(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def __contains__(self, token: str) -> bool:
        return token in self._ids and self._ids[token] > UNK

    def __len__(self) -> int:
        return len(self._tokens)

    @property
    def words(self) -> list[str]:
        return self._tokens[2:]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        words = [w.strip() for w in Path(path).read_text(encoding="utf-8").splitlines()]
        return cls(w for w in words if w)

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: dict[str, None] = {}
        for text in texts:
            for w in words_of(text):
                seen.setdefault(w, None)
        return cls(sorted(seen))


def words_of(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in words_of(text)]


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.token(i) for i in ids)


def encode_score(score: int) -> np.ndarray:
    """16 bits: little-endian magnitude (clamped to 2**15-1) plus a sign bit."""
    magnitude = min(abs(int(score)), SCORE_CLAMP)
    bits = np.array([(magnitude >> k) & 1 for k in range(SCORE_BITS - 1)] + [int(score < 0)], dtype=np.float64)
    return bits


# ---------------------------------------------------------------------------
# text


@dataclass
class GruParams:
    embedding: Tensor
    cell: GruCell

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, vocab_size: int, d_emb: int = 50, d_hidden: int = 100):
        embedding = store.add(f"{prefix}.embedding", vocab_size, d_emb, fan_in=1)
        return cls(embedding=embedding, cell=GruCell.create(store, prefix, d_emb, d_hidden))

    @property
    def hidden(self) -> int:
        return self.cell.hidden


def encode_components(token_lists: Sequence[Sequence[int]], params: GruParams) -> Tensor:
    """Batched GRU encoding: one ``1 x d`` row per token sequence."""
    return run_gru(params.cell, params.embedding, token_lists)


def encode_component(tokens: Sequence[int], params: GruParams) -> Tensor:
    return encode_components([tokens], params)


# ---------------------------------------------------------------------------
# graphs


@dataclass
class GraphInput:
    """Node first-word ids plus boolean adjacency (self-loops included)."""

    word_ids: tuple
    adjacency: np.ndarray

    @property
    def size(self) -> int:
        return len(self.word_ids)


def graph_input(nodes: Sequence[str], adjacency: np.ndarray, vocab: Vocabulary) -> GraphInput:
    ids = tuple(vocab.id(words_of(n)[0]) if words_of(n) else UNK for n in nodes)
    return GraphInput(word_ids=ids, adjacency=np.asarray(adjacency, dtype=bool))


@dataclass
class GatParams:
    node_embedding: Tensor
    W: Tensor
    a: Tensor
    W_out: Tensor
    b_out: Tensor
    calls: int = field(default=0)

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, node_embedding: Tensor, d_out: int):
        d = node_embedding.shape[1]
        return cls(
            node_embedding=node_embedding,
            W=store.add(f"{prefix}.W", d, d),
            a=store.add(f"{prefix}.a", 2 * d, 1),
            W_out=store.add(f"{prefix}.W_out", d, d_out),
            b_out=store.add(f"{prefix}.b_out", 1, d_out, init="zeros"),
        )

    @property
    def d_out(self) -> int:
        return self.W_out.shape[1]


@dataclass
class GatOutput:
    vectors: Tensor
    # per graph: (n x n) attention over neighbours, rows sum to 1
    attention: list = field(default_factory=list)


MASKED = -1e30


def encode_graphs(graphs: Sequence[GraphInput], params: GatParams) -> GatOutput:
    """Single-head GAT layer, tanh, mean pooling and an output linear, batched.

    Graphs are padded to a common node count.  Padding nodes attend only to
    themselves and are excluded from the pooled mean, so they never touch the
    result.  An empty graph maps to the zero vector.
    """
    params.calls += 1
    batch = len(graphs)
    d = params.W.shape[0]
    n = max(1, max((g.size for g in graphs), default=0))
    total = batch * n

    ids = np.zeros(total, dtype=np.intp)
    mask = np.full((total, n), MASKED)
    pool = np.zeros((batch, total))
    nonempty = np.zeros((batch, 1))
    for b, g in enumerate(graphs):
        k = g.size
        rows = slice(b * n, b * n + k)
        ids[rows] = g.word_ids
        if k:
            mask[rows, :k] = np.where(g.adjacency, 0.0, MASKED)
            pool[b, b * n : b * n + k] = 1.0 / k
            nonempty[b, 0] = 1.0
        for i in range(k, n):
            mask[b * n + i, i] = 0.0

    wh = matmul(row_select(params.node_embedding, ids), params.W)
    a_src = row_select(params.a, np.arange(d))
    a_dst = row_select(params.a, np.arange(d, 2 * d))
    src = matmul(matmul(wh, a_src), ones(1, n))
    # dst[(b, i), j] = s_dst[(b, j)]
    spread = mul(matmul(matmul(wh, a_dst), ones(1, n)), constant(np.tile(np.eye(n), (batch, 1))))
    per_graph = matmul(constant(np.kron(np.eye(batch), np.ones((1, n)))), spread)
    dst = row_select(per_graph, np.repeat(np.arange(batch), n))
    scores = add(leaky_relu(add(src, dst), slope=0.2), constant(mask))
    alpha = row_softmax(scores)

    mixed = None
    base = np.arange(batch) * n
    for j in range(n):
        pick = np.zeros((n, d))
        pick[j] = 1.0
        weight = matmul(alpha, constant(pick))
        neighbour = row_select(wh, np.repeat(base + j, n))
        term = mul(weight, neighbour)
        mixed = term if mixed is None else add(mixed, term)
    hidden = tanh(mixed)
    pooled = matmul(constant(pool), hidden)
    vectors = add(matmul(pooled, params.W_out), matmul(constant(nonempty), params.b_out))

    attention = []
    for b, g in enumerate(graphs):
        k = g.size
        attention.append(alpha.data[b * n : b * n + k, :k].copy())
    return GatOutput(vectors=vectors, attention=attention)


def encode_graph(graph: GraphInput, params: GatParams) -> GatOutput:
    return encode_graphs([graph], params)
