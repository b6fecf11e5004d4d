"""Attention aggregation and per-step trace files for inspecting a greedy episode."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import MiniQuest
from .kg import KnowledgeGraph, partition, to_adjacency
from .model import ShaKgModel

AGGREGATIONS = (
    "max", "mean", "sum",
    "top10_mean", "top10_sum",
    "top25_mean", "top25_sum",
    "top50_mean", "top50_sum",
)

TEXT_LABELS = ("o_desc", "o_inv", "o_feed", "a_past")

PART_LABELS = {
    "full": ("connectivity", "item_in_room", "item_in_inv", "history"),
    "no-history": ("connectivity", "item_in_room", "item_in_inv", "history"),
    "no-relational": ("connectivity", "item_in_room_or_inv", "history"),
    "no-temporal": ("connectivity_moves", "item_in_room_history", "item_in_inv"),
}


def _reduce(alpha: np.ndarray, method: str) -> np.ndarray:
    if method == "max":
        return alpha.max(axis=0)
    if method == "mean":
        return alpha.mean(axis=0)
    if method == "sum":
        return alpha.sum(axis=0)
    k_text, how = method[3:].split("_")
    k = min(int(k_text), alpha.shape[0])
    top = -np.sort(-alpha, axis=0)[:k]
    return top.mean(axis=0) if how == "mean" else top.sum(axis=0)


def aggregate_attention(alpha: np.ndarray, method: str) -> np.ndarray:
    """Reduce each channel's column of ``alpha`` (d x channels), then softmax across channels."""
    if method not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {method!r}; expected one of {AGGREGATIONS}")
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim != 2 or alpha.shape[0] == 0:
        raise ValueError(f"expected a non-empty d x channels matrix, got shape {alpha.shape}")
    z = _reduce(alpha, method)
    e = np.exp(z - z.max())
    return e / e.sum()


def format_values(values: Sequence[float]) -> list[str]:
    return ["%.3f" % v for v in values]


@dataclass
class StepTraceRecord:
    step: int
    desc: str
    inv: str
    feed: str
    last_action: str
    triples: list  # sorted (subject, relation, object) tuples
    att_high: dict  # method -> probability vector over text channels (empty if absent)
    att_low: dict  # method -> probability vector over sub-graphs (empty if absent)
    low_labels: tuple
    action: str
    reward: float
    score: int
    top_nodes: dict = field(default_factory=dict)  # sub-graph label -> up to 3 node names


def _fmt_number(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def render_trace(record: StepTraceRecord, methods: Sequence[str] = AGGREGATIONS) -> str:
    lines = [
        f"----- ===== Step {record.step} ===== -----",
        "===== 1. Textual obs: ",
        f"o_desc: {record.desc}",
        f"o_inv: {record.inv}",
        f"o_feed: {record.feed}",
        f"a_past: {record.last_action}",
        "===== 2. Newly extracted triplets",
        repr(list(record.triples)),
        "===== 3. Attention values: ",
    ]
    for prefix, labels, blocks in (
        ("attH", TEXT_LABELS, record.att_high),
        ("attL", record.low_labels, record.att_low),
    ):
        if not blocks:
            continue
        lines.append(f"----- {prefix}: " + ", ".join(labels))
        for m in methods:
            lines.append(f"{prefix + '_' + m:<15}: " + repr(format_values(blocks[m])))
    if record.top_nodes:
        lines.append("----- top nodes per sub-graph")
        for label, names in record.top_nodes.items():
            lines.append(f"{label}: " + repr(list(names)))
    lines += [
        "===== 4. Chosen action and reward",
        f"Action: {record.action}",
        f"Reward: {_fmt_number(record.reward)}|Score: {_fmt_number(record.score)}",
        "",
    ]
    return "\n".join(lines) + "\n"


def top_nodes(kg: KnowledgeGraph, strategy: str, attention: Sequence[np.ndarray], labels: Sequence[str], k: int = 3) -> dict:
    """Rank each sub-graph's nodes by the mean attention they receive from their neighbours."""
    out = {}
    for label, part, att in zip(labels, partition(kg, strategy).parts, attention):
        nodes, adj = to_adjacency(part)
        if not nodes:
            out[label] = []
            continue
        n = len(nodes)
        a = att[:n, :n] * adj
        incoming = a.sum(axis=0) / adj.sum(axis=0)
        order = sorted(range(n), key=lambda j: (-round(incoming[j], 12), nodes[j]))
        out[label] = [nodes[j] for j in order[:k]]
    return out


def trace_episode(
    model: ShaKgModel,
    env: MiniQuest,
    config=None,
    methods: Sequence[str] = AGGREGATIONS,
    node_ranking: bool = False,
) -> list[StepTraceRecord]:
    """Play one greedy episode and collect a trace record per environment step."""
    from .trainer import TrainConfig, run_episode

    config = config or TrainConfig(variant=model.variant, strategy=model.strategy)
    labels = PART_LABELS[model.strategy]
    records: list[StepTraceRecord] = []

    def on_step(step, before, action, reward, after, decision, encoded, inputs, new_triples):
        obs, kg = before
        enc = encoded.encoding
        high = {m: aggregate_attention(enc.alpha_high[0], m) for m in methods} if enc.alpha_high is not None else {}
        low = {m: aggregate_attention(enc.alpha_low[0], m) for m in methods} if enc.alpha_low is not None else {}
        nodes = {}
        if node_ranking and model.gat_subs:
            per_part = [encoded.graph_attention[f"sub{i}"][0] for i in range(len(model.gat_subs))]
            nodes = top_nodes(kg, model.strategy, per_part, labels)
        records.append(
            StepTraceRecord(
                step=step, desc=obs.desc, inv=obs.inv, feed=obs.feed, last_action=obs.last_action,
                triples=sorted(t.as_tuple() for t in kg.last_triples),
                att_high=high, att_low=low, low_labels=labels,
                action=action, reward=reward, score=after.score, top_nodes=nodes,
            )
        )

    run_episode(env, config, model, mode="greedy", rng=np.random.default_rng(0), on_step=on_step)
    return records


def write_trace(records: Sequence[StepTraceRecord], path: str | Path, methods: Sequence[str] = AGGREGATIONS) -> None:
    text = "".join(render_trace(r, methods) for r in records)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
