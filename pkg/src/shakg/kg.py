"""Knowledge-graph memory: triple extraction, per-step update and sub-graph views."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Protocol, Sequence

import numpy as np

if TYPE_CHECKING:
    from .encoders import Vocabulary
    from .env import ObservationBundle

PLAYER = "you"
DIRECTIONS = ("north", "south", "east", "west", "up", "down")

STRATEGIES = ("full", "no-relational", "no-temporal", "no-history")

_SPACES = re.compile(r"\s+")


def normalize(text: str) -> str:
    return _SPACES.sub(" ", text.strip().lower())


@dataclass(frozen=True, order=True)
class Triple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        for attr in ("subject", "relation", "object"):
            value = normalize(getattr(self, attr))
            if not value:
                raise ValueError(f"triple {attr} is empty")
            object.__setattr__(self, attr, value)

    def as_tuple(self) -> tuple[str, str, str]:
        return (self.subject, self.relation, self.object)


@dataclass
class KnowledgeGraph:
    edges: frozenset = frozenset()
    current_room: str = ""
    node_index: dict = field(default_factory=dict)
    last_triples: frozenset = frozenset()

    @property
    def nodes(self) -> set[str]:
        out: set[str] = set()
        for t in self.edges:
            out.add(t.subject)
            out.add(t.object)
        return out

    def ordered_nodes(self) -> list[str]:
        present = self.nodes
        return sorted(present, key=lambda n: self.node_index[n])

    def view(self, edges: Iterable[Triple]) -> "KnowledgeGraph":
        """A sub-graph sharing this graph's room and node numbering."""
        return KnowledgeGraph(
            edges=frozenset(edges),
            current_room=self.current_room,
            node_index=self.node_index,
            last_triples=self.last_triples,
        )


@dataclass
class SubGraphSet:
    parts: list
    strategy: str

    def __len__(self) -> int:
        return len(self.parts)

    def union(self) -> frozenset:
        out: set[Triple] = set()
        for p in self.parts:
            out |= p.edges
        return frozenset(out)


class TripleExtractor(Protocol):
    """Anything that turns one observation into triples (e.g. an OpenIE client)."""

    def __call__(
        self,
        obs: "ObservationBundle",
        prev_room: str,
        nav_action: str | None,
    ) -> set[Triple]: ...


def extract_triples(
    obs: "ObservationBundle",
    prev_room: str,
    nav_action: str | None,
    interactables: Sequence[str],
    inventory_items: Sequence[str],
) -> set[Triple]:
    """Rule-based triples for one step.

    Held items become ``(you, have, item)``, other visible objects are linked
    to the current room, the player is placed in the room, and a successful
    move ``d`` adds ``(previous room, "d of", current room)``.
    """
    room = obs.room_id
    out = {Triple(PLAYER, "have", item) for item in inventory_items}
    held = {normalize(i) for i in inventory_items}
    for o in interactables:
        if normalize(o) not in held:
            out.add(Triple(o, "in", room))
    out.add(Triple(PLAYER, "in", room))
    if nav_action is not None:
        direction = normalize(nav_action)
        if direction in DIRECTIONS and prev_room and normalize(prev_room) != normalize(room):
            out.add(Triple(prev_room, f"{direction} of", room))
    return out


def observation_triples(obs: "ObservationBundle", prev_room: str, nav_action: str | None) -> set[Triple]:
    """Default extractor: uses the object lists the environment reports."""
    return extract_triples(obs, prev_room, nav_action, obs.interactables, obs.inventory_items)


def graph_update(kg: KnowledgeGraph, new_triples: Iterable[Triple]) -> KnowledgeGraph:
    """Drop every edge whose subject is the player, then union in the new triples."""
    new = frozenset(new_triples)
    rooms = [t.object for t in new if t.subject == PLAYER and t.relation == "in"]
    if not rooms:
        raise ValueError("new triples do not locate the player (no ('you', 'in', room) triple)")
    if len(set(rooms)) > 1:
        raise ValueError(f"player located in several rooms at once: {sorted(set(rooms))}")
    kept = {t for t in kg.edges if t.subject != PLAYER}
    edges = frozenset(kept | new)
    index = dict(kg.node_index)
    for t in sorted(new):
        for name in (t.subject, t.object):
            if name not in index:
                index[name] = len(index)
    return KnowledgeGraph(edges=edges, current_room=rooms[0], node_index=index, last_triples=new)


def _is_connectivity(t: Triple) -> bool:
    return t.relation.endswith(" of") and PLAYER not in (t.subject, t.object)


def _base_parts(edges: Iterable[Triple], room: str) -> list[set[Triple]]:
    edges = list(edges)
    connectivity = {t for t in edges if _is_connectivity(t)}
    inventory = {t for t in edges if t.subject == PLAYER and t.relation == "have"}
    # the player's own situation edges ride along with the room contents
    in_room = {t for t in edges if t.relation == "in" and t.object == room}
    in_room |= {t for t in edges if PLAYER in (t.subject, t.object) and t not in inventory}
    history = {t for t in edges if t.subject != PLAYER and t.object != PLAYER}
    return [connectivity, in_room, inventory, history]


def partition(kg: KnowledgeGraph, strategy: str = "full") -> SubGraphSet:
    """Split the graph into sub-graph views according to ``strategy``."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}; expected one of {STRATEGIES}")
    room = kg.current_room
    if strategy == "no-history":
        parts = _base_parts(kg.last_triples, room)
    else:
        parts = _base_parts(kg.edges, room)
        connectivity, in_room, inventory, history = parts
        if strategy == "no-relational":
            parts = [connectivity, in_room | inventory, history]
        elif strategy == "no-temporal":
            moves = {t for t in history if _is_connectivity(t)}
            parts = [connectivity | moves, in_room | (history - moves), inventory]
    return SubGraphSet(parts=[kg.view(p) for p in parts], strategy=strategy)


def num_parts(strategy: str) -> int:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown partition strategy {strategy!r}")
    return 3 if strategy in ("no-relational", "no-temporal") else 4


def object_candidates(kg: KnowledgeGraph, vocab: "Vocabulary") -> list[int]:
    """Vocabulary ids of the words naming graph nodes, ascending (the graph mask)."""
    ids = set()
    for node in kg.nodes:
        for word in node.split(" "):
            if word in vocab:
                ids.add(vocab.id(word))
    return sorted(ids)


def to_adjacency(part: KnowledgeGraph) -> tuple[list[str], np.ndarray]:
    """Undirected boolean adjacency with self-loops, rows in node-index order."""
    nodes = part.ordered_nodes() if part.node_index else sorted(part.nodes)
    pos = {n: i for i, n in enumerate(nodes)}
    adj = np.eye(len(nodes), dtype=bool)
    for t in part.edges:
        i, j = pos[t.subject], pos[t.object]
        adj[i, j] = adj[j, i] = True
    return nodes, adj


def write_snapshot(edges: Iterable[Triple], path: str | Path) -> None:
    """One tab-separated triple per line, lexicographically sorted, UTF-8."""
    lines = sorted("\t".join(t.as_tuple()) for t in edges)
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_snapshot(path: str | Path) -> set[Triple]:
    out = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        s, r, o = line.split("\t")
        out.add(Triple(s, r, o))
    return out


def graph_from_triples(triples: Iterable[Triple], current_room: str | None = None) -> KnowledgeGraph:
    """Build a graph directly from a triple set (tests, snapshots)."""
    triples = sorted(set(triples))
    index: dict[str, int] = {}
    for t in triples:
        for name in (t.subject, t.object):
            index.setdefault(name, len(index))
    if current_room is None:
        rooms = [t.object for t in triples if t.subject == PLAYER and t.relation == "in"]
        current_room = rooms[0] if rooms else ""
    return KnowledgeGraph(
        edges=frozenset(triples),
        current_room=normalize(current_room),
        node_index=index,
        last_triples=frozenset(triples),
    )
