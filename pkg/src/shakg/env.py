"""MiniQuest: a deterministic toy text game with a brute-force valid-action oracle."""
from __future__ import annotations

import configparser
import copy
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .decoder import SLOT, TemplateSet, render_action

NOTHING_HAPPENS = "Nothing happens"
EMPTY_HANDED = "you are empty-handed"
INVENTORY = "inventory"

DATA_DIR = Path(__file__).parent / "data"


class WorldSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ObservationBundle:
    desc: str
    inv: str
    feed: str
    last_action: str
    score: int
    interactables: tuple = ()
    inventory_items: tuple = ()
    room_id: str = ""


@dataclass
class Room:
    title: str
    description: str
    exits: dict


@dataclass
class GameObject:
    location: str
    portable: bool = True
    container: bool = False
    locked: bool = False
    open: bool = True
    unlocks_with: str | None = None


@dataclass
class Rule:
    name: str
    trigger: str
    reward: int


@dataclass
class WorldSpec:
    name: str
    start: str
    rooms: dict
    objects: dict
    rules: list
    walkthrough: list = field(default_factory=list)

    @property
    def max_score(self) -> int:
        return sum(r.reward for r in self.rules)

    def validate(self) -> None:
        if self.start not in self.rooms:
            raise WorldSpecError(f"start room {self.start!r} is not defined")
        for rid, room in self.rooms.items():
            for d, target in room.exits.items():
                if target not in self.rooms:
                    raise WorldSpecError(f"room {rid!r}: exit {d} leads to unknown room {target!r}")
        for oid, obj in self.objects.items():
            loc = obj.location
            if loc != INVENTORY and loc not in self.rooms and loc not in self.objects:
                raise WorldSpecError(f"object {oid!r}: unknown location {loc!r}")
            if loc in self.objects and not self.objects[loc].container:
                raise WorldSpecError(f"object {oid!r} is inside {loc!r}, which is not a container")
            if obj.unlocks_with is not None and obj.unlocks_with not in self.objects:
                raise WorldSpecError(f"object {oid!r}: unknown key {obj.unlocks_with!r}")
        for r in self.rules:
            if r.reward < 0:
                raise WorldSpecError(f"rule {r.name!r}: negative reward")


def _flag(value: str) -> bool:
    v = value.strip().lower()
    if v in ("yes", "true", "1"):
        return True
    if v in ("no", "false", "0"):
        return False
    raise WorldSpecError(f"not a yes/no value: {value!r}")


def parse_world(text: str) -> WorldSpec:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise WorldSpecError(str(exc)) from exc
    if "world" not in parser:
        raise WorldSpecError("missing [world] section")
    head = parser["world"]
    rooms, objects, rules = {}, {}, []
    for section in parser.sections():
        kind, _, ident = section.partition(" ")
        body = parser[section]
        if kind == "room":
            exits = {}
            for item in body.get("exits", "").split(","):
                if item.strip():
                    d, _, target = item.partition(":")
                    exits[d.strip()] = target.strip()
            rooms[ident] = Room(body.get("title", ident.title()), body.get("description", ""), exits)
        elif kind == "object":
            container = _flag(body.get("container", "no"))
            objects[ident] = GameObject(
                location=body["location"].strip(),
                portable=_flag(body.get("portable", "yes")),
                container=container,
                locked=_flag(body.get("locked", "no")),
                open=_flag(body.get("open", "no" if container else "yes")),
                unlocks_with=body.get("unlocks_with"),
            )
        elif kind == "rule":
            rules.append(Rule(ident, " ".join(body["trigger"].split()), int(body["reward"])))
        elif kind != "world":
            raise WorldSpecError(f"unknown section [{section}]")
    walk = [a.strip() for a in head.get("walkthrough", "").split(";") if a.strip()]
    spec = WorldSpec(head.get("name", "world"), head.get("start", ""), rooms, objects, rules, walk)
    spec.validate()
    return spec


def load_world(path: str | Path) -> WorldSpec:
    return parse_world(Path(path).read_text(encoding="utf-8"))


def miniquest_spec() -> WorldSpec:
    return load_world(DATA_DIR / "miniquest.world")


def default_templates() -> TemplateSet:
    return TemplateSet.load(DATA_DIR / "templates.txt")


@dataclass
class WorldState:
    room: str
    locations: dict
    locked: set
    opened: set
    score: int = 0
    fired: set = field(default_factory=set)

    def key(self) -> tuple:
        return (
            self.room,
            tuple(sorted(self.locations.items())),
            tuple(sorted(self.locked)),
            tuple(sorted(self.opened)),
            self.score,
            tuple(sorted(self.fired)),
        )


class TextGameEnv(Protocol):
    """What the trainer needs from a game; a Jericho adapter would implement this."""

    max_score: int

    def reset(self, seed: int | None = None) -> ObservationBundle: ...

    def step(self, action: str) -> tuple[ObservationBundle, float, bool, bool]: ...

    def valid_actions(self) -> set[str]: ...


class MiniQuest:
    """Deterministic interpreter for a :class:`WorldSpec`.

    Valid actions are enumerated by brute force over every template and
    object combination on a cloned state.  Results are memoised per world
    state; ``cache`` may be shared between instances of the same world.
    """

    def __init__(self, spec: WorldSpec | None = None, templates: TemplateSet | None = None, cache: dict | None = None):
        self.spec = spec if spec is not None else miniquest_spec()
        self.spec.validate()
        self.templates = templates if templates is not None else default_templates()
        self.max_score = self.spec.max_score
        self._cache = cache if cache is not None else {}
        self.state: WorldState | None = None
        self.last_action = "look"
        self.last_feed = ""

    # -- lifecycle ---------------------------------------------------------

    def reset(self, seed: int | None = None) -> ObservationBundle:
        spec = self.spec
        self.state = WorldState(
            room=spec.start,
            locations={oid: o.location for oid, o in spec.objects.items()},
            locked={oid for oid, o in spec.objects.items() if o.locked},
            opened={oid for oid, o in spec.objects.items() if o.container and o.open},
        )
        self.last_action = "look"
        self.last_feed = self._describe()
        return self.observe()

    def clone(self) -> "MiniQuest":
        other = MiniQuest.__new__(MiniQuest)
        other.spec = self.spec
        other.templates = self.templates
        other.max_score = self.max_score
        other._cache = self._cache
        other.state = copy.deepcopy(self.state)
        other.last_action = self.last_action
        other.last_feed = self.last_feed
        return other

    @property
    def done(self) -> bool:
        return self.state.score >= self.max_score

    # -- observation -------------------------------------------------------

    def _visible(self) -> list[str]:
        st = self.state
        out = []
        for oid in self.spec.objects:
            loc = st.locations[oid]
            if loc == st.room:
                out.append(oid)
            elif loc in self.spec.objects and loc in st.opened and st.locations[loc] == st.room:
                out.append(oid)
        return out

    def _inventory(self) -> list[str]:
        return [oid for oid in self.spec.objects if self.state.locations[oid] == INVENTORY]

    def _describe(self) -> str:
        st = self.state
        room = self.spec.rooms[st.room]
        parts = [f"{room.title}. {room.description}"]
        for oid, obj in self.spec.objects.items():
            if st.locations[oid] != st.room:
                continue
            parts.append(f"There is a {oid} here.")
            if obj.container:
                if oid in st.locked:
                    parts.append(f"The {oid} is locked.")
                elif oid not in st.opened:
                    parts.append(f"The {oid} is closed.")
                else:
                    inside = [c for c in self.spec.objects if st.locations[c] == oid]
                    if inside:
                        parts.append(f"The {oid} is open and contains a {' and a '.join(inside)}.")
                    else:
                        parts.append(f"The {oid} is open and empty.")
        return " ".join(parts)

    def _inventory_text(self) -> str:
        items = self._inventory()
        if not items:
            return EMPTY_HANDED
        return "you are carrying " + " and ".join(f"a {i}" for i in items)

    def observe(self) -> ObservationBundle:
        return ObservationBundle(
            desc=self._describe(),
            inv=self._inventory_text(),
            feed=self.last_feed,
            last_action=self.last_action,
            score=self.state.score,
            interactables=tuple(self._visible()),
            inventory_items=tuple(self._inventory()),
            room_id=self.state.room,
        )

    # -- dynamics ----------------------------------------------------------

    def _apply(self, words: list[str]) -> tuple[str, str | None] | None:
        """Mutate the state for a parsed action; ``None`` means invalid."""
        st = self.state
        spec = self.spec
        parsed = self.templates.parse(" ".join(words))
        if parsed is None:
            return None
        tidx, objs = parsed
        verb = self.templates[tidx].tokens[0]
        if any(o not in spec.objects for o in objs):
            return None
        visible = set(self._visible())
        held = set(self._inventory())

        if not objs:
            if verb == "look":
                return self._describe(), None
            target = spec.rooms[st.room].exits.get(verb)
            if target is None:
                return None
            st.room = target
            return self._describe(), None

        obj = objs[0]
        if verb == "take" and len(objs) == 1:
            if obj in visible and spec.objects[obj].portable:
                st.locations[obj] = INVENTORY
                return "Taken.", f"take {obj}"
        elif verb == "drop" and len(objs) == 1:
            if obj in held:
                st.locations[obj] = st.room
                return "Dropped.", f"drop {obj}"
        elif verb == "open" and len(objs) == 1:
            o = spec.objects[obj]
            if obj in visible and o.container and obj not in st.locked and obj not in st.opened:
                st.opened.add(obj)
                return "Opened.", f"open {obj}"
        elif verb == "close" and len(objs) == 1:
            if obj in visible and obj in st.opened:
                st.opened.discard(obj)
                return "Closed.", f"close {obj}"
        elif verb == "unlock":
            o = spec.objects[obj]
            key = objs[1] if len(objs) == 2 else o.unlocks_with
            if obj in visible and obj in st.locked and key is not None and key == o.unlocks_with and key in held:
                st.locked.discard(obj)
                return "Unlocked.", f"unlock {obj}"
        elif verb == "put" and len(objs) == 2:
            item, box = objs
            if item in held and item != box and box in visible and spec.objects[box].container and box in st.opened:
                st.locations[item] = box
                return "Done.", f"put {item} in {box}"
        return None

    def step(self, action: str) -> tuple[ObservationBundle, float, bool, bool]:
        if self.state is None:
            raise RuntimeError("step() before reset()")
        words = action.lower().split()
        result = self._apply(words) if words else None
        reward = 0
        if result is None:
            valid = False
            self.last_feed = NOTHING_HAPPENS
        else:
            valid = True
            self.last_feed, event = result
            if event is not None:
                for rule in self.spec.rules:
                    if rule.trigger == event and rule.name not in self.state.fired:
                        self.state.fired.add(rule.name)
                        reward += rule.reward
            self.state.score += reward
        self.last_action = " ".join(words)
        return self.observe(), float(reward), self.done, valid

    # -- oracle ------------------------------------------------------------

    def candidate_actions(self) -> list[tuple[int, tuple[str, ...]]]:
        names = list(self.spec.objects)
        out = []
        for i, t in enumerate(self.templates):
            for objs in itertools.product(names, repeat=t.slots):
                out.append((i, objs))
        return out

    def valid_pairs(self) -> list[tuple[int, tuple[str, ...]]]:
        """(template index, objects) for every valid action in the current state."""
        key = self.state.key()
        hit = self._cache.get(key)
        if hit is None:
            hit = []
            for tidx, objs in self.candidate_actions():
                probe = self.clone()
                if probe._apply(render_action(self.templates[tidx], objs).split()) is not None:
                    hit.append((tidx, objs))
            self._cache[key] = hit
        return list(hit)

    def valid_actions(self) -> set[str]:
        return {render_action(self.templates[t], objs) for t, objs in self.valid_pairs()}

    def walkthrough(self) -> list[str]:
        """The stored walkthrough, replayed on a fresh copy to prove it reaches max score."""
        probe = MiniQuest(self.spec, self.templates)
        probe.reset()
        for action in self.spec.walkthrough:
            _, _, _, valid = probe.step(action)
            if not valid:
                raise RuntimeError(f"walkthrough action {action!r} is invalid on replay")
        if probe.state.score != self.max_score:
            raise RuntimeError(f"walkthrough reaches {probe.state.score}, expected {self.max_score}")
        return list(self.spec.walkthrough)


def world_texts(spec: WorldSpec, templates: TemplateSet) -> list[str]:
    """Every string the interpreter can emit, for building a vocabulary."""
    texts = [NOTHING_HAPPENS, EMPTY_HANDED, "you are carrying a and", "Taken. Dropped. Opened. Closed. Unlocked. Done."]
    texts.append("There is a here. The is locked. The is closed. The is open and contains a and empty.")
    for room in spec.rooms.values():
        texts += [room.title, room.description, " ".join(room.exits)]
    texts += list(spec.rooms) + list(spec.objects)
    texts += [t.text.replace(SLOT, "") for t in templates]
    return texts
