"""Play the MiniQuest walkthrough while growing a knowledge graph, and show its sub-graph views.

Run: python3 demos/02_walkthrough_graph.py
"""
from shakg import KnowledgeGraph, MiniQuest, graph_update, partition
from shakg.kg import observation_triples
from shakg.trace import PART_LABELS

env = MiniQuest()
obs = env.reset(seed=0)
kg = graph_update(KnowledgeGraph(), observation_triples(obs, "", None))
print(obs.desc)

for action in env.walkthrough():
    print(f"\nvalid here: {sorted(env.valid_actions())}")
    prev_room = obs.room_id
    obs, reward, done, _ = env.step(action)
    kg = graph_update(kg, observation_triples(obs, prev_room, action))
    print(f"> {action}   reward {reward:g}   score {obs.score}")
    print(f"  {obs.feed}")

print(f"\nfinal graph, {len(kg.edges)} edges, player in {kg.current_room!r}")
for strategy in ("full", "no-relational"):
    print(f"\n[{strategy}]")
    for label, part in zip(PART_LABELS[strategy], partition(kg, strategy).parts):
        edges = ", ".join(" ".join(t.as_tuple()) for t in sorted(part.edges)) or "(empty)"
        print(f"  {label:<20} {edges}")
