"""Train a small agent for a few thousand steps, evaluate it greedily, and print one trace step.

A full 50,000-step run takes a few minutes on one core; this one is cut short
so it finishes in about a minute. Pass a step count to go longer:

    python3 demos/03_train_and_trace.py 50000
"""
import sys

from shakg import MiniQuest, TrainConfig, evaluate, train_run
from shakg.trace import render_trace, trace_episode

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 12_000
# a short episode cap so a brief run still finishes plenty of episodes
config = TrainConfig(total_steps=steps, seed=0, max_episode_steps=40)


def report(update, parts):
    if update % 10 == 0:
        print(f"update {update:3d}  actor {parts['actor']:+.3f}  critic {parts['critic']:.3f}")


result = train_run(config, on_update=report)
if result.metrics:
    last = result.metrics[-1]
    print(f"\n{len(result.metrics)} episodes finished, last avg100 {last.avg100:.2f}")

score = evaluate(result.model, MiniQuest(), episodes=3, config=config)
print(f"greedy score over 3 episodes: {score:.1f} of {MiniQuest().max_score}\n")

records = trace_episode(result.model, MiniQuest(), config, methods=("max", "top25_sum"))
print(render_trace(records[0], methods=("max", "top25_sum")))
