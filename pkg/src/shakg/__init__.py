"""Knowledge-graph agent with stacked hierarchical attention for text games."""
from .env import MiniQuest, default_templates, miniquest_spec
from .kg import KnowledgeGraph, Triple, graph_update, partition
from .model import ShaKgModel
from .trainer import TrainConfig, evaluate, train_run

__all__ = [
    "KnowledgeGraph",
    "MiniQuest",
    "ShaKgModel",
    "TrainConfig",
    "Triple",
    "default_templates",
    "evaluate",
    "graph_update",
    "miniquest_spec",
    "partition",
    "train_run",
]
