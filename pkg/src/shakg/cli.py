"""Command-line entry point: ``shakg train | eval | trace | combine``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .decoder import TemplateSet
from .encoders import Vocabulary
from .env import DATA_DIR, MiniQuest, WorldSpecError, load_world
from .trainer import TrainConfig, TrainingFault, evaluate, scripted_policy

EXIT_OK, EXIT_CONFIG, EXIT_FAULT = 0, 1, 2

log = logging.getLogger("shakg")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig(TrainConfig):
    world: str = str(DATA_DIR / "miniquest.world")
    templates: str = str(DATA_DIR / "templates.txt")
    vocab: str = str(DATA_DIR / "vocab.txt")
    out: str = "runs/default"
    checkpoint_interval: int = 0  # in updates; 0 keeps only the final checkpoint
    trace: bool = False

    def validate(self) -> None:
        super().validate()
        for name in ("world", "templates", "vocab"):
            if not Path(getattr(self, name)).is_file():
                raise ConfigError(f"{name} file not found: {getattr(self, name)}")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{f.name: getattr(self, f.name) for f in fields(TrainConfig)})


def _coerce(raw: str, current):
    if isinstance(current, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"not a boolean: {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str, base: RunConfig | None = None, origin: str = "<config>") -> RunConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    cfg = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        try:
            setattr(cfg, key, _coerce(value, getattr(cfg, key)))
        except ValueError as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key}: {exc}") from exc
    return cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(p.read_text(encoding="utf-8"), origin=str(p))


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items())


FLAG_MAP = {
    "seed": "seed", "steps": "total_steps", "variant": "variant", "strategy": "strategy",
    "out": "out", "lr": "lr", "num_envs": "num_envs", "checkpoint_interval": "checkpoint_interval",
    "world": "world", "templates": "templates", "vocab": "vocab",
}


def _apply_flags(cfg: RunConfig, args) -> RunConfig:
    for flag, key in FLAG_MAP.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "trace", False):
        cfg.trace = True
    return cfg


def _load_env(cfg: RunConfig):
    spec = load_world(cfg.world)
    templates = TemplateSet.load(cfg.templates)
    vocab = Vocabulary.load(cfg.vocab)
    return spec, templates, vocab


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .model import ShaKgModel
    from .persistence import save_checkpoint
    from .trainer import iter_training

    try:
        cfg = _apply_flags(load_config(args.config), args)
        cfg.validate()
        spec, templates, vocab = _load_env(cfg)
    except (ConfigError, ValueError, WorldSpecError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    model = ShaKgModel(vocab, templates, variant=cfg.variant, strategy=cfg.strategy, seed=cfg.seed)
    cache: dict = {}
    factory = lambda: MiniQuest(spec, templates, cache)  # noqa: E731
    tcfg = cfg.train_config()

    def on_update(update: int, parts: dict) -> None:
        if cfg.checkpoint_interval and (update + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(out / f"checkpoint_{update + 1:05d}.ckpt", model, tcfg)
        if update % 20 == 0:
            log.info("update %d: %s", update, " ".join(f"{k}={v:.4f}" for k, v in parts.items() if k != "update"))

    from .persistence import MetricsWriter

    writer = MetricsWriter(out / "metrics.csv")
    try:
        for row in iter_training(tcfg, model, factory, on_update, dump_dir=out):
            writer.write(row)
    except TrainingFault as exc:
        print(f"training fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except Exception as exc:  # noqa: BLE001
        print(f"training fault: {exc!r}", file=sys.stderr)
        return EXIT_FAULT
    finally:
        writer.close()
    save_checkpoint(out / "final.ckpt", model, tcfg)
    if cfg.trace:
        from .trace import trace_episode, write_trace

        write_trace(trace_episode(model, factory(), tcfg), out / "trace.txt")
    return EXIT_OK


def _load_for_eval(args):
    """Returns (model or None, scripted actions or None, run config, env)."""
    from .persistence import CheckpointError, model_from_checkpoint

    cfg = _apply_flags(load_config(args.config), args)
    cfg.validate()
    spec, templates, _ = _load_env(cfg)
    if not Path(args.checkpoint).is_file():
        raise CheckpointError(f"checkpoint not found: {args.checkpoint}")
    model, header = model_from_checkpoint(args.checkpoint)
    env = MiniQuest(spec, templates if model is None else model.templates)
    return model, header.get("actions"), cfg, env


def cmd_eval(args) -> int:
    from .persistence import CheckpointError

    try:
        model, actions, cfg, env = _load_for_eval(args)
    except (ConfigError, CheckpointError, ValueError, WorldSpecError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    tcfg = cfg.train_config()
    policy = scripted_policy(actions) if model is None else None
    score = evaluate(model, env, args.episodes, tcfg, policy=policy, seed=cfg.seed)
    print(f"{score:.1f}")
    return EXIT_OK


def cmd_trace(args) -> int:
    from .persistence import CheckpointError
    from .trace import AGGREGATIONS, trace_episode, write_trace

    try:
        model, actions, cfg, env = _load_for_eval(args)
        if model is None:
            raise CheckpointError("scripted checkpoints carry no attention to trace")
        methods = AGGREGATIONS if args.aggregation is None else (args.aggregation,)
        if args.aggregation is not None and args.aggregation not in AGGREGATIONS:
            raise ConfigError(f"unknown aggregation {args.aggregation!r}")
    except (ConfigError, CheckpointError, ValueError, WorldSpecError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    tcfg = cfg.train_config()
    tcfg.variant, tcfg.strategy = model.variant, model.strategy
    records = trace_episode(model, env, tcfg, methods, node_ranking=args.nodes)
    write_trace(records, args.output, methods)
    return EXIT_OK


def cmd_combine(args) -> int:
    from .persistence import combine_metrics, write_combined

    try:
        rows = combine_metrics(args.metrics, grid=args.grid)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.output:
        write_combined(rows, args.output)
    else:
        print("step,mean,std,runs")
        for r in rows:
            print(f"{r['step']},{r['mean']:.4f},{r['std']:.4f},{r['runs']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shakg", description="Knowledge-graph attention agent for text games.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--world")
        p.add_argument("--templates")
        p.add_argument("--vocab")

    p = sub.add_parser("train", help="train an agent with A2C")
    common(p)
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--variant")
    p.add_argument("--strategy", help="sub-graph partition strategy")
    p.add_argument("--lr", type=float)
    p.add_argument("--num-envs", dest="num_envs", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--trace", action="store_true", help="also write a greedy trace after training")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean greedy score of a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="write a step trace of one greedy episode")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--output", "-o", default="trace.txt")
    p.add_argument("--aggregation", help="only print this aggregation method")
    p.add_argument("--nodes", action="store_true", help="append the top-3 nodes of each sub-graph")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("combine", help="mean and std of avg100 across metric files")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--grid", type=int, default=1000)
    p.add_argument("--output", "-o")
    p.set_defaults(func=cmd_combine)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
