"""Checkpoints, metric files and multi-seed curve aggregation."""
from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import TemplateSet
from .encoders import Vocabulary
from .env import DATA_DIR, default_templates, miniquest_spec, world_texts
from .model import ShaKgModel

FORMAT_VERSION = 1
MAGIC = b"SHAKGCKPT"
METRIC_FIELDS = ("episode", "step", "raw_score", "avg100")


class CheckpointError(ValueError):
    pass


def default_vocab() -> Vocabulary:
    path = DATA_DIR / "vocab.txt"
    if path.exists():
        return Vocabulary.load(path)
    return Vocabulary.from_texts(world_texts(miniquest_spec(), default_templates()))


def default_model(config, vocab: Vocabulary | None = None, templates: TemplateSet | None = None) -> ShaKgModel:
    return ShaKgModel(
        vocab or default_vocab(), templates or default_templates(),
        variant=config.variant, strategy=config.strategy, seed=config.seed,
    )


# ---------------------------------------------------------------------------
# metrics


class MetricsWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(METRIC_FIELDS)

    def write(self, row) -> None:
        self._csv.writerow([row.episode, row.step, repr(float(row.raw_score)), repr(float(row.avg100))])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: expected columns {METRIC_FIELDS}, got {reader.fieldnames}")
        return [
            {"episode": int(r["episode"]), "step": int(r["step"]),
             "raw_score": float(r["raw_score"]), "avg100": float(r["avg100"])}
            for r in reader
        ]


def combine_metrics(paths: Sequence[str | Path], grid: int = 1000) -> list[dict]:
    """Mean and std of avg100 across runs, sampled every ``grid`` steps.

    Each run contributes its latest avg100 at or before the grid step; runs
    with no finished episode by then are left out of that point.
    """
    runs = [read_metrics(p) for p in paths]
    if not runs:
        raise ValueError("no metric files")
    last = max((r[-1]["step"] for r in runs if r), default=0)
    out = []
    for step in range(grid, last + grid, grid):
        values = []
        for rows in runs:
            steps = [r["step"] for r in rows]
            k = int(np.searchsorted(steps, step, side="right"))
            if k:
                values.append(rows[k - 1]["avg100"])
        if values:
            out.append({"step": step, "mean": float(np.mean(values)), "std": float(np.std(values)), "runs": len(values)})
    return out


def write_combined(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "mean", "std", "runs"])
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: MAGIC, u32 header length, UTF-8 JSON header, then per record
#   u16 name length, name, u32 rows, u32 cols, rows*cols little-endian f64


def config_hash(signature: dict) -> str:
    blob = json.dumps(signature, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path: str | Path, model: ShaKgModel, config=None, extra: dict | None = None) -> None:
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(model.signature()),
        "seed": getattr(config, "seed", None),
        "config": asdict(config) if config is not None else {},
        "signature": model.signature(),
    }
    if extra:
        header.update(extra)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for name, value in model.params.state_dict().items():
            enc = name.encode("utf-8")
            rows, cols = value.shape
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<II", rows, cols))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    try:
        if not data.startswith(MAGIC):
            raise CheckpointError(f"{path}: not a checkpoint file")
        pos = len(MAGIC)
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        arrays = {}
        while pos < len(data):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", data, pos)
            pos += 8
            size = rows * cols * 8
            if pos + size > len(data):
                raise CheckpointError(f"{path}: truncated record {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    return header, arrays


def load_checkpoint(path: str | Path, model: ShaKgModel) -> dict:
    """Load weights into ``model``; the architecture must match exactly."""
    header, arrays = read_checkpoint(path)
    if header.get("kind") == "scripted":
        raise CheckpointError(f"{path}: scripted-policy checkpoint has no weights")
    expected = config_hash(model.signature())
    if header.get("config_hash") != expected:
        raise CheckpointError(
            f"{path}: architecture mismatch (checkpoint {header.get('config_hash', '?')[:12]}, model {expected[:12]})"
        )
    try:
        model.params.load_state_dict(arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return header


def model_from_checkpoint(path: str | Path) -> tuple[ShaKgModel | None, dict]:
    """Rebuild the model a checkpoint was written from (None for scripted checkpoints)."""
    header, _ = read_checkpoint(path)
    if header.get("kind") == "scripted":
        return None, header
    sig = header["signature"]
    from .model import Dims

    model = ShaKgModel(
        Vocabulary(sig["vocab"]), TemplateSet(sig["templates"]),
        variant=sig["variant"], strategy=sig["strategy"], seed=header.get("seed") or 0, dims=Dims(**sig["dims"]),
    )
    load_checkpoint(path, model)
    return model, header


def save_scripted_checkpoint(path: str | Path, actions: Sequence[str]) -> None:
    """A weightless checkpoint that replays a fixed action list."""
    header = {"format_version": FORMAT_VERSION, "kind": "scripted", "actions": list(actions)}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<I", len(raw)) + raw)
