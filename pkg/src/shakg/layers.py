"""Building blocks composed from the autodiff primitives.

Nothing here adds a backward rule; every helper is a composition, so the
gradient checks on the primitives cover these too.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .autodiff import (
    ParameterStore,
    Tensor,
    add,
    add_broadcast_column,
    constant,
    exp,
    log,
    matmul,
    mul,
    row_select,
    scalar_mul,
    sigmoid,
    sum_columns,
    tanh,
)


@lru_cache(maxsize=256)
def _ones(rows: int, cols: int) -> Tensor:
    return constant(np.ones((rows, cols)))


def ones(rows: int, cols: int) -> Tensor:
    return _ones(rows, cols)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add_broadcast_column(out, bias)
    return out


def block(x: Tensor, i: int, size: int) -> Tensor:
    """Rows ``[i*size, (i+1)*size)`` of a component-major stack."""
    return row_select(x, np.arange(i * size, (i + 1) * size))


def tile_rows(x: Tensor, times: int) -> Tensor:
    """Repeat the whole ``B x n`` matrix ``times`` times vertically."""
    b = x.shape[0]
    return row_select(x, np.tile(np.arange(b), times))


def group_sum(x: Tensor, groups: int) -> Tensor:
    """Sum the ``groups`` stacked blocks of a ``(groups*B) x n`` matrix."""
    size = x.shape[0] // groups
    total = block(x, 0, size)
    for i in range(1, groups):
        total = add(total, block(x, i, size))
    return total


def group_softmax(z: Tensor, groups: int) -> Tensor:
    """Softmax across the ``groups`` stacked blocks, per (row, column) slot.

    ``z`` holds ``groups`` blocks of ``B`` rows each.  For a fixed sample row
    and column the ``groups`` entries form one distribution.  The per-slot max
    shift is a constant, so it changes nothing but the rounding.
    """
    size = z.shape[0] // groups
    zd = z.data.reshape(groups, size, z.shape[1])
    shift = np.tile(zd.max(axis=0), (groups, 1))
    zs = add(z, constant(-shift))
    e = exp(zs)
    log_norm = log(group_sum(e, groups))
    return exp(add(zs, scalar_mul(tile_rows(log_norm, groups), -1.0)))


def log_softmax_rows(z: Tensor) -> Tensor:
    """Row-wise log-softmax, finite for finite inputs (masked entries stay huge negative)."""
    shift = z.data.max(axis=1, keepdims=True)
    zs = add(z, constant(np.repeat(-shift, z.shape[1], axis=1)))
    lse = log(sum_columns(exp(zs)))
    return add(zs, scalar_mul(matmul(lse, ones(1, z.shape[1])), -1.0))


@dataclass
class GruCell:
    """Standard GRU gates, weights stored input-major (``d_in x d``)."""

    W_ir: Tensor
    W_iz: Tensor
    W_in: Tensor
    W_hr: Tensor
    W_hz: Tensor
    W_hn: Tensor
    b_r: Tensor
    b_z: Tensor
    b_in: Tensor
    b_hn: Tensor

    @classmethod
    def create(cls, store: ParameterStore, prefix: str, d_in: int, d: int) -> "GruCell":
        return cls(
            W_ir=store.add(f"{prefix}.W_ir", d_in, d, fan_in=d),
            W_iz=store.add(f"{prefix}.W_iz", d_in, d, fan_in=d),
            W_in=store.add(f"{prefix}.W_in", d_in, d, fan_in=d),
            W_hr=store.add(f"{prefix}.W_hr", d, d),
            W_hz=store.add(f"{prefix}.W_hz", d, d),
            W_hn=store.add(f"{prefix}.W_hn", d, d),
            b_r=store.add(f"{prefix}.b_r", 1, d, init="zeros"),
            b_z=store.add(f"{prefix}.b_z", 1, d, init="zeros"),
            b_in=store.add(f"{prefix}.b_in", 1, d, init="zeros"),
            b_hn=store.add(f"{prefix}.b_hn", 1, d, init="zeros"),
        )

    @property
    def hidden(self) -> int:
        return self.W_hr.shape[0]

    def project_inputs(self, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Input-side gate pre-activations; hoisted out of the time loop."""
        return (
            linear(x, self.W_ir, self.b_r),
            linear(x, self.W_iz, self.b_z),
            linear(x, self.W_in, self.b_in),
        )

    def step(self, xr: Tensor, xz: Tensor, xn: Tensor, h: Tensor) -> Tensor:
        r = sigmoid(add(xr, matmul(h, self.W_hr)))
        z = sigmoid(add(xz, matmul(h, self.W_hz)))
        n = tanh(add(xn, mul(r, linear(h, self.W_hn, self.b_hn))))
        # (1 - z) * n + z * h  ==  n + z * (h - n)
        return add(n, mul(z, add(h, scalar_mul(n, -1.0))))

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return self.step(*self.project_inputs(x), h)


def pad_tokens(sequences: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token-id sequences with 0; returns (B x T ids, lengths)."""
    lengths = np.array([len(s) for s in sequences], dtype=np.intp)
    width = int(lengths.max()) if len(sequences) else 0
    ids = np.zeros((len(sequences), width), dtype=np.intp)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
    return ids, lengths


def run_gru(cell: GruCell, embedding: Tensor, sequences: Sequence[Sequence[int]]) -> Tensor:
    """Final hidden states (``B x d``) of a GRU over variable-length sequences.

    Rows whose sequence has ended keep their hidden state; empty sequences
    yield the zero vector.
    """
    batch = len(sequences)
    d = cell.hidden
    h = constant(np.zeros((batch, d)))
    ids, lengths = pad_tokens(sequences)
    steps = ids.shape[1]
    if steps == 0:
        return h
    x = row_select(embedding, ids.T.reshape(-1))
    xr, xz, xn = cell.project_inputs(x)
    for t in range(steps):
        rows = np.arange(t * batch, (t + 1) * batch)
        h_new = cell.step(row_select(xr, rows), row_select(xz, rows), row_select(xn, rows), h)
        active = lengths > t
        if active.all():
            h = h_new
        else:
            keep = constant(np.repeat(active[:, None].astype(np.float64), d, axis=1))
            h = add(h, mul(keep, add(h_new, scalar_mul(h, -1.0))))
    return h
