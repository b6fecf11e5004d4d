"""Stacked hierarchical attention: text components first, then sub-graphs.

Layout follows the rest of the package: the ``c`` component vectors of a
batch of ``B`` states are stacked component-major into a ``(c*B) x d``
matrix (row ``i*B + b`` is component ``i`` of state ``b``).  Attention
weights are therefore stored the same way and exposed per state as the
``d x c`` matrices of the model description.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ParameterStore,
    ShapeError,
    Tensor,
    add,
    add_broadcast_column,
    concat_rows,
    matmul,
    mean_columns,
    mul,
    row_select,
    scalar_mul,
    tanh,
)
from .layers import group_softmax, group_sum, linear, ones, tile_rows

VARIANTS = ("full", "no-group-attn", "no-high-level", "no-low-level")


@dataclass
class ShaParams:
    """Attention weights, stored input-major (``W.shape == (d_in, d_out)``).

    ``W_init`` maps ``[v_kg_full | v_score]`` to the high-level query; the
    ``no-high-level`` variant uses ``W_init_text`` on ``[mean(v_text) | v_score]``
    instead.  Level weights are ``None`` for variants that skip that level.
    """

    W_init: Tensor | None
    b_init: Tensor
    W_bridge: Tensor
    b_bridge: Tensor
    W_I_high: Tensor | None = None
    W_Q_high: Tensor | None = None
    W_A_high: Tensor | None = None
    b_Q_high: Tensor | None = None
    b_A_high: Tensor | None = None
    W_I_low: Tensor | None = None
    W_Q_low: Tensor | None = None
    W_A_low: Tensor | None = None
    b_Q_low: Tensor | None = None
    b_A_low: Tensor | None = None
    W_init_text: Tensor | None = None
    d_kg: int = 50

    @classmethod
    def create(
        cls,
        store: ParameterStore,
        variant: str = "full",
        d_high: int = 100,
        d_low: int = 50,
        d_kg: int = 50,
        d_score: int = 16,
    ) -> "ShaParams":
        if variant not in VARIANTS:
            raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
        kw = {}
        if variant == "no-high-level":
            kw["W_init"] = None
            kw["W_init_text"] = store.add("sha.W_init_text", d_high + d_score, d_high)
        else:
            kw["W_init"] = store.add("sha.W_init", d_kg + d_score, d_high)
        kw["b_init"] = store.add("sha.b_init", 1, d_high, init="zeros")
        if variant != "no-high-level":
            kw.update(
                W_I_high=store.add("sha.W_I_high", d_high, d_high),
                W_Q_high=store.add("sha.W_Q_high", d_high, d_high),
                b_Q_high=store.add("sha.b_Q_high", 1, d_high, init="zeros"),
                W_A_high=store.add("sha.W_A_high", d_high, d_high),
                b_A_high=store.add("sha.b_A_high", 1, d_high, init="zeros"),
            )
        kw["W_bridge"] = store.add("sha.W_bridge", d_high, d_low)
        kw["b_bridge"] = store.add("sha.b_bridge", 1, d_low, init="zeros")
        if variant != "no-low-level":
            kw.update(
                W_I_low=store.add("sha.W_I_low", d_low, d_low),
                W_Q_low=store.add("sha.W_Q_low", d_low, d_low),
                b_Q_low=store.add("sha.b_Q_low", 1, d_low, init="zeros"),
                W_A_low=store.add("sha.W_A_low", d_low, d_low),
                b_A_low=store.add("sha.b_A_low", 1, d_low, init="zeros"),
            )
        return cls(d_kg=d_kg, **kw)


@dataclass
class StateEncoding:
    v_t: Tensor
    q_high: Tensor | None
    q_low: Tensor | None
    alpha_high: np.ndarray | None  # (B, d_high, c)
    alpha_low: np.ndarray | None  # (B, d_low, m)


def _per_state(alpha: Tensor, groups: int) -> np.ndarray:
    rows, d = alpha.shape
    return alpha.data.reshape(groups, rows // groups, d).transpose(1, 2, 0).copy()


def build_query(v_kg_full: Tensor, v_score: Tensor, params: ShaParams) -> Tensor:
    """High-level query from the full-graph vector and the score bits."""
    if params.W_init is None:
        raise ValueError("this parameter set has no full-graph query weights")
    d_kg = params.d_kg
    d_score = params.W_init.shape[0] - d_kg
    if v_kg_full.shape[1] != d_kg or v_score.shape[1] != d_score or v_kg_full.shape[0] != v_score.shape[0]:
        raise ShapeError(
            f"build_query: expected widths ({d_kg}, {d_score}), got {v_kg_full.shape} and {v_score.shape}"
        )
    kg_block = row_select(params.W_init, np.arange(d_kg))
    score_block = row_select(params.W_init, np.arange(d_kg, d_kg + d_score))
    return add_broadcast_column(add(matmul(v_kg_full, kg_block), matmul(v_score, score_block)), params.b_init)


def _attend(values: Tensor, query: Tensor, W_I, W_Q, b_Q, W_A, b_A, group_attention: bool):
    batch, d = query.shape
    if values.shape[1] != d or values.shape[0] % batch:
        raise ShapeError(f"attention: values {values.shape} do not match query {query.shape}")
    groups = values.shape[0] // batch
    projected_query = tile_rows(linear(query, W_Q, b_Q), groups)
    hidden = tanh(add(matmul(values, W_I), projected_query))
    logits = linear(hidden, W_A, b_A)
    if group_attention:
        alpha = group_softmax(logits, groups)
    else:
        # one weight per channel, shared by every position
        alpha = matmul(group_softmax(mean_columns(logits), groups), ones(1, d))
    attended = group_sum(mul(alpha, values), groups)
    return alpha, add(query, attended), groups


def high_attend(v_text: Tensor, q_high: Tensor, params: ShaParams, group_attention: bool = True):
    """Attend over the stacked text components; returns ``(alpha, q_low_pre)``.

    ``alpha`` is the ``(c*B) x d_high`` weight stack, each (state, position)
    slot a distribution over the ``c`` components.
    """
    alpha, updated, _ = _attend(
        v_text, q_high, params.W_I_high, params.W_Q_high, params.b_Q_high,
        params.W_A_high, params.b_A_high, group_attention,
    )
    return alpha, updated


def bridge(q_low_pre: Tensor, params: ShaParams) -> Tensor:
    return linear(q_low_pre, params.W_bridge, params.b_bridge)


def low_attend(v_kg_subs: Tensor, q_low_pre: Tensor, params: ShaParams, group_attention: bool = True) -> StateEncoding:
    """Bridge the query to ``d_low`` and attend over the stacked sub-graph vectors."""
    q_low = bridge(q_low_pre, params)
    alpha, v_t, groups = _attend(
        v_kg_subs, q_low, params.W_I_low, params.W_Q_low, params.b_Q_low,
        params.W_A_low, params.b_A_low, group_attention,
    )
    return StateEncoding(v_t=v_t, q_high=None, q_low=q_low, alpha_high=None, alpha_low=_per_state(alpha, groups))


def stack_components(parts: list[Tensor]) -> Tensor:
    return concat_rows(parts)


def text_query(v_text: Tensor, v_score: Tensor, params: ShaParams, channels: int) -> Tensor:
    """Initial query of the no-high-level variant: mean text vector plus score."""
    d_high = v_text.shape[1]
    mean_text = scalar_mul(group_sum(v_text, channels), 1.0 / channels)
    text_block = row_select(params.W_init_text, np.arange(d_high))
    score_block = row_select(params.W_init_text, np.arange(d_high, params.W_init_text.shape[0]))
    return add_broadcast_column(add(matmul(mean_text, text_block), matmul(v_score, score_block)), params.b_init)


def stacked_attention(
    v_text: Tensor,
    v_score: Tensor,
    params: ShaParams,
    variant: str,
    v_kg_full=None,
    v_kg_subs=None,
    text_channels: int = 4,
) -> StateEncoding:
    """Run the two attention levels for ``variant``.

    ``v_kg_full`` / ``v_kg_subs`` may be zero-argument callables so that
    variants which skip a graph channel never evaluate it.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
    group = variant != "no-group-attn"
    resolve = lambda x: x() if callable(x) else x  # noqa: E731

    if variant == "no-high-level":
        q_low_pre = text_query(v_text, v_score, params, text_channels)
        enc = low_attend(resolve(v_kg_subs), q_low_pre, params, group)
        enc.q_high = None
        return enc

    q_high = build_query(resolve(v_kg_full), v_score, params)
    alpha_high, q_low_pre = high_attend(v_text, q_high, params, group)
    a_high = _per_state(alpha_high, text_channels)
    if variant == "no-low-level":
        q_low = bridge(q_low_pre, params)
        return StateEncoding(v_t=q_low, q_high=q_high, q_low=q_low, alpha_high=a_high, alpha_low=None)
    enc = low_attend(resolve(v_kg_subs), q_low_pre, params, group)
    enc.q_high = q_high
    enc.alpha_high = a_high
    return enc
