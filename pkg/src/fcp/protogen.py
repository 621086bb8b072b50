"""Support and query prototype construction.

Tokens gather foreground content from guided feature maps through T
cross-attention steps: T-1 steps take their values from the SAM-like map,
the last step takes them from the backbone-like map. Projections act on
row vectors, ``p(x) = x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    Tensor,
    concat,
    conv1x1,
    matmul,
    reshape,
    scaled_softmax,
    transpose,
    tsum,
)
from .pseudomask import attention_mask, conventional_pseudo_mask


@dataclass
class AttentionRecord:
    step: int
    side: str  # "support" | "query"
    weights: Tensor  # (N, H, W)


@dataclass
class Projection:
    wq: Tensor
    wk: Tensor
    wv: Tensor


@dataclass
class ProtoParams:
    tokens_s: Tensor
    tokens_q: Tensor
    conv_g_w: Tensor
    conv_g_b: Tensor
    conv_f_w: Tensor
    conv_f_b: Tensor
    support_proj: list[Projection] = field(default_factory=list)  # index t-1
    query_proj: list[Projection] = field(default_factory=list)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _pool_weights(m) -> np.ndarray:
    m = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if m.sum() <= 0:
        raise DegenerateInputError("mask has no foreground to pool")
    return m


def mask_average_pool(f, m) -> Tensor:
    """Mask-weighted mean feature vector, shape (C,)."""
    f = _as_tensor(f)
    if isinstance(f, Tensor) and f.ndim != 3:
        raise DimensionError(f"expected a (C, H, W) map, got {f.shape}")
    m = _pool_weights(m)
    if m.shape != f.shape[1:]:
        raise DimensionError(f"mask {m.shape} does not match map {f.shape}")
    return tsum(f * m, axis=(1, 2)) / float(m.sum())


def mask_average_pool_expand(f, m) -> Tensor:
    """Masked mean vector broadcast back to every pixel: (C, H, W)."""
    f = _as_tensor(f)
    pooled = mask_average_pool(f, m)
    return reshape(pooled, (-1, 1, 1)) * np.ones((1,) + f.shape[1:])


def pooled_over_shots(fs: Sequence, ms: Sequence) -> Tensor:
    """Pool the foreground of several shots jointly, expanded to one map."""
    num = None
    den = 0.0
    for f, m in zip(fs, ms):
        f = _as_tensor(f)
        m = np.asarray(m, dtype=np.float64)
        part = tsum(f * m, axis=(1, 2))
        num = part if num is None else num + part
        den += float(m.sum())
    if den <= 0:
        raise DegenerateInputError("support masks have no foreground to pool")
    shape = _as_tensor(fs[0]).shape
    return reshape(num / den, (-1, 1, 1)) * np.ones((1,) + shape[1:])


def guide_features(f, m, pooled_expanded, weight, bias) -> Tensor:
    """1x1 conv over ``concat(features, mask, pooled)`` -> (C, H, W)."""
    f, pooled_expanded = _as_tensor(f), _as_tensor(pooled_expanded)
    m = _as_tensor(m)
    if m.shape != f.shape[1:] or pooled_expanded.shape != f.shape:
        raise DimensionError(
            f"guide inputs disagree: features {f.shape}, mask {m.shape}, pooled {pooled_expanded.shape}"
        )
    stacked = concat([f, reshape(m, (1,) + m.shape), pooled_expanded], axis=0)
    return conv1x1(stacked, weight, bias)


def masked_cross_attention_step(tokens, key_map, value_map, mask, proj: Projection):
    """One attention step of tokens over pixels; ``mask=None`` attends everywhere.

    Returns the new (N, C) tokens and the (N, H, W) weights. Masked pixels
    get exactly zero weight.
    """
    tokens, key_map, value_map = _as_tensor(tokens), _as_tensor(key_map), _as_tensor(value_map)
    if key_map.ndim != 3 or key_map.shape != value_map.shape:
        raise DimensionError(f"key {key_map.shape} and value {value_map.shape} maps must match")
    c, h, w = key_map.shape
    if tokens.ndim != 2 or tokens.shape[1] != c:
        raise DimensionError(f"tokens {tokens.shape} do not match {c} channels")
    flat_mask = None
    if mask is not None:
        mask = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
        if mask.shape != (h, w):
            raise DimensionError(f"mask {mask.shape} does not match map {(h, w)}")
        if not (mask > 0).any():
            raise DegenerateInputError("attention mask has no foreground")
        flat_mask = (mask > 0).astype(np.float64).reshape(1, h * w)

    q = matmul(tokens, proj.wq)  # (N, C)
    k = matmul(transpose(proj.wk), reshape(key_map, (c, h * w)))  # (C, HW)
    v = matmul(transpose(proj.wv), reshape(value_map, (c, h * w)))  # (C, HW)
    weights = scaled_softmax(matmul(q, k), scale=float(np.sqrt(c)), mask=flat_mask)
    out = matmul(weights, transpose(v))
    return out, reshape(weights, (tokens.shape[0], h, w))


def cross_attention_step(tokens, key_map, value_map, proj: Projection):
    return masked_cross_attention_step(tokens, key_map, value_map, None, proj)


def token_cross_attention(queries, keys_values, proj: Projection) -> tuple[Tensor, Tensor]:
    """Attention of one token set over another: (Nq, C) x (Nk, C) -> (Nq, C)."""
    queries, keys_values = _as_tensor(queries), _as_tensor(keys_values)
    if queries.ndim != 2 or keys_values.ndim != 2 or queries.shape[1] != keys_values.shape[1]:
        raise DimensionError(f"token sets disagree: {queries.shape} vs {keys_values.shape}")
    c = queries.shape[1]
    q = matmul(queries, proj.wq)
    k = matmul(keys_values, proj.wk)
    v = matmul(keys_values, proj.wv)
    weights = scaled_softmax(matmul(q, transpose(k)), scale=float(np.sqrt(c)))
    return matmul(weights, v), weights


def _advance(tokens, update, residual: bool):
    return tokens + update if residual else update


def build_support_prototypes(g_s, f_s, m_s, params: ProtoParams, steps: int, residual: bool = True):
    """Support prototypes from one shot.

    Guides both maps with the GT mask, runs ``steps - 1`` masked steps with
    SAM-like values and one final masked step with backbone-like values.
    Returns ``(tokens, records, guided_sam, guided_backbone)``.
    """
    if steps < 1:
        raise ContractError("need at least one step")
    if len(params.support_proj) < steps:
        raise ContractError(f"{len(params.support_proj)} support projections for {steps} steps")
    m_s = np.asarray(m_s, dtype=np.float64)
    if not (m_s > 0).any():
        raise DegenerateInputError("support mask has no foreground")
    g_bar = guide_features(g_s, m_s, mask_average_pool_expand(g_s, m_s), params.conv_g_w, params.conv_g_b)
    f_bar = guide_features(f_s, m_s, mask_average_pool_expand(f_s, m_s), params.conv_f_w, params.conv_f_b)
    tokens = params.tokens_s
    records = []
    for t in range(1, steps + 1):
        value = g_bar if t < steps else f_bar
        update, weights = masked_cross_attention_step(tokens, g_bar, value, m_s, params.support_proj[t - 1])
        tokens = _advance(tokens, update, residual)
        records.append(AttentionRecord(t, "support", weights))
    return tokens, records, g_bar, f_bar


@dataclass
class QueryPrototypes:
    tokens: Tensor
    records: list[AttentionRecord]
    attn_masks: list[Tensor]  # normalized, steps 1..T-1
    pseudo: np.ndarray  # conventional pseudo-mask, rescaled to [0, 1]
    guided_sam: Tensor
    guided_backbone: Tensor


def build_query_prototypes(
    g_q,
    f_q,
    g_s: Sequence,
    f_s: Sequence,
    m_s: Sequence,
    params: ProtoParams,
    steps: int,
    residual: bool = True,
    guide_mask: str = "attention",
) -> QueryPrototypes:
    """Query prototypes guided first by the conventional pseudo-mask.

    Support inputs are per-shot sequences (a single (C, H, W) map is
    accepted too). ``guide_mask`` picks what guides the backbone-like query
    map before the last step: ``"attention"`` uses the step T-1
    attention-based mask, ``"conventional"`` keeps the pseudo-mask.
    """
    if steps < 2:
        raise ContractError("query prototypes need at least two steps")
    if len(params.query_proj) < steps:
        raise ContractError(f"{len(params.query_proj)} query projections for {steps} steps")
    if guide_mask not in ("attention", "conventional"):
        raise ContractError(f"unknown guide mask {guide_mask!r}")
    if isinstance(g_s, (np.ndarray, Tensor)) and np.ndim(g_s.data if isinstance(g_s, Tensor) else g_s) == 3:
        g_s, f_s, m_s = [g_s], [f_s], [m_s]
    f_s_arr = [x.data if isinstance(x, Tensor) else np.asarray(x) for x in f_s]
    f_q_arr = f_q.data if isinstance(f_q, Tensor) else np.asarray(f_q)
    pseudo = conventional_pseudo_mask(f_q_arr, f_s_arr, list(m_s))

    g_bar = guide_features(g_q, pseudo, pooled_over_shots(g_s, m_s), params.conv_g_w, params.conv_g_b)
    tokens = params.tokens_q
    records, attn_masks = [], []
    for t in range(1, steps):
        update, weights = cross_attention_step(tokens, g_bar, g_bar, params.query_proj[t - 1])
        tokens = _advance(tokens, update, residual)
        records.append(AttentionRecord(t, "query", weights))
        attn_masks.append(attention_mask(weights))

    guide = attn_masks[-1] if guide_mask == "attention" else pseudo
    f_bar = guide_features(f_q, guide, pooled_over_shots(f_s, m_s), params.conv_f_w, params.conv_f_b)
    update, weights = cross_attention_step(tokens, g_bar, f_bar, params.query_proj[steps - 1])
    tokens = _advance(tokens, update, residual)
    records.append(AttentionRecord(steps, "query", weights))
    return QueryPrototypes(tokens, records, attn_masks, pseudo, g_bar, f_bar)
