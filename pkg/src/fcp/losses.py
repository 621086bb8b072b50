"""Segmentation losses: BCE, dice, guide, prompt, orthogonal and the total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import (
    ContractError,
    DegenerateInputError,
    DimensionError,
    Tensor,
    clip,
    log,
    matmul,
    mean,
    sqrt,
    tsum,
)


@dataclass(frozen=True)
class LossConfig:
    lambda_ortho: float = 0.05
    lambda_guide: float = 0.5
    eps: float = 1e-7
    ortho_include_last: bool = False

    def __post_init__(self):
        if self.lambda_ortho < 0 or self.lambda_guide < 0:
            raise ContractError("loss coefficients must be nonnegative")
        if not 0 < self.eps < 0.5:
            raise ContractError("clamp eps must lie in (0, 0.5)")


def _pair(pred, gt) -> tuple[Tensor, np.ndarray]:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def bce_loss(pred, gt, eps: float = 1e-7) -> Tensor:
    pred, gt = _pair(pred, gt)
    p = clip(pred, eps, 1.0 - eps)
    return -mean(gt * log(p) + (1.0 - gt) * log(1.0 - p))


def dice_loss(pred, gt) -> Tensor:
    pred, gt = _pair(pred, gt)
    den = float((gt * gt).sum()) + tsum(pred * pred)
    if den.item() == 0.0:
        return tsum(pred) * 0.0
    return 1.0 - 2.0 * tsum(pred * gt) / den


def guide_loss(attn_masks: Sequence, m_q, eps: float = 1e-7) -> Tensor:
    """Mean over steps of BCE + dice between attention-based masks and the query GT."""
    if len(attn_masks) == 0:
        raise ContractError("guide loss needs at least one attention mask")
    total = None
    for m in attn_masks:
        term = bce_loss(m, m_q, eps) + dice_loss(m, m_q)
        total = term if total is None else total + term
    return total / len(attn_masks)


def prompt_loss(m_pred, m_q, eps: float = 1e-7) -> Tensor:
    return bce_loss(m_pred, m_q, eps) + dice_loss(m_pred, m_q)


def pairwise_cosine_offdiag(maps) -> Tensor:
    """Sum of cos(A_i, A_j) over ordered pairs i != j of flattened maps."""
    a = maps if isinstance(maps, Tensor) else Tensor(maps)
    flat = a.reshape(a.shape[0], -1)
    sq = tsum(flat * flat, axis=1, keepdims=True)
    if np.any(sq.data == 0):
        raise DegenerateInputError("attention map is all zero")
    unit = flat / sqrt(sq)
    gram = matmul(unit, unit.T)
    return tsum(gram) - tsum(gram * np.eye(a.shape[0]))


def ortho_loss(support_weights: Sequence, query_weights: Sequence) -> Tensor:
    """Average over steps of the off-diagonal cosine sums of both sides.

    Each element is one step's (N, H, W) attention weights; the caller picks
    which steps to pass.
    """
    if len(support_weights) != len(query_weights) or not support_weights:
        raise ContractError("need the same nonzero number of support and query steps")
    total = None
    for a_s, a_q in zip(support_weights, query_weights):
        term = pairwise_cosine_offdiag(a_s) + pairwise_cosine_offdiag(a_q)
        total = term if total is None else total + term
    return total / len(support_weights)


def total_loss(prompt, guide, ortho, cfg: LossConfig = LossConfig()) -> Tensor:
    out = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
    if cfg.lambda_ortho:
        out = out + cfg.lambda_ortho * ortho
    if cfg.lambda_guide:
        out = out + cfg.lambda_guide * guide
    return out
