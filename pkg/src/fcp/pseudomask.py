"""Pseudo-masks for the query image and the mask-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, DegenerateInputError, DimensionError, Tensor, tmax


@dataclass(frozen=True)
class MaskMetrics:
    iou: float
    precision: float
    recall: float

    def as_dict(self) -> dict:
        return {"iou": self.iou, "precision": self.precision, "recall": self.recall}


def _flat_unit(f: np.ndarray) -> np.ndarray:
    x = np.asarray(f, dtype=np.float64).reshape(f.shape[0], -1)
    norms = np.linalg.norm(x, axis=0)
    if np.any(norms == 0):
        raise DegenerateInputError("feature map has a zero vector")
    return x / norms


def raw_pseudo_mask(f_query: np.ndarray, f_support, m_support) -> np.ndarray:
    """Per query pixel, the max cosine to any support foreground pixel, in [-1, 1].

    ``f_support``/``m_support`` may also be sequences (one entry per shot);
    the max then runs over every shot's foreground.
    """
    if isinstance(f_support, np.ndarray) and f_support.ndim == 3:
        f_support, m_support = [f_support], [m_support]
    q = _flat_unit(f_query)
    best = np.full(q.shape[1], -np.inf)
    for fs, ms in zip(f_support, m_support):
        if fs.shape[0] != q.shape[0]:
            raise DimensionError(f"channel mismatch: {fs.shape[0]} vs {q.shape[0]}")
        fg = np.asarray(ms).reshape(-1) > 0
        if not fg.any():
            raise DegenerateInputError("support mask has no foreground")
        s = _flat_unit(fs)[:, fg]
        best = np.maximum(best, (s.T @ q).max(axis=0))
    return best.reshape(f_query.shape[1:])


def conventional_pseudo_mask(f_query: np.ndarray, f_support, m_support) -> np.ndarray:
    """Max-cosine pseudo-mask rescaled from [-1, 1] to [0, 1]."""
    return (raw_pseudo_mask(f_query, f_support, m_support) + 1.0) / 2.0


def normalize_mask(m):
    """Divide a nonnegative map by its max; an all-zero map stays zero.

    Accepts a numpy array or a Tensor (the result keeps the graph).
    """
    data = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if np.any(data < 0):
        raise ContractError("normalize_mask needs nonnegative values")
    top = data.max()
    if top == 0:
        return m * 0.0 if isinstance(m, Tensor) else np.zeros_like(data)
    if isinstance(m, Tensor):
        return m / tmax(m)
    return data / top


def attention_mask(weights, normalize: bool = True):
    """Max over tokens of (N, H, W) attention weights, then max-normalized."""
    if isinstance(weights, Tensor):
        peak = tmax(weights, axis=0)
    else:
        peak = np.asarray(weights, dtype=np.float64).max(axis=0)
    return normalize_mask(peak) if normalize else peak


def mask_metrics(pred: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> MaskMetrics:
    """IoU, precision and recall of ``pred >= threshold`` against a binary ``gt``.

    An empty denominator gives 1.0 when the numerator is also empty, else 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred >= threshold
    g = gt > 0.5
    inter = int(np.count_nonzero(p & g))
    union = int(np.count_nonzero(p | g))

    def ratio(num: int, den: int) -> float:
        if den == 0:
            return 1.0 if num == 0 else 0.0
        return num / den

    return MaskMetrics(
        iou=ratio(inter, union),
        precision=ratio(inter, int(p.sum())),
        recall=ratio(inter, int(g.sum())),
    )
