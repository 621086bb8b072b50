"""Prototype-prototype matching and the lightweight mask decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Tensor, matmul, mean, relu, reshape, sigmoid, transpose
from .protogen import Projection, token_cross_attention


@dataclass
class DecoderParams:
    proj_prompt: Tensor  # (C, C)
    proj_pixel: Tensor  # (C, C)
    head1_w: Tensor  # (hidden, N)
    head1_b: Tensor  # (hidden,)
    head2_w: Tensor  # (1, hidden)
    head2_b: Tensor  # (1,)


def generate_vrp(p_s, p_q, proj: Projection) -> Tensor:
    """Support prototypes attend over query prototypes; one prompt per support token."""
    return token_cross_attention(p_s, p_q, proj)[0]


def similarity_stack(v, g_q, params: DecoderParams) -> Tensor:
    """Scaled dot products of projected prompts and query pixels: (N_v, H, W)."""
    v = v if isinstance(v, Tensor) else Tensor(v)
    g_q = g_q if isinstance(g_q, Tensor) else Tensor(g_q)
    c, h, w = g_q.shape
    if v.ndim != 2 or v.shape[1] != c:
        raise DimensionError(f"prompts {v.shape} do not match {c}-channel features")
    pv = matmul(v, params.proj_prompt)
    pg = matmul(transpose(params.proj_pixel), reshape(g_q, (c, h * w)))
    return reshape(matmul(pv, pg) / float(np.sqrt(c)), (v.shape[0], h, w))


def decode_mask(v, g_q, params: DecoderParams) -> Tensor:
    """Soft (H, W) mask in (0, 1) from prompts and query SAM-like features.

    With K*N prompts (K shots of N tokens) the similarity maps are averaged
    over shots before the head.
    """
    sim = similarity_stack(v, g_q, params)
    n_head = params.head1_w.shape[1]
    n_v, h, w = sim.shape
    if n_v != n_head:
        if n_v % n_head:
            raise DimensionError(f"{n_v} prompts cannot feed a {n_head}-wide head")
        sim = mean(reshape(sim, (n_v // n_head, n_head, h, w)), axis=0)
    flat = reshape(sim, (n_head, h * w))
    hidden = relu(matmul(params.head1_w, flat) + reshape(params.head1_b, (-1, 1)))
    logits = matmul(params.head2_w, hidden) + reshape(params.head2_b, (-1, 1))
    return reshape(sigmoid(logits), (h, w))
