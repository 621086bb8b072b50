"""Finite-difference gradient suite: every primitive plus the full training loss."""

from __future__ import annotations

import dataclasses
from typing import Callable

import numpy as np

from .autodiff import (
    GradCheckReport,
    Tensor,
    clip,
    concat,
    conv1x1,
    cosine_sim,
    exp,
    getitem,
    grad_check,
    log,
    matmul,
    mean,
    relu,
    reshape,
    scaled_softmax,
    sigmoid,
    sqrt,
    tmax,
    transpose,
    tsum,
)
from .losses import LossConfig, bce_loss, dice_loss, pairwise_cosine_offdiag
from .model import ModelConfig, forward, init_params
from .pseudomask import attention_mask

# Each entry maps a (3, 4) input tensor and fixed constants to a scalar.
PRIMITIVES: dict[str, Callable[[Tensor, dict], Tensor]] = {
    "add_sub_mul": lambda x, c: tsum((x + c["w"]) * (x - 0.5) * 1.7),
    "div": lambda x, c: tsum(x / (x * x + 2.0)),
    "power": lambda x, c: tsum((x * x + 1.0) ** 1.5),
    "exp_log": lambda x, c: tsum(log(exp(x) + 1.0)),
    "sqrt": lambda x, c: tsum(sqrt(x * x + 1.0)),
    "relu": lambda x, c: tsum(relu(x) * c["w"]),
    "sigmoid": lambda x, c: tsum(sigmoid(x) * c["w"]),
    "clip": lambda x, c: tsum(clip(x, -0.5, 0.5) * c["w"]),
    "sum_axis": lambda x, c: tsum(tsum(x, axis=0) ** 2),
    "mean": lambda x, c: tsum(mean(x * c["w"], axis=1) ** 2),
    "max": lambda x, c: tsum(tmax(x, axis=1) * c["w"][:, 0]),
    "reshape_transpose": lambda x, c: tsum(transpose(reshape(x, (4, 3))) * c["w"]),
    "concat": lambda x, c: tsum(concat([x, x * 2.0], axis=0) ** 2),
    "getitem": lambda x, c: tsum(getitem(x, (slice(1, 3), slice(None, None, 2))) ** 2),
    "matmul": lambda x, c: tsum(matmul(x, c["b"]) ** 2),
    "softmax": lambda x, c: tsum(scaled_softmax(x, 1.3) * c["w"]),
    "masked_softmax": lambda x, c: tsum(scaled_softmax(x, 0.7, mask=c["mask"]) * c["w"]),
    "conv1x1": lambda x, c: tsum(conv1x1(reshape(x, (3, 2, 2)), c["cw"], c["cb"]) ** 2),
    "cosine": lambda x, c: cosine_sim(reshape(x, (-1,)), c["u"]),
    "bce": lambda x, c: bce_loss(sigmoid(x), c["gt"]),
    "dice": lambda x, c: dice_loss(sigmoid(x), c["gt"]),
    "pairwise_cosine": lambda x, c: pairwise_cosine_offdiag(reshape(exp(x), (3, 2, 2))),
    "attention_mask": lambda x, c: tsum(attention_mask(reshape(exp(x), (3, 2, 2))) * c["w"][:2, :2]),
}


def _constants(rng: np.random.Generator) -> dict:
    return {
        "b": rng.standard_normal((4, 3)),
        "w": rng.standard_normal((3, 4)),
        "mask": np.array([1.0, 0.0, 1.0, 1.0]),
        "cw": rng.standard_normal((2, 3)),
        "cb": rng.standard_normal(2),
        "u": rng.standard_normal(12),
        "gt": (rng.random((3, 4)) > 0.5).astype(float),
    }


def primitive_checks(tol: float = 1e-4, seed: int = 0, h: float = 1e-5) -> dict[str, GradCheckReport]:
    """Check each primitive at a random point with central differences."""
    out = {}
    for i, (name, fn) in enumerate(PRIMITIVES.items()):
        rng = np.random.default_rng([seed, i])
        consts = _constants(rng)
        x = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name=name)
        out[name] = grad_check(lambda: fn(x, consts), [x], h=h, tol=tol)
    return out


PIPELINE_FLOOR = 1e-6
SMALL_MODEL = ModelConfig(channels=6, n_tokens=3, steps=3, hidden=4)


def _small_episode(rng: np.random.Generator, cfg: ModelConfig, shots: int = 1, size: int = 5):
    """Unit-norm random maps with blob masks; every map has foreground and background."""

    def unit(shape):
        x = rng.standard_normal(shape)
        return x / np.linalg.norm(x, axis=0, keepdims=True)

    def blob():
        m = np.zeros((size, size))
        r, c = rng.integers(0, size - 2, size=2)
        m[r : r + 2 + rng.integers(0, 2), c : c + 2 + rng.integers(0, 2)] = 1.0
        return m

    shape = (cfg.channels, size, size)
    support = [(unit(shape), unit(shape), blob()) for _ in range(shots)]
    return support, unit(shape), unit(shape), blob()


def pipeline_checks(
    tol: float = 1e-4,
    seed: int = 0,
    h: float = 1e-5,
    variants=("full", "conventional", "pixel"),
    cfg: ModelConfig = SMALL_MODEL,
    loss_cfg: LossConfig | None = None,
    floor: float = PIPELINE_FLOOR,
) -> dict[str, GradCheckReport]:
    """Total training loss against every parameter group, one report per (variant, group).

    Coordinates with gradients below ``floor`` are compared on an absolute
    scale: at h = 1e-5 the round-off in an O(1) loss is about 1e-11, which
    would dominate the relative error of a 1e-8 gradient.
    """
    loss_cfg = loss_cfg or LossConfig()
    out = {}
    for v_idx, variant in enumerate(variants):
        vcfg = dataclasses.replace(cfg, variant=variant)
        rng = np.random.default_rng([seed, v_idx])
        params = init_params(vcfg, rng)
        support, g_q, f_q, m_q = _small_episode(rng, vcfg)

        def loss():
            return forward(params, vcfg, support, g_q, f_q, m_q, loss_cfg).loss

        for name, p in params.items():
            report = grad_check(loss, [p], h=h, tol=tol, floor=floor)
            out[f"{variant}/{name}"] = report
    return out
