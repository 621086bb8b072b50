"""Parameter layout and the end-to-end forward pass for one episode."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Parameter, Tensor, concat
from .decode import DecoderParams, decode_mask, generate_vrp
from .losses import LossConfig, guide_loss, pairwise_cosine_offdiag, prompt_loss, total_loss
from .protogen import (
    Projection,
    ProtoParams,
    build_query_prototypes,
    build_support_prototypes,
    guide_features,
    masked_cross_attention_step,
    pooled_over_shots,
)
from .pseudomask import conventional_pseudo_mask

VARIANTS = ("full", "conventional", "pixel")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    n_tokens: int = 8
    steps: int = 3
    hidden: int = 16
    residual: bool = True
    share_projections: bool = False
    variant: str = "full"  # full | conventional | pixel
    proj_init: str = "identity"  # identity | uniform
    conv_init: str = "identity"  # identity | uniform
    proj_gain: float = 1.0  # identity gain for query/key-side projections
    dec_gain: float = 1.0  # identity gain for the decoder projections
    value_gain: float = 1.0  # identity gain for the last step's value projections
    head_init: str = "uniform"  # uniform | positive
    head_scale: float = 1.0  # multiplies the initial head weights

    def __post_init__(self):
        if self.steps < 2:
            raise ContractError("steps must be >= 2")
        if self.n_tokens < 1 or self.channels < 1 or self.hidden < 1:
            raise ContractError("channels, tokens and hidden width must be positive")
        if self.proj_init not in ("identity", "uniform") or self.conv_init not in ("identity", "uniform"):
            raise ContractError("init schemes are 'identity' or 'uniform'")
        if self.head_init not in ("uniform", "positive"):
            raise ContractError("head_init is 'uniform' or 'positive'")
        if self.variant not in VARIANTS:
            raise ContractError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> "OrderedDict[str, Parameter]":
    """All trainable tensors, in checkpoint declaration order.

    Square projections start at identity plus uniform noise (``proj_init =
    "identity"``) or pure uniform noise.
    """
    C, N = cfg.channels, cfg.n_tokens
    p: OrderedDict[str, Parameter] = OrderedDict()

    def add(name, data):
        p[name] = Parameter(data, name=name)

    def square(gain=1.0):
        w = _uniform(rng, (C, C), C)
        return w + gain * np.eye(C) if cfg.proj_init == "identity" else w

    add("tokens_s", rng.standard_normal((N, C)) / np.sqrt(C))
    add("tokens_q", rng.standard_normal((N, C)) / np.sqrt(C))
    for conv in ("conv_g", "conv_f"):
        w = _uniform(rng, (C, 2 * C + 1), 2 * C + 1)
        if cfg.conv_init == "identity":
            w[:, :C] += np.eye(C)
        add(f"{conv}.w", w)
        add(f"{conv}.b", _uniform(rng, (C,), 2 * C + 1))
    n_proj = 1 if cfg.share_projections else cfg.steps
    for side in ("s", "q"):
        for t in range(1, n_proj + 1):
            last = t == n_proj and not cfg.share_projections
            gains = {"q": cfg.proj_gain, "k": cfg.proj_gain, "v": cfg.value_gain if last else 1.0}
            for role in ("q", "k", "v"):
                add(f"attn.{side}{t}.{role}", square(gains[role]))
    for role in ("q", "k", "v"):
        add(f"match.{role}", square(cfg.proj_gain if role != "v" else 1.0))
    add("dec.proj_prompt", square(cfg.dec_gain))
    add("dec.proj_pixel", square(cfg.dec_gain))
    head1 = _uniform(rng, (cfg.hidden, N), N)
    add("dec.head1.w", cfg.head_scale * (np.abs(head1) if cfg.head_init == "positive" else head1))
    add("dec.head1.b", _uniform(rng, (cfg.hidden,), N))
    head2 = _uniform(rng, (1, cfg.hidden), cfg.hidden)
    add("dec.head2.w", cfg.head_scale * (np.abs(head2) if cfg.head_init == "positive" else head2))
    add("dec.head2.b", _uniform(rng, (1,), cfg.hidden))
    return p


def proto_params(params, cfg: ModelConfig) -> ProtoParams:
    def proj(side, t):
        t = 1 if cfg.share_projections else t
        return Projection(*(params[f"attn.{side}{t}.{r}"] for r in "qkv"))

    return ProtoParams(
        tokens_s=params["tokens_s"],
        tokens_q=params["tokens_q"],
        conv_g_w=params["conv_g.w"],
        conv_g_b=params["conv_g.b"],
        conv_f_w=params["conv_f.w"],
        conv_f_b=params["conv_f.b"],
        support_proj=[proj("s", t) for t in range(1, cfg.steps + 1)],
        query_proj=[proj("q", t) for t in range(1, cfg.steps + 1)],
    )


def decoder_params(params) -> DecoderParams:
    return DecoderParams(
        proj_prompt=params["dec.proj_prompt"],
        proj_pixel=params["dec.proj_pixel"],
        head1_w=params["dec.head1.w"],
        head1_b=params["dec.head1.b"],
        head2_w=params["dec.head2.w"],
        head2_b=params["dec.head2.b"],
    )


def match_projection(params) -> Projection:
    return Projection(params["match.q"], params["match.k"], params["match.v"])


@dataclass
class ForwardResult:
    pred: Tensor  # soft (H, W)
    pseudo: np.ndarray  # conventional pseudo-mask in [0, 1]
    attn_masks: list[Tensor] = field(default_factory=list)
    support_records: list = field(default_factory=list)  # per shot, list of records
    query_records: list = field(default_factory=list)
    vrp: Tensor | None = None
    loss: Tensor | None = None
    components: dict = field(default_factory=dict)


def forward(
    params,
    cfg: ModelConfig,
    support: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]],
    g_q: np.ndarray,
    f_q: np.ndarray,
    m_q: np.ndarray | None = None,
    loss_cfg: LossConfig | None = None,
) -> ForwardResult:
    """Run one episode. ``support`` holds ``(sam_like, backbone_like, mask)`` per shot.

    When ``m_q`` is given the losses are attached to the result.
    """
    if not support:
        raise ContractError("need at least one support shot")
    pp = proto_params(params, cfg)
    g_s = [s[0] for s in support]
    f_s = [s[1] for s in support]
    m_s = [np.asarray(s[2], dtype=np.float64) for s in support]

    shot_tokens, support_records = [], []
    for g, f, m in zip(g_s, f_s, m_s):
        tokens, records, _, _ = build_support_prototypes(g, f, m, pp, cfg.steps, cfg.residual)
        shot_tokens.append(tokens)
        support_records.append(records)
    p_s = shot_tokens[0] if len(shot_tokens) == 1 else concat(shot_tokens, axis=0)

    if cfg.variant == "pixel":
        # prototype-pixel matching: support prototypes read the query pixels directly
        pseudo = conventional_pseudo_mask(np.asarray(f_q), f_s, m_s)
        g_bar = guide_features(g_q, pseudo, pooled_over_shots(g_s, m_s), pp.conv_g_w, pp.conv_g_b)
        f_bar = guide_features(f_q, pseudo, pooled_over_shots(f_s, m_s), pp.conv_f_w, pp.conv_f_b)
        vrp, _ = masked_cross_attention_step(p_s, f_bar, g_bar, None, match_projection(params))
        result = ForwardResult(pred=None, pseudo=pseudo, support_records=support_records)
    else:
        guide = "attention" if cfg.variant == "full" else "conventional"
        qp = build_query_prototypes(g_q, f_q, g_s, f_s, m_s, pp, cfg.steps, cfg.residual, guide)
        vrp = generate_vrp(p_s, qp.tokens, match_projection(params))
        result = ForwardResult(
            pred=None,
            pseudo=qp.pseudo,
            attn_masks=qp.attn_masks,
            support_records=support_records,
            query_records=qp.records,
        )
    result.vrp = vrp
    result.pred = decode_mask(vrp, g_q, decoder_params(params))

    if m_q is not None:
        loss_cfg = loss_cfg or LossConfig()
        result.loss, result.components = episode_loss(result, m_q, cfg, loss_cfg)
    return result


def episode_loss(result: ForwardResult, m_q, cfg: ModelConfig, loss_cfg: LossConfig):
    """Total loss and its float components for one forward result."""
    lp = prompt_loss(result.pred, m_q, loss_cfg.eps)
    last = cfg.steps if loss_cfg.ortho_include_last else cfg.steps - 1
    lg = lo = None
    if loss_cfg.lambda_guide and result.attn_masks:
        lg = guide_loss(result.attn_masks, m_q, loss_cfg.eps)
    if loss_cfg.lambda_ortho:
        per_step = []
        for t in range(last):
            shots = [pairwise_cosine_offdiag(rec[t].weights) for rec in result.support_records]
            term = shots[0]
            for extra in shots[1:]:
                term = term + extra
            term = term / len(shots)
            if result.query_records:
                term = term + pairwise_cosine_offdiag(result.query_records[t].weights)
            per_step.append(term)
        lo = per_step[0]
        for term in per_step[1:]:
            lo = lo + term
        lo = lo / len(per_step)
    comps = {"prompt": lp.item()}
    if lg is not None:
        comps["guide"] = lg.item()
    if lo is not None:
        comps["ortho"] = lo.item()
    total = total_loss(lp, lg if lg is not None else 0.0, lo if lo is not None else 0.0, loss_cfg)
    comps["total"] = total.item()
    return total, comps
