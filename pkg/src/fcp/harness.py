"""Episodes, configuration, checkpoints, training, evaluation and ablations."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Parameter, adam_step, backward, cosine_lr, zero_grad
from .losses import LossConfig
from .model import ModelConfig, forward, init_params
from .pseudomask import mask_metrics
from .synthfeat import ConfigError, DatasetSpec, SamplingError, make_dataset, make_scene, render_features

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FCPC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


# -- episodes ----------------------------------------------------------------

@dataclass
class Episode:
    support: list[tuple[np.ndarray, np.ndarray, np.ndarray]]  # (sam_like, backbone_like, mask) per shot
    query: tuple[np.ndarray, np.ndarray, np.ndarray]
    class_id: int
    phase: str

    @property
    def shots(self) -> int:
        return len(self.support)


def sample_episode(
    dataset: DatasetSpec,
    phase: str,
    rng: np.random.Generator,
    shots: int = 1,
    max_shapes: int = 3,
    min_fg: int = 16,
    budget: int = 100,
) -> Episode:
    """Draw a class of ``phase`` and K+1 scenes that all contain it.

    Distractor shapes use other classes of the same phase.
    """
    if shots < 1:
        raise ConfigError("shots must be >= 1")
    pool = dataset.phase_classes(phase)
    if not pool:
        raise ConfigError(f"phase {phase!r} has no classes")
    c = int(rng.choice(pool))
    views = []
    for _ in range(shots + 1):
        try:
            scene = make_scene(rng, dataset, c, pool, max_shapes=max_shapes, min_fg=min_fg, budget=budget)
        except SamplingError as err:
            raise SamplingError(f"episode for class {c}: {err}") from err
        views.append(render_features(scene, dataset, c))
    return Episode(support=views[:-1], query=views[-1], class_id=c, phase=phase)


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    # data
    n_base: int = 12
    n_novel: int = 4
    channels: int = 64
    height: int = 32
    width: int = 32
    sigma_sam: float = 0.1
    sigma_img: float = 0.3
    sigma_pix: float = 0.5
    data_seed: int = 0
    max_shapes: int = 3
    min_fg: int = 16
    # model
    n_tokens: int = 8
    steps: int = 3
    hidden: int = 16
    residual: bool = True
    share_projections: bool = False
    variant: str = "full"
    proj_init: str = "identity"
    conv_init: str = "identity"
    # desk-scale init: sharp attention and class-dominated prototypes from step 0
    proj_gain: float = 12.0
    dec_gain: float = 3.0
    value_gain: float = 3.0
    head_init: str = "positive"
    head_scale: float = 1.0
    # optimisation
    lr: float = 3e-3
    total_steps: int = 1500
    batch: int = 4
    shots: int = 1
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0  # global gradient-norm cap, 0 disables
    lambda_ortho: float = 0.05
    lambda_guide: float = 0.5
    clamp_eps: float = 1e-7
    ortho_include_last: bool = False
    seed: int = 0
    log_every: int = 100
    # evaluation
    eval_episodes: int = 1000
    eval_seed: int = 12345
    threshold: float = 0.5

    def __post_init__(self):
        if self.steps < 2:
            raise ConfigError("steps must be >= 2")
        if self.n_tokens < 1:
            raise ConfigError("n_tokens must be >= 1")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.batch < 1 or self.shots < 1 or self.total_steps < 0:
            raise ConfigError("batch and shots must be >= 1, total_steps >= 0")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels,
            n_tokens=self.n_tokens,
            steps=self.steps,
            hidden=self.hidden,
            residual=self.residual,
            share_projections=self.share_projections,
            variant=self.variant,
            proj_init=self.proj_init,
            conv_init=self.conv_init,
            proj_gain=self.proj_gain,
            dec_gain=self.dec_gain,
            value_gain=self.value_gain,
            head_init=self.head_init,
            head_scale=self.head_scale,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            lambda_ortho=self.lambda_ortho,
            lambda_guide=self.lambda_guide,
            eps=self.clamp_eps,
            ortho_include_last=self.ortho_include_last,
        )

    def dataset(self) -> DatasetSpec:
        return make_dataset(
            n_base=self.n_base,
            n_novel=self.n_novel,
            channels=self.channels,
            height=self.height,
            width=self.width,
            sigma_sam=self.sigma_sam,
            sigma_img=self.sigma_img,
            sigma_pix=self.sigma_pix,
            seed=self.data_seed,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in dataclasses.fields(self))


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(name: str, kind, raw: str):
    kind = {"int": int, "float": float, "bool": bool, "str": str}.get(kind, kind)
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 0)
        return kind(raw)
    except ValueError as err:
        raise ConfigError(f"bad value for {name}: {raw!r}") from err


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines (``#`` starts a comment) over ``base``."""
    kinds = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, kinds[key], raw)
    return dataclasses.replace(base or RunConfig(), **values)


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path: str | os.PathLike, params, cfg: RunConfig) -> None:
    """``FCPC`` | u32 version | u32 len + config text | u32 count | named f64 blobs."""
    buf = io.BytesIO()
    text = cfg.to_text().encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(text)))
    buf.write(text)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(p.data, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path: str | os.PathLike) -> tuple["OrderedDict[str, Parameter]", RunConfig]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        pos = 12
        cfg = parse_config(raw[pos : pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params: OrderedDict[str, Parameter] = OrderedDict()
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (ndim,) = struct.unpack_from("<I", raw, pos)
            dims = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            nbytes = int(np.prod(dims, dtype=np.int64)) * 8
            if pos + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            data = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=pos).reshape(dims)
            params[name] = Parameter(data.astype(np.float64), name=name)
            pos += nbytes
    except struct.error as err:
        raise CheckpointError(f"{path}: truncated checkpoint") from err
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    check_params(params, cfg)
    return params, cfg


def check_params(params, cfg: RunConfig) -> None:
    """Raise if ``params`` does not have the layout ``cfg`` implies."""
    expected = init_params(cfg.model_config(), np.random.default_rng(0))
    if list(expected) != list(params):
        raise CheckpointError("checkpoint parameters do not match the configuration")
    for name, p in expected.items():
        if p.shape != params[name].shape:
            raise CheckpointError(f"{name}: shape {params[name].shape}, config implies {p.shape}")


# -- training ----------------------------------------------------------------

@dataclass
class TrainResult:
    params: "OrderedDict[str, Parameter]"
    config: RunConfig
    history: list[dict] = field(default_factory=list)  # one entry per step


def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, episode_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(episode_ss)


def initial_params(cfg: RunConfig):
    init_rng, _ = _streams(cfg.seed)
    return init_params(cfg.model_config(), init_rng)


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    params = [p for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
    if norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def train(cfg: RunConfig, dataset: DatasetSpec | None = None, callback: Callable[[dict, dict], None] | None = None) -> TrainResult:
    """AdamW with cosine decay over base-phase episodes; losses averaged per batch."""
    dataset = dataset or cfg.dataset()
    init_rng, ep_rng = _streams(cfg.seed)
    mcfg, lcfg = cfg.model_config(), cfg.loss_config()
    params = init_params(mcfg, init_rng)
    history = []
    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr)
        zero_grad(params.values())
        comps_sum: dict[str, float] = {}
        for _ in range(cfg.batch):
            ep = sample_episode(dataset, "base", ep_rng, cfg.shots, cfg.max_shapes, cfg.min_fg)
            res = forward(params, mcfg, ep.support, ep.query[0], ep.query[1], ep.query[2], lcfg)
            if not math.isfinite(res.loss.item()):
                raise TrainingDiverged(f"step {step}: non-finite loss {res.components}")
            backward(res.loss / cfg.batch if cfg.batch > 1 else res.loss)
            for k, v in res.components.items():
                comps_sum[k] = comps_sum.get(k, 0.0) + v
        if cfg.grad_clip > 0:
            clip_grad_norm(params.values(), cfg.grad_clip)
        adam_step(
            params.values(),
            lr=lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.adam_eps,
            weight_decay=cfg.weight_decay,
        )
        entry = {"step": step, "lr": lr, **{k: v / cfg.batch for k, v in comps_sum.items()}}
        history.append(entry)
        if callback is not None:
            callback(entry, params)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d lr %.2e total %.4f", step, lr, entry["total"])
    return TrainResult(params=params, config=cfg, history=history)


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    miou: float
    constant_miou: float  # all-foreground prediction on the same episodes
    pseudo_conventional: dict
    pseudo_attention: dict
    records: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "miou": self.miou,
            "constant_miou": self.constant_miou,
            "episodes": len(self.records),
            "pseudo_conventional": self.pseudo_conventional,
            "pseudo_attention": self.pseudo_attention,
        }


def eval_episodes(dataset: DatasetSpec, n: int, seed: int, shots: int = 1, max_shapes: int = 3, min_fg: int = 16) -> Iterable[Episode]:
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield sample_episode(dataset, "novel", rng, shots, max_shapes, min_fg)


def _mean_metrics(rows: Sequence[dict]) -> dict:
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


def evaluate(
    params,
    cfg: RunConfig,
    dataset: DatasetSpec | None = None,
    n_episodes: int | None = None,
    shots: int | None = None,
    predictor: Callable[[Episode], np.ndarray] | None = None,
    on_episode: Callable[[int, Episode, object], None] | None = None,
) -> EvalReport:
    """Mean IoU of binarized predictions over novel episodes.

    ``predictor`` replaces the model (it maps an episode to a soft mask).
    Pseudo-mask quality for both mask types is logged per episode.
    """
    dataset = dataset or cfg.dataset()
    if params is not None:
        check_params(params, cfg)
    n = n_episodes or cfg.eval_episodes
    k = shots or cfg.shots
    mcfg = cfg.model_config()
    records = []
    conv_rows, attn_rows = [], []
    for i, ep in enumerate(eval_episodes(dataset, n, cfg.eval_seed, k, cfg.max_shapes, cfg.min_fg)):
        if ep.class_id not in dataset.novel_classes:
            raise AssertionError(f"evaluation drew base class {ep.class_id}")
        g_q, f_q, m_q = ep.query
        rec = {"episode": i, "class": ep.class_id}
        result = None
        if predictor is not None:
            pred = np.asarray(predictor(ep))
        else:
            result = forward(params, mcfg, ep.support, g_q, f_q)
            pred = result.pred.data
            conv = mask_metrics(result.pseudo, m_q, cfg.threshold).as_dict()
            rec["pseudo_conventional"] = conv
            conv_rows.append(conv)
            if result.attn_masks:
                attn = mask_metrics(result.attn_masks[-1].data, m_q, cfg.threshold).as_dict()
                rec["pseudo_attention"] = attn
                attn_rows.append(attn)
        rec["iou"] = mask_metrics(pred, m_q, cfg.threshold).iou
        rec["constant_iou"] = mask_metrics(np.ones_like(m_q), m_q, cfg.threshold).iou
        records.append(rec)
        if on_episode is not None:
            on_episode(i, ep, result if result is not None else pred)
    return EvalReport(
        miou=float(np.mean([r["iou"] for r in records])),
        constant_miou=float(np.mean([r["constant_iou"] for r in records])),
        pseudo_conventional=_mean_metrics(conv_rows),
        pseudo_attention=_mean_metrics(attn_rows),
        records=records,
    )


# -- ablations ---------------------------------------------------------------

ABLATIONS: dict[str, dict] = {
    # matching scheme and pseudo-mask source
    "a": {"variant": "pixel"},
    "e": {"variant": "conventional"},
    "f": {"variant": "full"},
    # loss terms on top of the prompt loss
    "prompt": {"lambda_guide": 0.0, "lambda_ortho": 0.0},
    "prompt+guide": {"lambda_ortho": 0.0},
    "prompt+ortho": {"lambda_guide": 0.0},
    "all-losses": {},
    # step count
    "T2": {"steps": 2},
    "T3": {"steps": 3},
    "T4": {"steps": 4},
    "T6": {"steps": 6},
}

COMPONENT_ABLATION = ("a", "e", "f")
LOSS_ABLATION = ("prompt", "prompt+guide", "prompt+ortho", "all-losses")
STEP_SWEEP = ("T2", "T3", "T4", "T6")

ABLATION_FIELDS = (
    "variant",
    "seed",
    "miou",
    "constant_miou",
    "apm_iou",
    "apm_precision",
    "apm_recall",
    "conv_iou",
    "conv_precision",
    "conv_recall",
    "final_loss",
)


def variant_config(cfg: RunConfig, name: str) -> RunConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {name!r}; known: {', '.join(ABLATIONS)}")
    return cfg.replace(**ABLATIONS[name])


def run_ablation(
    cfg: RunConfig,
    variants: Sequence[str],
    seeds: Sequence[int] = (0,),
    n_episodes: int | None = None,
) -> list[dict]:
    """Train and evaluate each variant with each shared seed; one row per run."""
    if not variants:
        raise ConfigError("no ablation variants given")
    rows = []
    dataset = cfg.dataset()
    for name in variants:
        vcfg = variant_config(cfg, name)
        for seed in seeds:
            run = train(vcfg.replace(seed=seed), dataset)
            rep = evaluate(run.params, run.config, dataset, n_episodes=n_episodes)
            tail = run.history[-100:]
            rows.append(
                {
                    "variant": name,
                    "seed": seed,
                    "miou": rep.miou,
                    "constant_miou": rep.constant_miou,
                    "apm_iou": rep.pseudo_attention.get("iou", float("nan")),
                    "apm_precision": rep.pseudo_attention.get("precision", float("nan")),
                    "apm_recall": rep.pseudo_attention.get("recall", float("nan")),
                    "conv_iou": rep.pseudo_conventional.get("iou", float("nan")),
                    "conv_precision": rep.pseudo_conventional.get("precision", float("nan")),
                    "conv_recall": rep.pseudo_conventional.get("recall", float("nan")),
                    "final_loss": float(np.mean([h["total"] for h in tail])) if tail else float("nan"),
                }
            )
            log.info("ablation %s seed %d: miou %.4f", name, seed, rep.miou)
    return rows


def ablation_means(rows: Sequence[dict]) -> dict[str, float]:
    out: dict[str, list[float]] = {}
    for r in rows:
        out.setdefault(r["variant"], []).append(r["miou"])
    return {k: float(np.mean(v)) for k, v in out.items()}


def write_ablation_csv(rows: Sequence[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=ABLATION_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: r.get(k, "") for k in ABLATION_FIELDS})
