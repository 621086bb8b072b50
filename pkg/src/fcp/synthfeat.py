"""Synthetic episodic scenes with two complementary feature families.

"SAM-like" maps give every segment of an image its own random direction,
redrawn per image, so pixels group tightly inside an image but carry no
class identity across images. "Backbone-like" maps are built around one
global embedding per class, so they agree across images but are noisy per
pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BACKGROUND = 0


class ConfigError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    channels: int
    height: int
    width: int
    sigma_sam: float
    sigma_img: float
    sigma_pix: float
    embeddings: np.ndarray = field(repr=False)  # row per class id, row 0 = background
    seed: int = 0
    background_class: int = BACKGROUND

    @property
    def classes(self) -> tuple[int, ...]:
        return self.base_classes + self.novel_classes

    def phase_classes(self, phase: str) -> tuple[int, ...]:
        if phase == "base":
            return self.base_classes
        if phase == "novel":
            return self.novel_classes
        raise ConfigError(f"unknown phase {phase!r}")


def make_dataset(
    n_base: int = 12,
    n_novel: int = 4,
    channels: int = 64,
    height: int = 32,
    width: int = 32,
    sigma_sam: float = 0.1,
    sigma_img: float = 0.3,
    sigma_pix: float = 0.5,
    seed: int = 0,
    base_classes=None,
    novel_classes=None,
) -> DatasetSpec:
    """Draw the class universe and one unit-norm global embedding per class.

    Class ids default to ``1..n_base`` (base) then the novel ids; id 0 is the
    background. Explicit id lists may be passed instead.
    """
    base = tuple(base_classes) if base_classes is not None else tuple(range(1, n_base + 1))
    novel = (
        tuple(novel_classes)
        if novel_classes is not None
        else tuple(range(len(base) + 1, len(base) + n_novel + 1))
    )
    if set(base) & set(novel):
        raise ConfigError(f"base and novel classes overlap: {sorted(set(base) & set(novel))}")
    if len(base) < 2 or len(novel) < 2:
        raise ConfigError("need at least 2 base and 2 novel classes")
    if BACKGROUND in base or BACKGROUND in novel or min(base + novel) < 0:
        raise ConfigError("class ids must be positive (0 is the background)")
    if channels < 1 or height < 1 or width < 1:
        raise ConfigError("channels, height and width must be positive")
    if min(sigma_sam, sigma_img, sigma_pix) < 0:
        raise ConfigError("noise levels must be nonnegative")
    rng = np.random.default_rng(seed)
    emb = rng.standard_normal((max(base + novel) + 1, channels))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return DatasetSpec(
        base_classes=base,
        novel_classes=novel,
        channels=channels,
        height=height,
        width=width,
        sigma_sam=sigma_sam,
        sigma_img=sigma_img,
        sigma_pix=sigma_pix,
        embeddings=emb,
        seed=seed,
    )


@dataclass(frozen=True)
class SceneSpec:
    """A partition of the grid into segments.

    ``labels[h, w]`` indexes ``segment_classes``; segment 0 is the
    background. ``noise_seed`` fixes every random draw made at render time.
    """

    labels: np.ndarray = field(repr=False)
    segment_classes: tuple[int, ...]
    noise_seed: int
    background_class: int = BACKGROUND

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_mask(self, class_id: int) -> np.ndarray:
        seg = [i for i, c in enumerate(self.segment_classes) if c == class_id]
        return np.isin(self.labels, seg).astype(np.float64)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    lo_h, hi_h = max(2, h // 5), max(3, h // 2)
    lo_w, hi_w = max(2, w // 5), max(3, w // 2)
    sh = int(rng.integers(lo_h, hi_h + 1))
    sw = int(rng.integers(lo_w, hi_w + 1))
    top = int(rng.integers(0, h - sh + 1))
    left = int(rng.integers(0, w - sw + 1))
    if rng.random() < 0.5:
        return (yy >= top) & (yy < top + sh) & (xx >= left) & (xx < left + sw)
    cy, cx = top + (sh - 1) / 2, left + (sw - 1) / 2
    return ((yy - cy) / (sh / 2)) ** 2 + ((xx - cx) / (sw / 2)) ** 2 <= 1.0


def make_scene(
    rng: np.random.Generator,
    dataset: DatasetSpec,
    target_class: int,
    distractors: tuple[int, ...] = (),
    max_shapes: int = 3,
    min_fg: int = 16,
    budget: int = 100,
) -> SceneSpec:
    """Paint 1..max_shapes random rectangles/ellipses, one of them ``target_class``.

    Distractor shapes draw their class from ``distractors`` (never the
    target). Rejection-samples until the target keeps ``min_fg`` visible
    pixels and some background stays uncovered.
    """
    h, w = dataset.height, dataset.width
    pool = [c for c in distractors if c != target_class]
    min_fg = min(min_fg, h * w)
    for _ in range(budget):
        n_shapes = int(rng.integers(1, max_shapes + 1)) if pool else 1
        classes = [target_class] + [int(rng.choice(pool)) for _ in range(n_shapes - 1)]
        order = rng.permutation(n_shapes)
        labels = np.zeros((h, w), dtype=np.int64)
        for k in order:
            labels[_shape_mask(rng, h, w)] = k + 1
        if (labels == 1).sum() < min_fg:
            continue
        visible = [k for k in range(n_shapes + 1) if (labels == k).any()]
        if visible[0] != 0:
            continue
        remap = np.zeros(n_shapes + 1, dtype=np.int64)
        seg_classes = []
        for new, old in enumerate(visible):
            remap[old] = new
            seg_classes.append(dataset.background_class if old == 0 else classes[old - 1])
        return SceneSpec(
            labels=remap[labels],
            segment_classes=tuple(seg_classes),
            noise_seed=int(rng.integers(0, 2**63 - 1)),
            background_class=dataset.background_class,
        )
    raise SamplingError(f"could not place class {target_class} with {min_fg} visible pixels")


def _unit_noise(rng: np.random.Generator, shape, channels: int) -> np.ndarray:
    return rng.standard_normal(shape) / np.sqrt(channels)


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=0, keepdims=True)


def render_features(
    scene: SceneSpec, dataset: DatasetSpec, target_class: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(sam_like, backbone_like, gt_mask)`` with maps shaped (C, H, W).

    Noise vectors have per-coordinate std ``1/sqrt(C)`` so each sigma is
    relative to a unit embedding. ``gt_mask`` marks ``target_class``
    (default: the first foreground segment's class).
    """
    known = set(dataset.classes) | {dataset.background_class}
    for c in scene.segment_classes:
        if c not in known:
            raise ConfigError(f"scene uses unknown class {c}")
    if target_class is None:
        target_class = next(c for c in scene.segment_classes if c != scene.background_class)
    if target_class not in known:
        raise ConfigError(f"unknown target class {target_class}")

    C, (h, w) = dataset.channels, scene.labels.shape
    rng = np.random.default_rng(scene.noise_seed)
    n_seg = len(scene.segment_classes)

    seg_emb = rng.standard_normal((n_seg, C))
    seg_emb /= np.linalg.norm(seg_emb, axis=1, keepdims=True)
    sam = seg_emb[scene.labels].transpose(2, 0, 1)
    sam = sam + dataset.sigma_sam * _unit_noise(rng, (C, h, w), C)

    classes = sorted(set(scene.segment_classes))
    perturb = {c: dataset.sigma_img * _unit_noise(rng, C, C) for c in classes}
    base = np.stack([dataset.embeddings[c] + perturb[c] for c in scene.segment_classes])
    backbone = base[scene.labels].transpose(2, 0, 1)
    backbone = backbone + dataset.sigma_pix * _unit_noise(rng, (C, h, w), C)

    return _normalize(sam), _normalize(backbone), scene.class_mask(target_class)


@dataclass
class Complementarity:
    sam_fgbg_gap: float
    backbone_fgbg_gap: float
    sam_class_gap: float
    backbone_class_gap: float
    sam_fg_fg: float = 0.0
    backbone_fg_fg: float = 0.0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _mean_pair_cos(a: np.ndarray, b: np.ndarray, rng: np.random.Generator, n: int) -> float:
    """Mean cosine over ``n`` random (row of a, row of b) pairs of unit vectors."""
    i = rng.integers(0, len(a), n)
    j = rng.integers(0, len(b), n)
    return float(np.einsum("ij,ij->i", a[i], b[j]).mean())


def complementarity_stats(
    dataset: DatasetSpec, n_scenes: int = 100, seed: int = 0, pairs: int = 256
) -> Complementarity:
    """Mean similarity gaps for both feature families.

    Protocol, per scene: draw a class ``c`` and three images, A and B
    containing ``c`` and D containing some other class. The FG/BG gap is
    mean cos(FG_A, FG_A) minus mean cos(FG_A, BG_A); the class gap is mean
    cos(FG_A, FG_B) minus mean cos(FG_A, FG_D). Each mean uses ``pairs``
    random pixel pairs; gaps are averaged over scenes.
    """
    if n_scenes < 2:
        raise ConfigError("need at least 2 scenes")
    rng = np.random.default_rng(seed)
    classes = dataset.classes
    acc = np.zeros(6)
    for _ in range(n_scenes):
        c, d = rng.choice(classes, size=2, replace=False)
        maps = []
        for target in (c, c, d):
            scene = make_scene(rng, dataset, int(target), classes)
            sam, bb, gt = render_features(scene, dataset, int(target))
            maps.append((sam.reshape(dataset.channels, -1).T, bb.reshape(dataset.channels, -1).T, gt.reshape(-1) > 0))
        (sa, ba, ma), (sb, bbb, mb), (sd, bd, md) = maps
        out = []
        for fa, fb, fd in ((sa, sb, sd), (ba, bbb, bd)):
            fg_fg = _mean_pair_cos(fa[ma], fa[ma], rng, pairs)
            fg_bg = _mean_pair_cos(fa[ma], fa[~ma], rng, pairs) if (~ma).any() else 0.0
            intra = _mean_pair_cos(fa[ma], fb[mb], rng, pairs)
            inter = _mean_pair_cos(fa[ma], fd[md], rng, pairs)
            out.append((fg_fg - fg_bg, intra - inter, fg_fg))
        acc += [out[0][0], out[1][0], out[0][1], out[1][1], out[0][2], out[1][2]]
    acc /= n_scenes
    return Complementarity(*map(float, acc))
