"""
Synthetic multi-label scenes with controllable label co-occurrence.

Each class owns a fixed glyph; a scene places the glyphs of its present
classes into the four quadrants of an S x S canvas. Coupled partner classes
are rendered at low contrast, so a model can profit from (and overfit to) the
presence of their anchors.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from app.core.config import settings
from app.core.errors import GenerationError
from app.core.seeding import substream
from app.models.scene import Dataset, GlyphAtlas, Placement, SceneExample
from app.schemas import CooccurrenceSpec, Coupling, SynthConfig

logger = logging.getLogger(__name__)

MAX_ATLAS_ATTEMPTS = 100


# ============= Glyphs =============

def _sprite(rng: np.random.Generator, side: int) -> np.ndarray:
    mask = rng.random((side, side)) < 0.5
    intensity = 0.6 + 0.4 * rng.random((side, side))
    return np.where(mask, intensity, 0.0)


def build_atlas(
    num_classes: int,
    glyph_side: int,
    seed: int,
    contrast: Optional[Sequence[float]] = None,
) -> GlyphAtlas:
    """
    Seeded sprites, redrawn until every pair of binarised sprites differs in
    at least glyph_side**2 / 8 pixels.
    """
    contrast = np.ones(num_classes) if contrast is None else np.asarray(contrast, dtype=np.float64)
    if contrast.shape != (num_classes,) or np.any(contrast <= 0) or np.any(contrast > 1):
        raise GenerationError("contrast needs one value in (0, 1] per class")

    min_distance = glyph_side * glyph_side / 8
    sprites: List[np.ndarray] = []
    for k in range(num_classes):
        for attempt in range(MAX_ATLAS_ATTEMPTS):
            candidate = _sprite(substream(seed, "atlas", k, attempt), glyph_side)
            binary = candidate > 0
            if all(np.count_nonzero(binary != (s > 0)) >= min_distance for s in sprites):
                sprites.append(candidate)
                break
        else:
            raise GenerationError(f"could not draw a distinct glyph for class {k}")
    return GlyphAtlas(sprites=np.stack(sprites), contrast=contrast, seed=seed)


# ============= Labels =============

def sample_label_matrix(spec: CooccurrenceSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    """
    n label vectors (n, q) uint8.

    Draw order is fixed (anchor, solo, coupling uniforms) so results depend
    only on the generator state. Classes resolve in topological order of the
    coupling graph, so chained couplings propagate. Scenes with more than
    max_objects present classes keep the lowest class indices: a lower index
    is a higher priority, and the highest indices are dropped first.
    """
    q = spec.num_classes
    anchor_u = rng.random((n, q))
    solo_u = rng.random((n, q))
    coupling_u = rng.random((n, len(spec.couplings)))

    anchors = np.asarray(spec.anchor_probs)
    solos = np.asarray(spec.solo_probs)
    is_partner = np.zeros(q, dtype=bool)
    is_partner[spec.partners] = True

    present = np.zeros((n, q), dtype=bool)
    incoming: List[List[Tuple[int, Coupling]]] = [[] for _ in range(q)]
    for i, c in enumerate(spec.couplings):
        incoming[c.target].append((i, c))

    for k in nx.lexicographical_topological_sort(spec.coupling_graph()):
        on = anchor_u[:, k] < anchors[k]
        if is_partner[k]:
            on |= solo_u[:, k] < solos[k]
        for i, c in incoming[k]:
            on |= present[:, c.source] & (coupling_u[:, i] < c.rho)
        present[:, k] = on

    # keep the lowest class indices when too many objects are present
    overflow = present.sum(axis=1) > spec.max_objects
    if overflow.any():
        rank = np.cumsum(present, axis=1)
        present &= rank <= spec.max_objects
    return present.astype(np.uint8)


def sample_label_vector(spec: CooccurrenceSpec, rng: np.random.Generator) -> np.ndarray:
    return sample_label_matrix(spec, rng, 1)[0]


# ============= Rendering =============

def render_scene(
    labels: np.ndarray,
    atlas: GlyphAtlas,
    rng: np.random.Generator,
    noise_sd: float = 0.05,
    image_side: int = 64,
    allow_colocation: bool = True,
) -> SceneExample:
    """
    Place each present glyph at a random offset inside a random quadrant.

    Distinct quadrants are used while they last; extra glyphs share a quadrant
    and blend additively. Pixel noise is added last, then values clamp to [0, 1].
    """
    if image_side % 2:
        raise GenerationError("image side must be even")
    half = image_side // 2
    glyph = atlas.glyph_side
    if glyph > half:
        raise GenerationError(f"glyph side {glyph} does not fit a {half}x{half} quadrant")

    present = np.flatnonzero(np.asarray(labels))
    if len(present) > 4 and not allow_colocation:
        raise GenerationError(f"{len(present)} objects exceed 4 quadrants without co-location")

    quadrants = list(rng.permutation(4)[:min(len(present), 4)])
    quadrants += [int(rng.integers(4)) for _ in range(len(present) - len(quadrants))]

    image = np.zeros((image_side, image_side))
    placements = []
    for k, quadrant in zip(present, quadrants):
        row_off, col_off = (int(v) for v in rng.integers(0, half - glyph + 1, size=2))
        top = (quadrant // 2) * half + row_off
        left = (quadrant % 2) * half + col_off
        image[top:top + glyph, left:left + glyph] += atlas.contrast[k] * atlas.sprites[k]
        placements.append(Placement(int(k), int(quadrant), row_off, col_off))

    if noise_sd > 0:
        image += rng.normal(0.0, noise_sd, size=image.shape)
    np.clip(image, 0.0, 1.0, out=image)
    return SceneExample(
        image=image.astype(np.float32),
        labels=np.asarray(labels, dtype=np.uint8),
        placements=placements,
    )


# ============= Datasets =============

def default_spec(cfg: Optional[SynthConfig] = None) -> CooccurrenceSpec:
    """
    Three anchors each coupled to one partner (rho), partners otherwise rare,
    remaining classes independent.
    """
    cfg = cfg or SynthConfig()
    q = cfg.num_classes
    anchors = [0.3, 0.3, 0.3, 0.0, 0.0, 0.0] + [0.2] * (q - 6)
    solos = [0.0, 0.0, 0.0, 0.1, 0.1, 0.1] + [0.0] * (q - 6)
    couplings = [Coupling(source=i, target=i + 3, rho=cfg.rho) for i in range(3)]
    return CooccurrenceSpec(
        num_classes=q,
        anchor_probs=anchors,
        solo_probs=solos,
        couplings=couplings,
        max_objects=cfg.max_objects,
    )


def default_atlas(spec: CooccurrenceSpec, cfg: Optional[SynthConfig] = None, seed: int = 0) -> GlyphAtlas:
    """Coupled partners are the hard, low-contrast classes."""
    cfg = cfg or SynthConfig()
    contrast = np.ones(spec.num_classes)
    contrast[spec.partners] = cfg.hard_contrast
    return build_atlas(spec.num_classes, cfg.glyph_side, seed, contrast)


def _generate_split(spec, atlas, n, seed, split, noise_sd, image_side) -> Dataset:
    def one(index: int) -> SceneExample:
        rng = substream(seed, split, index)
        labels = sample_label_vector(spec, rng)
        return render_scene(labels, atlas, rng, noise_sd, image_side)

    workers = max(1, settings.WORKERS)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            examples = list(pool.map(one, range(n)))
    else:
        examples = [one(i) for i in range(n)]

    return Dataset(
        images=np.stack([e.image for e in examples]),
        labels=np.stack([e.labels for e in examples]),
        split=split,
        seed=seed,
        spec=spec,
        placements=[e.placements for e in examples],
        noise_sd=noise_sd,
    )


def generate_dataset(
    spec: CooccurrenceSpec,
    atlas: GlyphAtlas,
    n_train: int,
    n_test: int,
    seed: int,
    noise_sd: float = 0.05,
    image_side: int = 64,
) -> Tuple[Dataset, Dataset]:
    """Train/test splits from disjoint per-example seed streams."""
    if n_train < 1 or n_test < 1:
        raise GenerationError("both splits need at least one example")
    if atlas.num_classes != spec.num_classes:
        raise GenerationError("atlas and spec disagree on the number of classes")
    train = _generate_split(spec, atlas, n_train, seed, "train", noise_sd, image_side)
    test = _generate_split(spec, atlas, n_test, seed, "test", noise_sd, image_side)
    logger.info("generated %d train / %d test scenes (seed %d)", n_train, n_test, seed)
    return train, test


def conditional_frequency(labels: np.ndarray, a: int, b: int) -> float:
    """Empirical P(b present | a present); nan when a never occurs."""
    labels = np.asarray(labels).astype(bool)
    n_a = labels[:, a].sum()
    return float((labels[:, a] & labels[:, b]).sum() / n_a) if n_a else float("nan")
