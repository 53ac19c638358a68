"""
Patch-based counterfactual inference.

An image is cut into its four quadrants, each resized back to full
resolution. Patch logits are softmax-weighted over the patch axis (per class),
aggregated, and fused with the image logits on the logit scale:
tde_k = sigmoid(p_k + lambda * q_k).
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, softmax

from app.core.config import settings
from app.core.errors import ModelError, ShapeError
from app.core.numcore import model_logits
from app.models.bundle import NUM_PATCHES, LogitBundle, PatchGrid, WeightSource
from app.models.params import ModelParams, TrainMode
from app.schemas import FusionConfig

logger = logging.getLogger(__name__)

PATCH_AXIS = -2


def resize_bilinear(arr: np.ndarray, out_side: int) -> np.ndarray:
    """
    Corner-aligned bilinear resize of the last two axes to out_side x out_side.

    Output pixel i samples source coordinate i * (h - 1) / (out_side - 1), so
    the four corners map exactly onto the source corners.
    """
    arr = np.asarray(arr, dtype=np.float64)
    h, w = arr.shape[-2:]

    def coords(src: int):
        if out_side == 1 or src == 1:
            pos = np.zeros(out_side)
        else:
            pos = np.arange(out_side) * (src - 1) / (out_side - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    r0, r1, fr = coords(h)
    c0, c1, fc = coords(w)

    # lerp as a + f * (b - a) keeps constant regions exact
    top = arr[..., r0, :]
    bottom = arr[..., r1, :]
    rows = top + fr[:, None] * (bottom - top)
    left = rows[..., c0]
    right = rows[..., c1]
    return left + fc * (right - left)


def quadrant_origins(side: int) -> Tuple[Tuple[int, int, int], ...]:
    half = side // 2
    return ((0, 0, half), (0, half, half), (half, 0, half), (half, half, half))


def crop_patches(image: np.ndarray) -> PatchGrid:
    """Quadrant crops TL, TR, BL, BR of one image, each resized to S x S."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ShapeError(f"expected a square image, got shape {image.shape}")
    return PatchGrid(
        patches=crop_patches_batch(image[None])[0],
        provenance=quadrant_origins(image.shape[0]),
    )


def crop_patches_batch(images: np.ndarray) -> np.ndarray:
    """(n, S, S) -> (n, 4, S, S) resized quadrant crops."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise ShapeError(f"expected (n, S, S) images, got shape {images.shape}")
    side = images.shape[1]
    if side % 2:
        raise ShapeError(f"image side must be even, got {side}")
    crops = np.stack(
        [images[:, r:r + s, c:c + s] for r, c, s in quadrant_origins(side)],
        axis=1,
    )
    return resize_bilinear(crops, side)


def patch_weights(patch_logits: np.ndarray, tau: float) -> np.ndarray:
    """Per-class softmax over the patch axis of (..., m, q) logits."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return softmax(np.asarray(patch_logits, dtype=np.float64) / tau, axis=PATCH_AXIS)


def aggregate_patch_logits(patch_logits: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """q_agg_k = sum_j w_jk * q_jk."""
    patch_logits = np.asarray(patch_logits, dtype=np.float64)
    if patch_logits.shape != np.shape(weights):
        raise ShapeError("patch logits and weights differ in shape")
    return (weights * patch_logits).sum(axis=PATCH_AXIS)


def aggregate_backward(
    patch_logits: np.ndarray,
    weights: np.ndarray,
    grad_aggregated: np.ndarray,
    tau: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Backpropagate dL/dq_agg through the weighted aggregation.

    Returns (dL/dpatch_logits via the direct path, dL/dweight_logits via the
    softmax). When weights come from the patch logits themselves the caller
    adds the two.
    """
    g = np.expand_dims(grad_aggregated, PATCH_AXIS)
    d_patch = g * weights
    d_weights = g * patch_logits
    centred = d_weights - (weights * d_weights).sum(axis=PATCH_AXIS, keepdims=True)
    d_weight_logits = weights * centred / tau
    return d_patch, d_weight_logits


def tde_logits(image_logits: np.ndarray, aggregated: np.ndarray, lam: float) -> np.ndarray:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return np.asarray(image_logits, dtype=np.float64) + lam * np.asarray(aggregated)


def tde_fuse(image_logits: np.ndarray, aggregated: np.ndarray, lam: float) -> np.ndarray:
    """Fused probabilities sigmoid(p + lambda * q_agg); lambda = 0 gives sigmoid(p)."""
    return expit(tde_logits(image_logits, aggregated, lam))


# ============= Model-level inference =============

def _patch_heads(model: ModelParams, source: WeightSource) -> Tuple[str, str]:
    """
    (head producing patch logits, head producing weight logits).

    shared:     one head scores the patches and weighs them; the image head
                when the model has one, else the patch head
    psi_head:   the patch head scores and weighs
    theta_head: the patch head scores, the weight head weighs
    """
    heads = model.networks[0].heads
    if source == WeightSource.SHARED:
        head = "phi" if "phi" in heads else "psi"
        return head, head
    if "psi" not in heads:
        raise ModelError(f"{model.mode.value} predictors have no patch head")
    if source == WeightSource.PSI_HEAD:
        return "psi", "psi"
    if "theta" not in heads:
        raise ModelError(f"{model.mode.value} predictors have no weight head")
    return "psi", "theta"


def _as_image_batch(model: ModelParams, images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    side = model.image_side
    if images.ndim != 3 or images.shape[1:] != (side, side):
        raise ShapeError(f"model expects {side}x{side} images, got shape {images.shape}")
    return images


def _bundle_chunk(model: ModelParams, images: np.ndarray, cfg: FusionConfig) -> LogitBundle:
    n, side, _ = images.shape
    q = model.num_classes
    patch_head, weight_head = _patch_heads(model, cfg.weight_source)

    patches = crop_patches_batch(images).reshape(n * NUM_PATCHES, side * side)
    patch_logits = model_logits(model, patches, patch_head).reshape(n, NUM_PATCHES, q)
    if weight_head == patch_head:
        weight_logits = patch_logits
    else:
        weight_logits = model_logits(model, patches, weight_head).reshape(n, NUM_PATCHES, q)
    weights = patch_weights(weight_logits, cfg.tau)
    aggregated = aggregate_patch_logits(patch_logits, weights)

    if model.mode == TrainMode.PATCH_ONLY:
        # no image head: the fused score degenerates to the patch score
        image_logits = np.zeros((n, q))
    else:
        image_logits = model_logits(model, images.reshape(n, side * side), "phi")
    tde = tde_fuse(image_logits, aggregated, cfg.lam)
    return LogitBundle(image_logits, patch_logits, weight_logits, weights, aggregated, tde, cfg.lam)


def pat_i_infer(
    model: ModelParams,
    images: np.ndarray,
    cfg: Optional[FusionConfig] = None,
    chunk_size: Optional[int] = None,
) -> LogitBundle:
    """
    Patching-based inference for one image (S, S) or a batch (n, S, S).

    The bundle always carries a leading batch axis. Images are processed in
    chunks of `chunk_size` (default settings.EVAL_BATCH_SIZE).
    """
    cfg = cfg or FusionConfig()
    images = _as_image_batch(model, images)
    chunk = chunk_size or settings.EVAL_BATCH_SIZE
    parts = [_bundle_chunk(model, images[i:i + chunk], cfg) for i in range(0, len(images), chunk)]
    if len(parts) == 1:
        return parts[0]
    return LogitBundle(
        *(np.concatenate([getattr(p, f) for p in parts]) for f in
          ("image_logits", "patch_logits", "weight_logits", "weights", "aggregated", "tde")),
        lam=cfg.lam,
    )


def plain_logits(
    model: ModelParams,
    images: np.ndarray,
    tau: float = 1.0,
    chunk_size: Optional[int] = None,
) -> np.ndarray:
    """
    Image-level logits without fusion, (n, q).

    Patch-only predictors have no image head; their plain prediction is the
    theta-weighted aggregate of patch logits.
    """
    images = _as_image_batch(model, images)
    if model.mode == TrainMode.PATCH_ONLY:
        cfg = FusionConfig(tau=tau, weight_source=WeightSource.THETA_HEAD)
        return pat_i_infer(model, images, cfg, chunk_size).aggregated
    n, side, _ = images.shape
    chunk = chunk_size or settings.EVAL_BATCH_SIZE
    flat = images.reshape(n, side * side)
    return np.concatenate(
        [model_logits(model, flat[i:i + chunk], "phi") for i in range(0, n, chunk)]
    )
