"""
Training regimes.

DeT     one backbone + image head for all classes.
InT     one backbone + scalar head per class, trained separately.
PAT-T   shared backbone with image head phi, patch head psi and weight head
        theta; loss = l(sigmoid(p), y) + l(sigmoid(q_agg), y).
patch-only  psi/theta on resized patches only (image-scale ablation).
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from app.core.errors import ModelError, UndefinedMetricError
from app.core.losses import compute_loss
from app.core.metrics import PredictionSet, average_precision, mean_average_precision
from app.core.numcore import (
    adam_step,
    backbone_forward,
    backward,
    check_finite,
    ema_update,
    head_forward,
    init_params,
    warmup_lr,
)
from app.core.patching import (
    aggregate_backward,
    aggregate_patch_logits,
    crop_patches_batch,
    pat_i_infer,
    patch_weights,
    plain_logits,
)
from app.core.seeding import substream
from app.models.bundle import NUM_PATCHES, WeightSource
from app.models.checkpoint import Checkpoint
from app.models.params import (
    AdamState,
    EpochRecord,
    ModelParams,
    Network,
    TrainHistory,
    TrainMode,
)
from app.models.scene import Dataset
from app.schemas import FusionConfig, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class StepResult:
    """Batch-mean loss, its components and parameter gradients."""

    loss: float
    image_loss: float
    patch_loss: float
    weight_loss: float
    grads: Network


Objective = Callable[[Network, np.ndarray, np.ndarray, TrainConfig], StepResult]


# ============= Objectives =============

def image_objective(network: Network, images: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig) -> StepResult:
    """l(sigmoid(p), y) through the phi head."""
    n = images.shape[0]
    x = images.reshape(n, -1).astype(np.float64)
    hidden = backbone_forward(network, x)
    logits = head_forward(network.heads["phi"], hidden)
    value, grad = compute_loss(cfg.loss, logits, labels)
    grads = backward(network, x, hidden, {"phi": grad / n})
    return StepResult(value / n, value / n, 0.0, 0.0, grads)


def patch_objective(network: Network, images: np.ndarray, labels: np.ndarray,
                    cfg: TrainConfig, include_image: bool = True) -> StepResult:
    """
    PAT-T objective for a batch.

    Image and its four resized patches go through the same backbone in one
    stacked pass. Every patch inherits the image labels. Gradients reach theta
    only through the softmax weighting unless aux_weight_loss is set.
    """
    n, side, _ = images.shape
    q = labels.shape[1]
    tau = cfg.fusion.tau
    pixels = side * side

    patches = crop_patches_batch(images).reshape(n * NUM_PATCHES, pixels)
    if include_image:
        rows = np.concatenate([images.reshape(n, pixels).astype(np.float64), patches])
        offset = n
    else:
        rows = patches
        offset = 0
    hidden = backbone_forward(network, rows)
    patch_hidden = hidden[offset:]

    patch_logits = head_forward(network.heads["psi"], patch_hidden).reshape(n, NUM_PATCHES, q)
    weight_logits = head_forward(network.heads["theta"], patch_hidden).reshape(n, NUM_PATCHES, q)
    weights = patch_weights(weight_logits, tau)
    aggregated = aggregate_patch_logits(patch_logits, weights)

    patch_value, grad_agg = compute_loss(cfg.loss, aggregated, labels)
    d_patch, d_weight = aggregate_backward(patch_logits, weights, grad_agg, tau)

    weight_value = 0.0
    if cfg.aux_weight_loss:
        weight_aggregated = aggregate_patch_logits(weight_logits, weights)
        weight_value, grad_aux = compute_loss(cfg.loss, weight_aggregated, labels)
        direct, through_softmax = aggregate_backward(weight_logits, weights, grad_aux, tau)
        d_weight = d_weight + direct + through_softmax

    total_rows = rows.shape[0]
    psi_up = np.zeros((total_rows, q))
    theta_up = np.zeros((total_rows, q))
    psi_up[offset:] = d_patch.reshape(n * NUM_PATCHES, q) / n
    theta_up[offset:] = d_weight.reshape(n * NUM_PATCHES, q) / n
    upstream = {"psi": psi_up, "theta": theta_up}

    image_value = 0.0
    if include_image:
        image_logits = head_forward(network.heads["phi"], hidden[:n])
        image_value, grad_image = compute_loss(cfg.loss, image_logits, labels)
        phi_up = np.zeros((total_rows, q))
        phi_up[:n] = grad_image / n
        upstream["phi"] = phi_up

    grads = backward(network, rows, hidden, upstream)
    image_loss, patch_loss, weight_loss = image_value / n, patch_value / n, weight_value / n
    return StepResult(image_loss + patch_loss + weight_loss, image_loss, patch_loss, weight_loss, grads)


def patch_only_objective(network: Network, images: np.ndarray, labels: np.ndarray,
                         cfg: TrainConfig) -> StepResult:
    return patch_objective(network, images, labels, cfg, include_image=False)


OBJECTIVES = {
    TrainMode.DET: image_objective,
    TrainMode.INT: image_objective,
    TrainMode.PAT_T: patch_objective,
    TrainMode.PATCH_ONLY: patch_only_objective,
}


# ============= Steps =============

def _apply(params: ModelParams, state: AdamState, result: StepResult,
           cfg: TrainConfig) -> tuple:
    check_finite(result.loss, state.step + 1)
    grads = ModelParams(mode=params.mode, networks=[result.grads], image_side=params.image_side)
    lr = warmup_lr(cfg.learning_rate, state.step, cfg.warmup_steps)
    return adam_step(params, grads, state, lr)


def pat_t_step(model: ModelParams, state: AdamState, images: np.ndarray,
               labels: np.ndarray, cfg: TrainConfig) -> tuple:
    """One PAT-T optimizer step; returns (model, state, StepResult)."""
    if model.mode != TrainMode.PAT_T:
        raise ModelError(f"PAT-T step needs a pat-t model, got {model.mode.value}")
    result = patch_objective(model.networks[0], images, labels, cfg)
    model, state = _apply(model, state, result, cfg)
    return model, state, result


def dataset_loss(params: ModelParams, dataset: Dataset, cfg: TrainConfig,
                 labels: Optional[np.ndarray] = None, chunk: int = 256) -> float:
    """Mean per-example objective of a single-network model over a dataset."""
    objective = OBJECTIVES[params.mode]
    labels = dataset.labels if labels is None else labels
    total = 0.0
    for start in range(0, len(dataset), chunk):
        images = dataset.images[start:start + chunk].astype(np.float64)
        result = objective(params.networks[0], images, labels[start:start + chunk], cfg)
        total += result.loss * images.shape[0]
    return total / len(dataset)


# ============= Loops =============

@dataclass
class _Start:
    """Where a run begins: fresh parameters at epoch 1, or a checkpoint's state."""

    params: ModelParams
    first_epoch: int = 1
    optimizer: Optional[AdamState] = None
    ema: Optional[ModelParams] = None


def _fit(
    start: _Start,
    dataset: Dataset,
    labels: np.ndarray,
    cfg: TrainConfig,
    stream: tuple,
    evaluate: Optional[Callable[[ModelParams], float]] = None,
    tag: str = "",
):
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = start.params
    objective = OBJECTIVES[params.mode]
    state = start.optimizer if start.optimizer is not None else AdamState.for_params(params)
    ema = None
    if cfg.ema_decay is not None:
        ema = (start.ema if start.ema is not None else params).copy()
    history = TrainHistory()
    n = len(dataset)

    for epoch in range(start.first_epoch, start.first_epoch + cfg.epochs):
        # shuffle stream keyed by the absolute epoch
        order = substream(cfg.seed, "shuffle", *stream, epoch).permutation(n)
        sums = np.zeros(4)
        for offset in range(0, n, cfg.batch_size):
            idx = order[offset:offset + cfg.batch_size]
            images = dataset.images[idx].astype(np.float64)
            result = objective(params.networks[0], images, labels[idx], cfg)
            params, state = _apply(params, state, result, cfg)
            if ema is not None:
                ema = ema_update(ema, params, cfg.ema_decay)
            sums += len(idx) * np.array(
                [result.loss, result.image_loss, result.patch_loss, result.weight_loss]
            )
        means = sums / n
        record = EpochRecord(epoch, *means.tolist())
        if evaluate is not None:
            record.test_map = evaluate(ema if ema is not None else params)
        history.records.append(record)
        logger.info(
            "%s epoch %d loss=%.6f image=%.6f patch=%.6f test_mAP=%.4f",
            tag or params.mode.value, epoch, record.loss, record.image_loss,
            record.patch_loss, record.test_map,
        )
    return params, state, ema, history


def _snapshot(history: TrainHistory) -> dict:
    last = history.records[-1]
    return {
        "train_loss": last.loss,
        "image_loss": last.image_loss,
        "patch_loss": last.patch_loss,
        "weight_loss": last.weight_loss,
        "test_map": last.test_map,
    }


def _start(mode: TrainMode, dataset: Dataset, cfg: TrainConfig,
           resume: Optional[Checkpoint], num_classes: int, stream: tuple):
    if resume is not None:
        if resume.mode != mode:
            raise ModelError(
                f"cannot resume {mode.value} training from a {resume.mode.value} checkpoint"
            )
        if resume.optimizer is None:
            logger.warning("checkpoint has no optimizer state; Adam restarts from zero moments")
        return _Start(
            params=resume.params.copy(),
            first_epoch=resume.epoch + 1,
            optimizer=resume.optimizer,
            ema=resume.ema_params,
        )
    rng = substream(cfg.seed, "init", *stream)
    return _Start(init_params(mode, dataset.image_side, cfg.hidden_size, num_classes, rng))


def _map_or_nan(scores: np.ndarray, labels: np.ndarray) -> float:
    try:
        return mean_average_precision(PredictionSet(scores, labels, scores_are_logits=True))
    except UndefinedMetricError:
        return float("nan")


def evaluation_fusion(mode: TrainMode, cfg: TrainConfig) -> FusionConfig:
    """PAT-T evaluates with theta-head weights; other modes follow the config."""
    if mode in (TrainMode.PAT_T, TrainMode.PATCH_ONLY):
        return cfg.fusion.model_copy(update={"weight_source": WeightSource.THETA_HEAD})
    return cfg.fusion


def predict_logits(params: ModelParams, images: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    """Evaluation logits of a trained model: TDE logits for PAT-T, plain otherwise."""
    if params.mode == TrainMode.PAT_T:
        return pat_i_infer(params, images, evaluation_fusion(params.mode, cfg)).tde_logits
    return plain_logits(params, images, tau=cfg.fusion.tau)


def _train_single(mode: TrainMode, dataset: Dataset, cfg: TrainConfig,
                  eval_dataset: Optional[Dataset], resume: Optional[Checkpoint]) -> Checkpoint:
    start = _start(mode, dataset, cfg, resume, dataset.num_classes, ())
    evaluate = None
    if eval_dataset is not None:
        evaluate = lambda p: _map_or_nan(predict_logits(p, eval_dataset.images, cfg),
                                         eval_dataset.labels)
    params, state, ema, history = _fit(start, dataset, dataset.labels, cfg, (), evaluate)
    return Checkpoint(
        params=params,
        config=cfg,
        mode=mode,
        epoch=history.records[-1].epoch,
        metrics=_snapshot(history),
        ema_params=ema,
        optimizer=state,
        history=history,
    )


def train_det(dataset: Dataset, cfg: TrainConfig, eval_dataset: Optional[Dataset] = None,
              resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Dependent training: all classes share one backbone."""
    return _train_single(TrainMode.DET, dataset, cfg, eval_dataset, resume)


def pat_t_train(dataset: Dataset, cfg: TrainConfig, eval_dataset: Optional[Dataset] = None,
                resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Patching-based training; evaluation fuses p and the theta-weighted q_agg."""
    return _train_single(TrainMode.PAT_T, dataset, cfg, eval_dataset, resume)


def train_patch_only(dataset: Dataset, cfg: TrainConfig, eval_dataset: Optional[Dataset] = None,
                     resume: Optional[Checkpoint] = None) -> Checkpoint:
    """Resized patches only, loss l(sigmoid(q_agg), y)."""
    return _train_single(TrainMode.PATCH_ONLY, dataset, cfg, eval_dataset, resume)


def train_int(dataset: Dataset, cfg: TrainConfig, eval_dataset: Optional[Dataset] = None,
              resume: Optional[List[Checkpoint]] = None) -> List[Checkpoint]:
    """Independent training: one backbone and scalar head per class."""
    checkpoints = []
    previous = {c.class_index: c for c in resume or []}
    for k in range(dataset.num_classes):
        start = _start(TrainMode.INT, dataset, cfg, previous.get(k), 1, (k,))
        labels = dataset.labels[:, k:k + 1]
        evaluate = None
        if eval_dataset is not None and eval_dataset.labels[:, k].any():
            truth = eval_dataset.labels[:, k]
            evaluate = lambda p, truth=truth: average_precision(
                plain_logits(p, eval_dataset.images)[:, 0], truth)
        params, state, ema, history = _fit(start, dataset, labels, cfg, (k,), evaluate,
                                           tag=f"int[{k}]")
        checkpoints.append(Checkpoint(
            params=params,
            config=cfg,
            mode=TrainMode.INT,
            epoch=history.records[-1].epoch,
            metrics=_snapshot(history),
            ema_params=ema,
            class_index=k,
            optimizer=state,
            history=history,
        ))
    return checkpoints


def assemble_int(checkpoints: List[Checkpoint]) -> ModelParams:
    """Stack per-class InT models (by class index) into one q-output predictor."""
    if not checkpoints:
        raise ModelError("no independent-training checkpoints given")
    ordered = sorted(checkpoints, key=lambda c: c.class_index if c.class_index is not None else -1)
    indices = [c.class_index for c in ordered]
    if indices != list(range(len(ordered))):
        raise ModelError(f"expected class indices 0..{len(ordered) - 1}, got {indices}")
    if any(c.mode != TrainMode.INT for c in ordered):
        raise ModelError("all checkpoints must come from independent training")
    networks = [net for c in ordered for net in c.eval_params.networks]
    return ModelParams(mode=TrainMode.INT, networks=networks, image_side=ordered[0].params.image_side)


TRAINERS = {
    TrainMode.DET: train_det,
    TrainMode.INT: train_int,
    TrainMode.PAT_T: pat_t_train,
    TrainMode.PATCH_ONLY: train_patch_only,
}
