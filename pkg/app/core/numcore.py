"""
Dense numeric kernel: single-hidden-layer rectifier backbone, linear heads,
analytic backpropagation, Adam and parameter averaging.

Arrays are float64 throughout. Inputs may be a single flattened image (length
S*S) or a batch (n, S*S); outputs follow the same leading shape.
"""
import logging
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from app.core.errors import ModelError, ShapeError, TrainingError
from app.models.params import (
    MODE_HEADS,
    AdamState,
    Linear,
    ModelParams,
    Network,
    TrainMode,
)

logger = logging.getLogger(__name__)


def _as_batch(inputs: np.ndarray, features: int, what: str) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(inputs, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != features:
        raise ShapeError(f"{what}: expected length {features}, got shape {np.shape(inputs)}")
    return arr, single


def backbone_forward(network: Network, inputs: np.ndarray) -> np.ndarray:
    """Hidden features relu(W1 x + b1)."""
    x, single = _as_batch(inputs, network.backbone.in_features, "backbone input")
    hidden = np.maximum(x @ network.backbone.weight.T + network.backbone.bias, 0.0)
    return hidden[0] if single else hidden


def head_forward(head: Linear, hidden: np.ndarray) -> np.ndarray:
    """Logits W h + b (no activation)."""
    h, single = _as_batch(hidden, head.in_features, "head input")
    logits = h @ head.weight.T + head.bias
    return logits[0] if single else logits


def network_logits(network: Network, inputs: np.ndarray, head: str) -> np.ndarray:
    if head not in network.heads:
        raise ModelError(f"network has no {head!r} head")
    return head_forward(network.heads[head], backbone_forward(network, inputs))


def model_logits(params: ModelParams, inputs: np.ndarray, head: str = "phi") -> np.ndarray:
    """
    Logits of the whole predictor for one head.

    InT predictors concatenate the scalar outputs of their per-class networks.
    """
    if params.mode == TrainMode.INT:
        if head != "phi":
            raise ModelError("independent-training predictors only have image heads")
        outputs = [network_logits(net, inputs, "phi") for net in params.networks]
        return np.concatenate(outputs, axis=-1)
    return network_logits(params.networks[0], inputs, head)


def backward(
    network: Network,
    inputs: np.ndarray,
    hidden: np.ndarray,
    upstream: Mapping[str, np.ndarray],
) -> Network:
    """
    Gradients of a scalar loss w.r.t. every parameter of `network`.

    `upstream[head]` holds dLoss/dlogits of that head for every input row
    (rows a head did not produce carry zeros). Heads absent from `upstream`
    receive zero gradients.
    """
    x, _ = _as_batch(inputs, network.backbone.in_features, "backward input")
    h, _ = _as_batch(hidden, network.backbone.out_features, "backward hidden")
    if h.shape[0] != x.shape[0]:
        raise ShapeError("hidden and input batch sizes differ")

    d_hidden = np.zeros_like(h)
    head_grads: Dict[str, Linear] = {}
    for name, head in network.heads.items():
        g = upstream.get(name)
        if g is None:
            head_grads[name] = Linear(np.zeros_like(head.weight), np.zeros_like(head.bias))
            continue
        g = np.asarray(g, dtype=np.float64).reshape(x.shape[0], head.out_features)
        head_grads[name] = Linear(g.T @ h, g.sum(axis=0))
        d_hidden += g @ head.weight

    d_pre = d_hidden * (h > 0.0)
    backbone_grad = Linear(d_pre.T @ x, d_pre.sum(axis=0))
    return Network(backbone=backbone_grad, heads=head_grads)


def init_params(
    mode: TrainMode,
    image_side: int,
    hidden_size: int,
    num_classes: int,
    rng: np.random.Generator,
    zero_heads: bool = False,
) -> ModelParams:
    """He-initialised backbone(s), small random (or zero) heads, zero biases."""
    in_features = image_side * image_side
    if mode == TrainMode.INT:
        shapes = [1] * num_classes
    else:
        shapes = [num_classes]

    networks = []
    for out in shapes:
        backbone = Linear(
            rng.normal(0.0, np.sqrt(2.0 / in_features), size=(hidden_size, in_features)),
            np.zeros(hidden_size),
        )
        heads = {}
        for name in MODE_HEADS[mode]:
            if zero_heads:
                weight = np.zeros((out, hidden_size))
            else:
                weight = rng.normal(0.0, 1.0 / np.sqrt(hidden_size), size=(out, hidden_size))
            heads[name] = Linear(weight, np.zeros(out))
        networks.append(Network(backbone=backbone, heads=heads))
    return ModelParams(mode=mode, networks=networks, image_side=image_side)


def adam_step(
    params: ModelParams,
    grads: ModelParams,
    state: AdamState,
    lr: float,
) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; returns new params and state."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    step = state.step + 1
    if not all(np.all(np.isfinite(g)) for g in grads.arrays()):
        raise TrainingError("non-finite gradient", step=step)

    b1, b2, eps = state.beta1, state.beta2, state.eps
    first = state.first_moment.map_arrays(lambda m, g: b1 * m + (1.0 - b1) * g, grads)
    second = state.second_moment.map_arrays(lambda v, g: b2 * v + (1.0 - b2) * g * g, grads)
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    updated = params.map_arrays(
        lambda p, m, v: p - lr * (m / c1) / (np.sqrt(v / c2) + eps),
        first,
        second,
    )
    new_state = AdamState(first, second, step, b1, b2, eps)
    return updated, new_state


def ema_update(avg: ModelParams, current: ModelParams, decay: float) -> ModelParams:
    """avg <- decay * avg + (1 - decay) * current."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("EMA decay must lie in [0, 1)")
    return avg.map_arrays(lambda a, c: decay * a + (1.0 - decay) * c, current)


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup over `warmup_steps` optimizer steps (0-based), constant after."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return base_lr
    return base_lr * (step + 1) / warmup_steps


def check_finite(value: float, step: Optional[int], what: str = "loss") -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what}: {value}", step=step)
