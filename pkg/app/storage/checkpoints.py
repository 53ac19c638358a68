"""
"PATC" checkpoint files.

Layout (little-endian):
    magic  b"PATC"
    u32    version, S, H, q, mode code, networks, head mask, flags
    f64    parameter arrays in declared order (ModelParams.arrays())
    f64    EMA arrays in the same order when flags & 1
    f64    Adam first then second moments in the same order when flags & 2
    u32    length of the JSON trailer, then UTF-8 JSON
           {config, mode, epoch, class_index, metrics, optimizer}

The optimizer entry holds the Adam step count and hyperparameters.
"""
import json
import logging
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from app.core.errors import FormatError
from app.models.checkpoint import Checkpoint
from app.models.params import HEAD_ORDER, MODE_CODES, AdamState, Linear, ModelParams, Network, TrainMode
from app.schemas import TrainConfig

logger = logging.getLogger(__name__)

MAGIC = b"PATC"
VERSION = 2
FLAG_EMA = 1
FLAG_OPTIMIZER = 2
_HEADER = struct.Struct("<8I")
_LENGTH = struct.Struct("<I")
_F64 = np.dtype("<f8")

_MODES_BY_CODE = {code: mode for mode, code in MODE_CODES.items()}


def _head_mask(params: ModelParams) -> int:
    heads = params.networks[0].heads
    return sum(1 << i for i, name in enumerate(HEAD_ORDER) if name in heads)


def _layout(side: int, hidden: int, num_classes: int, mode: TrainMode,
            num_networks: int, mask: int) -> List[List[Tuple[str, Tuple[int, ...]]]]:
    """Per network: (slot, shape) for every array in declared order."""
    out = 1 if mode == TrainMode.INT else num_classes
    slots = [("backbone.weight", (hidden, side * side)), ("backbone.bias", (hidden,))]
    for i, name in enumerate(HEAD_ORDER):
        if mask & (1 << i):
            slots += [(f"{name}.weight", (out, hidden)), (f"{name}.bias", (out,))]
    return [slots for _ in range(num_networks)]


def _pack_arrays(params: ModelParams) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for a in params.arrays())


def checkpoint_to_bytes(checkpoint: Checkpoint) -> bytes:
    params = checkpoint.params
    optimizer = checkpoint.optimizer
    flags = 0
    if checkpoint.ema_params is not None:
        flags |= FLAG_EMA
    if optimizer is not None:
        flags |= FLAG_OPTIMIZER
    header = _HEADER.pack(
        VERSION,
        params.image_side,
        params.hidden_size,
        params.num_classes,
        MODE_CODES[checkpoint.mode],
        len(params.networks),
        _head_mask(params),
        flags,
    )
    meta = {
        "config": checkpoint.config.model_dump(mode="json", by_alias=True),
        "mode": checkpoint.mode.value,
        "epoch": checkpoint.epoch,
        "class_index": checkpoint.class_index,
        "metrics": checkpoint.metrics,
        "optimizer": None,
    }
    if optimizer is not None:
        meta["optimizer"] = {
            "step": optimizer.step,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
    trailer = json.dumps(meta, sort_keys=True).encode("utf-8")

    parts = [MAGIC, header, _pack_arrays(params)]
    if flags & FLAG_EMA:
        parts.append(_pack_arrays(checkpoint.ema_params))
    if flags & FLAG_OPTIMIZER:
        parts += [_pack_arrays(optimizer.first_moment), _pack_arrays(optimizer.second_moment)]
    parts += [_LENGTH.pack(len(trailer)), trailer]
    return b"".join(parts)


def _read_params(data: bytes, offset: int, layout, mode: TrainMode, side: int) -> Tuple[ModelParams, int]:
    networks = []
    for slots in layout:
        arrays = {}
        for slot, shape in slots:
            count = int(np.prod(shape))
            if offset + count * _F64.itemsize > len(data):
                raise FormatError("checkpoint truncated inside the parameter arrays")
            arrays[slot] = np.frombuffer(data, dtype=_F64, count=count, offset=offset).reshape(shape).copy()
            offset += count * _F64.itemsize
        heads = {
            name: Linear(arrays[f"{name}.weight"], arrays[f"{name}.bias"])
            for name in HEAD_ORDER if f"{name}.weight" in arrays
        }
        networks.append(Network(Linear(arrays["backbone.weight"], arrays["backbone.bias"]), heads))
    return ModelParams(mode=mode, networks=networks, image_side=side), offset


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(data) < 4 + _HEADER.size:
        raise FormatError("checkpoint header truncated")
    version, side, hidden, q, code, num_networks, mask, flags = _HEADER.unpack_from(data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if code not in _MODES_BY_CODE:
        raise FormatError(f"unknown training mode code {code}")
    mode = _MODES_BY_CODE[code]

    layout = _layout(side, hidden, q, mode, num_networks, mask)
    offset = 4 + _HEADER.size
    params, offset = _read_params(data, offset, layout, mode, side)
    ema = None
    if flags & FLAG_EMA:
        ema, offset = _read_params(data, offset, layout, mode, side)
    moments = None
    if flags & FLAG_OPTIMIZER:
        first, offset = _read_params(data, offset, layout, mode, side)
        second, offset = _read_params(data, offset, layout, mode, side)
        moments = (first, second)

    if offset + _LENGTH.size > len(data):
        raise FormatError("checkpoint trailer missing")
    (length,) = _LENGTH.unpack_from(data, offset)
    offset += _LENGTH.size
    try:
        meta = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint trailer: {exc}") from exc

    if meta.get("mode") != mode.value:
        raise FormatError("checkpoint header and trailer disagree on the training mode")
    optimizer = None
    if moments is not None:
        hyper = meta.get("optimizer") or {}
        if "step" not in hyper:
            raise FormatError("checkpoint carries optimizer moments without a step count")
        optimizer = AdamState(
            first_moment=moments[0],
            second_moment=moments[1],
            step=int(hyper["step"]),
            beta1=float(hyper.get("beta1", 0.9)),
            beta2=float(hyper.get("beta2", 0.999)),
            eps=float(hyper.get("eps", 1e-8)),
        )
    return Checkpoint(
        params=params,
        config=TrainConfig.model_validate(meta["config"]),
        mode=mode,
        epoch=int(meta["epoch"]),
        metrics=meta.get("metrics", {}),
        ema_params=ema,
        class_index=meta.get("class_index"),
        optimizer=optimizer,
    )


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_to_bytes(checkpoint))
    logger.info("wrote %s checkpoint (epoch %d) to %s", checkpoint.mode.value, checkpoint.epoch, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data)


def int_checkpoint_name(class_index: int) -> str:
    return f"int_class_{class_index:02d}.patc"
