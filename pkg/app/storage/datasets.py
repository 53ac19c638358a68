"""
".dsb" dataset files and their key=value manifest sidecar.

    magic b"PATD", u32 version, n, S, q
    per example: q label bytes, then S*S pixels as f32 little-endian
"""
import json
import logging
import struct
from pathlib import Path
from typing import Dict, Union

import numpy as np

from app.core.config import load_key_values
from app.core.errors import FormatError
from app.models.scene import Dataset
from app.schemas import CooccurrenceSpec

logger = logging.getLogger(__name__)

MAGIC = b"PATD"
VERSION = 1
_HEADER = struct.Struct("<4I")


def _record_dtype(side: int, num_classes: int) -> np.dtype:
    return np.dtype([("labels", "u1", (num_classes,)), ("pixels", "<f4", (side * side,))])


def manifest_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".manifest")


def dataset_to_bytes(dataset: Dataset) -> bytes:
    n, side, q = len(dataset), dataset.image_side, dataset.num_classes
    records = np.empty(n, dtype=_record_dtype(side, q))
    records["labels"] = dataset.labels
    records["pixels"] = dataset.images.reshape(n, side * side)
    return MAGIC + _HEADER.pack(VERSION, n, side, q) + records.tobytes()


def dataset_from_bytes(data: bytes, split: str = "", seed: int = 0) -> Dataset:
    if data[:4] != MAGIC:
        raise FormatError("not a dataset file (bad magic)")
    if len(data) < 4 + _HEADER.size:
        raise FormatError("dataset header truncated")
    version, n, side, q = _HEADER.unpack_from(data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    dtype = _record_dtype(side, q)
    offset = 4 + _HEADER.size
    if len(data) - offset != n * dtype.itemsize:
        raise FormatError(f"expected {n} records of {dtype.itemsize} bytes")
    records = np.frombuffer(data, dtype=dtype, count=n, offset=offset)
    return Dataset(
        images=records["pixels"].astype(np.float32).reshape(n, side, side),
        labels=records["labels"].astype(np.uint8),
        split=split,
        seed=seed,
    )


def manifest_lines(dataset: Dataset) -> Dict[str, str]:
    entries = {
        "split": dataset.split,
        "seed": str(dataset.seed),
        "n": str(len(dataset)),
        "image_side": str(dataset.image_side),
        "num_classes": str(dataset.num_classes),
        "noise_sd": repr(float(dataset.noise_sd)),
    }
    if dataset.spec is not None:
        entries["spec"] = json.dumps(dataset.spec.model_dump(mode="json"), sort_keys=True)
    return entries


def save_dataset(dataset: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_to_bytes(dataset))
    manifest = "".join(f"{k} = {v}\n" for k, v in manifest_lines(dataset).items())
    manifest_path(path).write_text(manifest, encoding="utf-8")
    logger.info("wrote %d %s examples to %s", len(dataset), dataset.split or "dataset", path)
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    """Read a dataset; split, seed, noise and spec come from the manifest when present."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read dataset {path}: {exc}") from exc

    meta: Dict[str, str] = {}
    if manifest_path(path).exists():
        meta = load_key_values(manifest_path(path))
    dataset = dataset_from_bytes(data, split=meta.get("split", path.stem), seed=int(meta.get("seed", 0)))
    dataset.noise_sd = float(meta.get("noise_sd", 0.0))
    if "spec" in meta:
        dataset.spec = CooccurrenceSpec.model_validate_json(meta["spec"])
    return dataset
