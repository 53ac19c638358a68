"""
CSV and key=value outputs of the harness.

Floats are written with 17 significant digits and read back with
round-trip precision, so every table parses back to the same values.
"""
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.core.config import parse_key_values
from app.core.errors import FormatError
from app.core.metrics import PairConditionReport, PairRow, StepwiseRow
from app.models.checkpoint import Checkpoint
from app.schemas import format_value

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
PAIR_COLUMNS = ["a", "b", "p_b_given_a", "ctpr", "cfpr", "support_tp", "support_fp"]

PathLike = Union[str, Path]


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("wrote %d rows to %s", len(frame), path)
    return path


def _read_frame(path: PathLike, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FormatError(f"cannot read table {path}: {exc}") from exc
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {', '.join(missing)}")
    return frame


# ============= Predictions =============

@dataclass
class PredictionTable:
    """Image logits p (n, q); aggregated patch logits and fused probabilities in pat-i mode."""

    image_logits: np.ndarray
    aggregated: Optional[np.ndarray] = None
    tde: Optional[np.ndarray] = None

    @property
    def num_classes(self) -> int:
        return self.image_logits.shape[1]

    @property
    def has_fusion(self) -> bool:
        return self.aggregated is not None and self.tde is not None

    def scores(self) -> np.ndarray:
        """Scores used for evaluation: fused probabilities when present, else image logits."""
        return self.tde if self.has_fusion else self.image_logits

    @property
    def scores_are_logits(self) -> bool:
        return not self.has_fusion


def _columns(prefix: str, q: int) -> List[str]:
    return [f"{prefix}_{k + 1}" for k in range(q)]


def prediction_frame(table: PredictionTable) -> pd.DataFrame:
    n, q = table.image_logits.shape
    blocks = [pd.DataFrame({"image_index": np.arange(n)})]
    blocks.append(pd.DataFrame(table.image_logits, columns=_columns("p", q)))
    if table.has_fusion:
        blocks.append(pd.DataFrame(table.aggregated, columns=_columns("q_agg", q)))
        blocks.append(pd.DataFrame(table.tde, columns=_columns("tde", q)))
    return pd.concat(blocks, axis=1)


def write_predictions(table: PredictionTable, path: PathLike) -> Path:
    return write_frame(prediction_frame(table), path)


def read_predictions(path: PathLike) -> PredictionTable:
    frame = _read_frame(path, ["image_index", "p_1"])
    q = sum(1 for c in frame.columns if c.startswith("p_"))
    expected = _columns("p", q)
    if list(frame.columns[1:q + 1]) != expected:
        raise FormatError(f"{path}: image logit columns must be {expected[0]}..{expected[-1]}")
    frame = frame.sort_values("image_index", kind="stable")
    image_logits = frame[expected].to_numpy(dtype=np.float64)

    fused = [_columns("q_agg", q), _columns("tde", q)]
    present = [all(c in frame.columns for c in cols) for cols in fused]
    if any(present) and not all(present):
        raise FormatError(f"{path}: q_agg and tde columns must appear together")
    if all(present):
        return PredictionTable(
            image_logits,
            frame[fused[0]].to_numpy(dtype=np.float64),
            frame[fused[1]].to_numpy(dtype=np.float64),
        )
    return PredictionTable(image_logits)


# ============= Pair diagnostics =============

def write_pairs(report: PairConditionReport, path: PathLike) -> Path:
    frame = pd.DataFrame([asdict(r) for r in report.rows], columns=PAIR_COLUMNS)
    return write_frame(frame, path)


def read_pairs(path: PathLike) -> PairConditionReport:
    frame = _read_frame(path, PAIR_COLUMNS)

    def optional(value) -> Optional[float]:
        return None if pd.isna(value) else float(value)

    rows = [
        PairRow(int(r.a), int(r.b), float(r.p_b_given_a), optional(r.ctpr), optional(r.cfpr),
                int(r.support_tp), int(r.support_fp))
        for r in frame.itertuples(index=False)
    ]
    return PairConditionReport(rows)


# ============= Reports and logs =============

def write_report(values: Mapping[str, object], path: PathLike) -> Path:
    """Plain-text key=value report in insertion order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {format_value(v)}\n" for k, v in values.items()), encoding="utf-8")
    return path


def read_report(path: PathLike) -> Dict[str, str]:
    return parse_key_values(Path(path).read_text(encoding="utf-8"), source=str(path))


def write_train_log(checkpoints: Iterable[Checkpoint], path: PathLike) -> Path:
    """Per-epoch losses and test mAP; independent training adds a class_index column."""
    rows = []
    for checkpoint in checkpoints:
        records = checkpoint.history.records if checkpoint.history else []
        for record in records:
            row = asdict(record)
            if checkpoint.class_index is not None:
                row = {"class_index": checkpoint.class_index, **row}
            rows.append(row)
    return write_frame(pd.DataFrame(rows), path)


def write_stepwise(rows: Sequence[StepwiseRow], path: PathLike) -> Path:
    frame = pd.DataFrame(
        {
            "class_index": [r.class_index for r in rows],
            "ap_image": [r.ap_image for r in rows],
            "ap_patch": [r.ap_patch for r in rows],
            "ap_tde": [r.ap_tde for r in rows],
            "patch_gain": [r.patch_gain for r in rows],
            "tde_gain": [r.tde_gain for r in rows],
        }
    )
    return write_frame(frame, path)


def write_compare(ap_a: Mapping[int, float], ap_b: Mapping[int, float], path: PathLike) -> Path:
    """Class-by-class AP of two prediction files and the increment b - a."""
    classes = sorted(set(ap_a) & set(ap_b))
    frame = pd.DataFrame(
        {
            "class_index": classes,
            "ap_a": [ap_a[k] for k in classes],
            "ap_b": [ap_b[k] for k in classes],
            "delta": [ap_b[k] - ap_a[k] for k in classes],
        }
    )
    return write_frame(frame, path)
