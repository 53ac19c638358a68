"""
Evaluation: non-interpolated AP / mAP, overall and per-class P/R/F1, and the
conditional TPR / FPR diagnostics for co-occurring class pairs.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.core.errors import ShapeError, UndefinedMetricError

logger = logging.getLogger(__name__)


@dataclass
class PredictionSet:
    """n x q scores (probabilities unless `scores_are_logits`) and binary labels."""

    scores: np.ndarray
    labels: np.ndarray
    threshold: float = 0.5
    scores_are_logits: bool = False

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels).astype(np.int64)
        if self.scores.ndim != 2 or self.scores.shape != self.labels.shape:
            raise ShapeError(
                f"scores {self.scores.shape} and labels {self.labels.shape} must be equal n x q"
            )
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("decision threshold must lie in (0, 1)")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    @property
    def probabilities(self) -> np.ndarray:
        return expit(self.scores) if self.scores_are_logits else self.scores

    def decisions(self, threshold: Optional[float] = None) -> np.ndarray:
        """Predicted positive iff probability >= threshold."""
        return (self.probabilities >= (threshold or self.threshold)).astype(np.int64)


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> float:
    """
    Non-interpolated AP: mean of precision@k over the ranks of the positives.

    Ranking is by descending score; ties keep ascending example index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    relevant = np.asarray(labels).astype(bool)
    if scores.shape != relevant.shape or scores.ndim != 1:
        raise ShapeError("scores and labels must be 1-d and of equal length")
    positives = int(relevant.sum())
    if positives == 0:
        raise UndefinedMetricError("average precision is undefined without positive labels")

    order = np.argsort(-scores, kind="stable")
    ranked = relevant[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(ranked) + 1)
    return float((hits[ranked] / ranks[ranked]).sum() / positives)


def per_class_ap(preds: PredictionSet) -> Dict[int, float]:
    """AP for every class with at least one positive; others are skipped with a warning."""
    result: Dict[int, float] = {}
    for k in range(preds.num_classes):
        if not preds.labels[:, k].any():
            logger.warning("class %d has no positive labels; excluded from mAP", k)
            continue
        result[k] = average_precision(preds.scores[:, k], preds.labels[:, k])
    return result


def mean_average_precision(preds: PredictionSet) -> float:
    aps = per_class_ap(preds)
    if not aps:
        raise UndefinedMetricError("no class has positive labels")
    return float(np.mean(list(aps.values())))


# ============= Precision / recall / F1 =============

@dataclass
class PrF1Report:
    OP: float
    OR: float
    OF1: float
    CP: float
    CR: float
    CF1: float
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    # names of cells whose denominator was zero (counted as 0)
    flags: List[str] = field(default_factory=list)

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in ("OP", "OR", "OF1", "CP", "CR", "CF1")}


def _ratio(num: float, den: float, flag: str, flags: List[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return float(num / den)


def _harmonic(p: float, r: float, flag: str, flags: List[str]) -> float:
    return _ratio(2.0 * p * r, p + r, flag, flags)


def pr_f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> PrF1Report:
    """Overall metrics pool every decision; per-class metrics average class-wise P and R."""
    tp, fp, fn = (np.asarray(a, dtype=np.int64) for a in (tp, fp, fn))
    flags: List[str] = []
    op = _ratio(tp.sum(), tp.sum() + fp.sum(), "OP", flags)
    orec = _ratio(tp.sum(), tp.sum() + fn.sum(), "OR", flags)
    of1 = _harmonic(op, orec, "OF1", flags)

    precisions = [_ratio(tp[k], tp[k] + fp[k], f"P[{k}]", flags) for k in range(len(tp))]
    recalls = [_ratio(tp[k], tp[k] + fn[k], f"R[{k}]", flags) for k in range(len(tp))]
    cp = float(np.mean(precisions)) if len(tp) else 0.0
    cr = float(np.mean(recalls)) if len(tp) else 0.0
    cf1 = _harmonic(cp, cr, "CF1", flags)

    if flags:
        logger.warning("zero denominators counted as 0: %s", ", ".join(flags))
    return PrF1Report(op, orec, of1, cp, cr, cf1, tp, fp, fn, flags)


def pr_f1_suite(preds: PredictionSet) -> PrF1Report:
    predicted = preds.decisions()
    actual = preds.labels
    tp = (predicted & actual).sum(axis=0)
    fp = (predicted & (1 - actual)).sum(axis=0)
    fn = ((1 - predicted) & actual).sum(axis=0)
    return pr_f1_from_counts(tp, fp, fn)


# ============= Conditional rates =============

@dataclass
class ConditionalRates:
    target: int
    given: int
    ctpr: Optional[float]
    cfpr: Optional[float]
    support_tp: int
    support_fp: int


def conditional_rates(
    preds: PredictionSet,
    pair: Tuple[int, int],
    threshold: Optional[float] = None,
) -> ConditionalRates:
    """
    Rates of class a given that class b is present, for pair = (a, b).

    CTPR = #(pred_a & y_a & y_b) / #(y_a & y_b)
    CFPR = #(pred_a & !y_a & y_b) / #(!y_a & y_b)
    A rate with an empty conditioning set is None.
    """
    a, b = pair
    predicted = preds.decisions(threshold)[:, a].astype(bool)
    y_a = preds.labels[:, a].astype(bool)
    y_b = preds.labels[:, b].astype(bool)

    both = y_a & y_b
    only_b = ~y_a & y_b
    support_tp = int(both.sum())
    support_fp = int(only_b.sum())
    ctpr = float((predicted & both).sum() / support_tp) if support_tp else None
    cfpr = float((predicted & only_b).sum() / support_fp) if support_fp else None
    return ConditionalRates(a, b, ctpr, cfpr, support_tp, support_fp)


@dataclass
class PairRow:
    """Ordered pair (a, b): b is the target, conditioned on the co-occurring a."""

    a: int
    b: int
    p_b_given_a: float
    ctpr: Optional[float]
    cfpr: Optional[float]
    support_tp: int
    support_fp: int


@dataclass
class PairConditionReport:
    rows: List[PairRow]

    def __len__(self) -> int:
        return len(self.rows)

    def keys(self) -> List[Tuple[int, int]]:
        return [(r.a, r.b) for r in self.rows]

    def mean(self, rate: str) -> float:
        values = [getattr(r, rate) for r in self.rows if getattr(r, rate) is not None]
        return float(np.mean(values)) if values else float("nan")

    def sorted_by(self, baseline: "PairConditionReport", rate: str = "cfpr") -> "PairConditionReport":
        """Reorder rows by the baseline's value of `rate` (ascending, undefined last)."""
        order = {key: i for i, key in enumerate(baseline.keys())}
        base = {(r.a, r.b): getattr(r, rate) for r in baseline.rows}

        def key(row: PairRow):
            value = base.get((row.a, row.b))
            return (value is None, value if value is not None else 0.0,
                    order.get((row.a, row.b), len(order)))

        return PairConditionReport(sorted(self.rows, key=key))

    def share_improved(self, baseline: "PairConditionReport", rate: str) -> float:
        """Fraction of shared pairs where this report beats the baseline (lower CFPR, higher CTPR)."""
        base = {(r.a, r.b): getattr(r, rate) for r in baseline.rows}
        wins = total = 0
        for row in self.rows:
            mine, theirs = getattr(row, rate), base.get((row.a, row.b))
            if mine is None or theirs is None:
                continue
            total += 1
            wins += mine < theirs if rate == "cfpr" else mine > theirs
        return wins / total if total else float("nan")


def pair_scan(
    preds: PredictionSet,
    co_threshold: float = 0.2,
    threshold: Optional[float] = None,
) -> PairConditionReport:
    """All ordered pairs with empirical P(b | a) > co_threshold, with b's rates given a."""
    labels = preds.labels.astype(bool)
    counts = labels.sum(axis=0)
    joint = labels.T.astype(np.int64) @ labels.astype(np.int64)

    rows: List[PairRow] = []
    for a in range(preds.num_classes):
        if counts[a] == 0:
            continue
        for b in range(preds.num_classes):
            if a == b:
                continue
            p_b_given_a = joint[a, b] / counts[a]
            if p_b_given_a <= co_threshold:
                continue
            rates = conditional_rates(preds, (b, a), threshold)
            rows.append(PairRow(a, b, float(p_b_given_a), rates.ctpr, rates.cfpr,
                                rates.support_tp, rates.support_fp))
    return PairConditionReport(rows)


def pair_rates(
    preds: PredictionSet,
    pairs: Sequence[Tuple[int, int]],
    threshold: Optional[float] = None,
) -> PairConditionReport:
    """Rates for explicitly chosen (a, b) pairs, e.g. the generator's coupled pairs."""
    labels = preds.labels.astype(bool)
    rows = []
    for a, b in pairs:
        n_a = labels[:, a].sum()
        p_b_given_a = float((labels[:, a] & labels[:, b]).sum() / n_a) if n_a else 0.0
        rates = conditional_rates(preds, (b, a), threshold)
        rows.append(PairRow(a, b, p_b_given_a, rates.ctpr, rates.cfpr,
                            rates.support_tp, rates.support_fp))
    return PairConditionReport(rows)


# ============= Step-wise comparison =============

@dataclass
class StepwiseRow:
    class_index: int
    ap_image: float
    ap_patch: float
    ap_tde: float

    @property
    def patch_gain(self) -> float:
        return self.ap_patch - self.ap_image

    @property
    def tde_gain(self) -> float:
        """TDE AP over the better of image-only and patch-only AP."""
        return self.ap_tde - max(self.ap_image, self.ap_patch)


def stepwise_comparison(
    labels: np.ndarray,
    image_scores: np.ndarray,
    patch_scores: np.ndarray,
    tde_scores: np.ndarray,
) -> List[StepwiseRow]:
    """Per-class AP of image logits, patch logits and TDE logits."""
    rows = []
    aps = [per_class_ap(PredictionSet(s, labels)) for s in (image_scores, patch_scores, tde_scores)]
    for k in sorted(aps[0]):
        rows.append(StepwiseRow(k, aps[0][k], aps[1][k], aps[2][k]))
    return rows


def stepwise_pass_rate(rows: Sequence[StepwiseRow], tolerance: float = 0.02) -> float:
    """Share of classes where TDE AP >= max(image AP, patch AP) - tolerance."""
    if not rows:
        return float("nan")
    return sum(r.tde_gain >= -tolerance for r in rows) / len(rows)
