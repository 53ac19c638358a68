"""
Metrics Endpoints

Evaluate a score matrix against binary labels.
"""

from dataclasses import asdict

from fastapi import APIRouter

from app.api.dependencies import bad_request
from app.core.errors import PatLabError, UndefinedMetricError
from app.core.metrics import PredictionSet, pair_scan, per_class_ap, pr_f1_suite
from app.schemas import MetricsRequest, MetricsResponse, PairRow

router = APIRouter(prefix="/metrics", tags=["metrics"])


@router.post("/evaluate", response_model=MetricsResponse)
def evaluate(request: MetricsRequest):
    """mAP over classes with positives, P/R/F1 at the threshold, and co-occurrence pair rates."""
    try:
        preds = PredictionSet(
            request.scores,
            request.labels,
            threshold=request.threshold,
            scores_are_logits=request.scores_are_logits,
        )
        aps = per_class_ap(preds)
        if not aps:
            raise UndefinedMetricError("no class has positive labels")
        suite = pr_f1_suite(preds)
        pairs = pair_scan(preds, request.co_threshold)
    except (PatLabError, ValueError) as exc:
        raise bad_request(exc) from exc

    return MetricsResponse(
        mAP=sum(aps.values()) / len(aps),
        per_class_ap=aps,
        pairs=[PairRow(**asdict(row)) for row in pairs.rows],
        **suite.as_dict(),
    )
