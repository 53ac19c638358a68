"""
Inference Endpoints

Plain or patching-based predictions from a stored checkpoint.
"""

from fastapi import APIRouter, Depends

from app.api.dependencies import bad_request, get_settings, load_predictor
from app.core.config import Settings
from app.core.errors import PatLabError
from app.core.patching import pat_i_infer, plain_logits
from app.core.training import evaluation_fusion
from app.schemas import FusionConfig, PredictRequest, PredictResponse, PredictRow, TrainConfig

router = APIRouter(prefix="/inference", tags=["inference"])


@router.post("/predict", response_model=PredictResponse)
def predict(request: PredictRequest, cfg: Settings = Depends(get_settings)):
    """
    Predict a batch of S x S images.

    - **checkpoint**: file name (or InT directory) under CHECKPOINT_DIR
    - **mode**: `plain` returns image logits; `pat-i` adds aggregated patch logits,
      fused probabilities and patch weights
    """
    params, train_mode = load_predictor(request.checkpoint, cfg)
    try:
        if request.mode == "plain":
            logits = plain_logits(params, request.images, tau=request.tau)
            rows = [PredictRow(image_logits=row) for row in logits.tolist()]
        else:
            fusion = FusionConfig(tau=request.tau, lam=request.lam)
            fusion = evaluation_fusion(train_mode, TrainConfig(fusion=fusion))
            bundle = pat_i_infer(params, request.images, fusion)
            rows = [
                PredictRow(image_logits=p, aggregated=q, tde=t, weights=w)
                for p, q, t, w in zip(bundle.image_logits.tolist(), bundle.aggregated.tolist(),
                                      bundle.tde.tolist(), bundle.weights.tolist())
            ]
    except (PatLabError, ValueError) as exc:
        raise bad_request(exc) from exc
    return PredictResponse(mode=request.mode, rows=rows)
