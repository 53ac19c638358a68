from fastapi import APIRouter, HTTPException, status
import numpy as np

from app.api.dependencies import bad_request
from app.core.patching import aggregate_patch_logits, patch_weights, tde_fuse
from app.models.bundle import NUM_PATCHES
from app.schemas import FuseRequest, FuseResponse

router = APIRouter(prefix="/patching", tags=["patching"])


@router.post("/fuse", response_model=FuseResponse)
def fuse(request: FuseRequest):
    """Softmax patch weights, aggregated patch logits and fused probabilities for one image."""
    try:
        image_logits = np.asarray(request.image_logits, dtype=np.float64)
        patch_logits = np.asarray(request.patch_logits, dtype=np.float64)
        weight_logits = patch_logits if request.weight_logits is None else np.asarray(request.weight_logits, dtype=np.float64)
    except ValueError as exc:
        raise bad_request(exc) from exc

    q = image_logits.shape[0]
    for name, arr in (("patch_logits", patch_logits), ("weight_logits", weight_logits)):
        if arr.shape != (NUM_PATCHES, q):
            raise HTTPException(
                status_code=status.HTTP_400_BAD_REQUEST,
                detail=f"{name} must be {NUM_PATCHES} x {q}, got {list(arr.shape)}"
            )

    weights = patch_weights(weight_logits, request.tau)
    aggregated = aggregate_patch_logits(patch_logits, weights)
    return FuseResponse(
        weights=weights.tolist(),
        aggregated=aggregated.tolist(),
        tde=tde_fuse(image_logits, aggregated, request.lam).tolist(),
    )
