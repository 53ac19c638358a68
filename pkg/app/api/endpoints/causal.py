"""
Causal Model Endpoints

Run the additive-form check over random and premise-satisfying discrete
causal models.
"""

from fastapi import APIRouter, HTTPException, status

from app.core.causal import causal_check, count_failures
from app.core.errors import PatLabError
from app.api.dependencies import bad_request
from app.schemas import CausalCheckRequest, CausalCheckResponse, TdeReportRow

router = APIRouter(prefix="/causal", tags=["causal"])

CHAIN_TOLERANCE = 1e-10


@router.post("/check", response_model=CausalCheckResponse)
def check_chain(request: CausalCheckRequest):
    """
    Report TDE terms, alpha, beta, lambda and residuals per model.

    - **trials**: random models (premise generally violated)
    - **constructed**: models whose masked outcome is solved from the premise
    - **failures**: constructed, non-degenerate models above the 1e-10 chain tolerance
    """
    if request.trials + request.constructed > 20000:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="At most 20000 models per request"
        )
    try:
        rows = causal_check(request.trials, request.constructed, request.seed)
    except PatLabError as exc:
        raise bad_request(exc) from exc

    return CausalCheckResponse(
        rows=[TdeReportRow(kind=kind, index=index, **vars(report)) for kind, index, report in rows],
        failures=count_failures(rows, CHAIN_TOLERANCE),
    )
