from fastapi import APIRouter, HTTPException

from app.config import get_settings
from app.errors import SteerDrillError
from app.models import DrillRequest, DrillResponse
from app.service import drill_for_request

router = APIRouter()


@router.post("")
def drill(request: DrillRequest) -> DrillResponse:
    try:
        return drill_for_request(request, get_settings().springback_ratio)
    except SteerDrillError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
