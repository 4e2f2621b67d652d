from fastapi import APIRouter, HTTPException

from app.config import ConfigError, get_settings
from app.errors import PlanningError, SolverError, SteerDrillError
from app.models import PlanRequest, PlanResult
from app.planner import PlanOptions
from app.service import plan_for_request

router = APIRouter()


@router.post("")
def plan(request: PlanRequest) -> PlanResult:
    options = PlanOptions.from_settings(get_settings())
    try:
        return plan_for_request(request, options)
    except PlanningError as exc:
        raise HTTPException(status_code=409, detail={"message": str(exc), "reasons": exc.reasons}) from exc
    except SolverError as exc:
        raise HTTPException(status_code=500, detail=str(exc)) from exc
    except (ConfigError, SteerDrillError, IndexError) as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
