from collections.abc import AsyncIterator
from contextlib import asynccontextmanager

from fastapi import FastAPI

from app.config import get_settings, validate_runtime_config
from app.routes import drill, plan

settings = get_settings()


@asynccontextmanager
async def lifespan(_: FastAPI) -> AsyncIterator[None]:
    validate_runtime_config()
    yield


app = FastAPI(title=settings.app_name, lifespan=lifespan)

app.include_router(plan.router, prefix="/plan", tags=["plan"])
app.include_router(drill.router, prefix="/drill", tags=["drill"])


@app.get("/health", tags=["health"])
def health() -> dict:
    return {
        "app": {"status": "ok", "environment": settings.environment},
        "solver": {
            "tol": settings.solver_tol,
            "max_iter": settings.solver_max_iter or "auto",
            "threads": settings.threads,
        },
        "robot": {
            "max_curvature_per_mm": settings.robot_max_curvature_per_mm,
            "springback_ratio": settings.springback_ratio,
        },
    }
