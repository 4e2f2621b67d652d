import json
import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from app.models import BranchBatch, CandidateSpace, PhantomSpec, TrialBatch
from app.trajectory import Trajectory

load_dotenv()

# Spring-back measured on the heat-set guide: 71.1 mm achieved for a 69.5 mm target.
DEFAULT_SPRINGBACK_RATIO = 1.0 - 0.014065 / 0.014388

ModelT = TypeVar("ModelT", bound=BaseModel)


class ConfigError(RuntimeError):
    pass


@dataclass(frozen=True)
class Settings:
    app_name: str
    environment: str
    results_dir: str
    solver_tol: float
    solver_max_iter: int
    threads: int
    robot_max_curvature_per_mm: float
    springback_ratio: float
    log_level: str


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"Environment variable {name} must be a number, got {raw!r}") from exc


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name, "").strip()
    if not raw:
        return default
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"Environment variable {name} must be an integer, got {raw!r}") from exc


@lru_cache
def get_settings() -> Settings:
    settings = Settings(
        app_name=os.getenv("APP_NAME", "steerdrill-api").strip() or "steerdrill-api",
        environment=os.getenv("ENVIRONMENT", "development").strip() or "development",
        results_dir=os.getenv("STEERDRILL_RESULTS_DIR", "results").strip() or "results",
        solver_tol=_float_env("STEERDRILL_SOLVER_TOL", 1e-8),
        solver_max_iter=_int_env("STEERDRILL_MAX_ITER", 0),
        threads=_int_env("STEERDRILL_THREADS", 1),
        robot_max_curvature_per_mm=_float_env("STEERDRILL_ROBOT_MAX_CURVATURE", 0.03),
        springback_ratio=_float_env("STEERDRILL_SPRINGBACK_RATIO", DEFAULT_SPRINGBACK_RATIO),
        log_level=os.getenv("LOG_LEVEL", "INFO").strip().upper() or "INFO",
    )
    if not 0 < settings.solver_tol <= 1e-4:
        raise ConfigError("STEERDRILL_SOLVER_TOL must be in (0, 1e-4]")
    if settings.threads < 1:
        raise ConfigError("STEERDRILL_THREADS must be >= 1")
    if not 0 <= settings.springback_ratio < 1:
        raise ConfigError("STEERDRILL_SPRINGBACK_RATIO must be in [0, 1)")
    if not isinstance(logging.getLevelName(settings.log_level), int):
        raise ConfigError(f"Unknown LOG_LEVEL: {settings.log_level}")
    return settings


def load_json_model(path: str | Path, model: type[ModelT]) -> ModelT:
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Missing required config file: {config_path}")

    try:
        raw_data = json.loads(config_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"Invalid JSON in {config_path}: line {exc.lineno}, column {exc.colno}"
        ) from exc

    try:
        return model.model_validate(raw_data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid {model.__name__} in {config_path}: {exc}") from exc


def load_phantom_spec(path: str | Path = "config/phantom.json") -> PhantomSpec:
    return load_json_model(path, PhantomSpec)


def load_candidate_space(path: str | Path = "config/candidates.json") -> CandidateSpace:
    return load_json_model(path, CandidateSpace)


def load_trial_batch(path: str | Path = "config/trial_batch.json") -> TrialBatch:
    return load_json_model(path, TrialBatch)


def load_branch_batch(path: str | Path = "config/branch_batch.json") -> BranchBatch:
    return load_json_model(path, BranchBatch)


def load_trajectory(path: str | Path) -> Trajectory:
    return load_json_model(path, Trajectory)


def validate_runtime_config() -> None:
    get_settings()
