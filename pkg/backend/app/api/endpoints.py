"""FastAPI endpoint handlers"""
import uuid
from typing import Callable, TypeVar
from fastapi import APIRouter, HTTPException, status
from backend.app import __version__
from backend.app.config import load_run_config, settings
from backend.app.exceptions import (
    ConfigError, DatasetError, DegenerateCoreError, DomainError, SnowDensityError, SplineError,
)
from backend.app.models import (
    HealthCheckResponse, RunRequest, RunResponse, SemivariogramRequest, WaicResponse,
)
from backend.app.utils.logger import logger
from backend.app.workflow.pipeline import AnalysisPipeline

router = APIRouter()

# Errors caused by the request's inputs; everything else is a server-side failure
CLIENT_ERRORS = (ConfigError, DatasetError, DomainError, SplineError, DegenerateCoreError)

T = TypeVar("T")


def _pipeline(request: RunRequest, run_id: str) -> AnalysisPipeline:
    config = load_run_config(request.config_path)
    return AnalysisPipeline(config, out_dir=request.out_dir, seed=request.seed, run_id=run_id)


def _run(step: str, request: RunRequest, action: Callable[[AnalysisPipeline], T]) -> T:
    run_id = str(uuid.uuid4())
    logger.info(f"{step} request received", extra={"run_id": run_id})
    try:
        return action(_pipeline(request, run_id))
    except CLIENT_ERRORS as e:
        logger.warning(f"{step} rejected: {e}", extra={"run_id": run_id})
        raise HTTPException(status_code=status.HTTP_400_BAD_REQUEST, detail=e.to_record())
    except SnowDensityError as e:
        logger.error(f"{step} failed: {e}", extra={"run_id": run_id})
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=e.to_record())


@router.post("/simulate", response_model=RunResponse)
def simulate(request: RunRequest):
    """Generate a synthetic dataset and its truth sidecar"""
    def action(p: AnalysisPipeline) -> RunResponse:
        return RunResponse(run_id=p.run_id, artifacts=p.simulate(), message="Dataset simulated")
    return _run("simulate", request, action)


@router.post("/fit", response_model=RunResponse)
def fit(request: RunRequest):
    """Run the sampler on the configured dataset"""
    def action(p: AnalysisPipeline) -> RunResponse:
        archive = p.fit()
        return RunResponse(run_id=p.run_id, artifacts={"archive": str(p.archive_path)},
                           message=f"Kept {archive.n_draws} draws")
    return _run("fit", request, action)


@router.post("/waic", response_model=WaicResponse)
def waic(request: RunRequest):
    def action(p: AnalysisPipeline) -> WaicResponse:
        report = p.waic()
        return WaicResponse(run_id=p.run_id, waic=report.waic, p_waic=report.p_waic, se=report.se,
                            n_obs=report.n_obs, variance_warning=report.variance_warning)
    return _run("waic", request, action)


@router.post("/summarize", response_model=RunResponse)
def summarize(request: RunRequest):
    def action(p: AnalysisPipeline) -> RunResponse:
        return RunResponse(run_id=p.run_id, artifacts=p.summarize(), message="Posterior summaries written")
    return _run("summarize", request, action)


@router.post("/semivariogram", response_model=RunResponse)
def semivariogram(request: SemivariogramRequest):
    def action(p: AnalysisPipeline) -> RunResponse:
        artifacts = p.semivariogram(request.parameter, request.n_bins)
        return RunResponse(run_id=p.run_id, artifacts=artifacts,
                           message=f"Semivariogram of {request.parameter} fitted")
    return _run("semivariogram", request, action)


@router.get("/health-check", response_model=HealthCheckResponse)
def health_check():
    """Health check endpoint"""
    return HealthCheckResponse(status="healthy", version=__version__, threads=settings.threads)
