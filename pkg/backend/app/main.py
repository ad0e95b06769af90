"""FastAPI application entry point"""
from fastapi import FastAPI
from backend.app import __version__
from backend.app.api.endpoints import router
from backend.app.config import settings
from backend.app.utils.logger import logger

app = FastAPI(
    title="Snow Density API",
    description="Spatially varying snow density models: simulate, fit, WAIC, summaries",
    version=__version__,
)

app.include_router(router, prefix="/api/v1")


@app.on_event("startup")
async def startup_event():
    logger.info("Starting Snow Density API")
    logger.info(f"Output directory: {settings.out_dir}")


@app.get("/")
async def root():
    """Root endpoint"""
    return {
        "message": "Snow Density API",
        "version": __version__,
        "endpoints": {
            "simulate": "/api/v1/simulate",
            "fit": "/api/v1/fit",
            "waic": "/api/v1/waic",
            "summarize": "/api/v1/summarize",
            "semivariogram": "/api/v1/semivariogram",
            "health": "/api/v1/health-check",
        },
    }


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(
        "backend.app.main:app",
        host=settings.api_host,
        port=settings.api_port,
    )
