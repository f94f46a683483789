"""
FastAPI Application Entry Point
Experiment ledger browsing and single-volume inference
"""
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware

from vesseladapt import __version__
from vesseladapt.config import get_settings
from vesseladapt.database import init_db
from vesseladapt.exceptions import VesselAdaptError
from vesseladapt.logging_config import setup_logging
from vesseladapt.middleware import (
    general_exception_handler,
    validation_exception_handler,
    vesseladapt_exception_handler,
)
from vesseladapt.routers import inference, runs

logger = setup_logging()
settings = get_settings()

API_PREFIX = "/api/v1"


@asynccontextmanager
async def lifespan(_: FastAPI):
    logger.info("Starting %s v%s (%s)", settings.app_name, settings.app_version, settings.environment)
    init_db()
    yield
    logger.info("Stopping %s", settings.app_name)


def create_app() -> FastAPI:
    """Assemble the service: ledger and inference routers plus the shared error bodies"""
    application = FastAPI(
        title=settings.app_name,
        version=settings.app_version,
        description="Run ledger of the domain-adaptation experiments and vessel segmentation of single volumes.",
        lifespan=lifespan,
    )
    # Configure CORS
    application.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    application.add_exception_handler(VesselAdaptError, vesseladapt_exception_handler)
    application.add_exception_handler(RequestValidationError, validation_exception_handler)
    application.add_exception_handler(Exception, general_exception_handler)

    for router in (runs.router, inference.router):
        application.include_router(router, prefix=API_PREFIX)
    return application


app = create_app()


@app.get("/", tags=["Health"])
async def root():
    """Service banner"""
    return {
        "message": settings.app_name,
        "version": settings.app_version,
        "package": __version__,
        "status": "operational",
        "docs": app.docs_url,
    }


@app.get("/health", tags=["Health"])
async def health_check():
    return {"status": "healthy", "environment": settings.environment}
