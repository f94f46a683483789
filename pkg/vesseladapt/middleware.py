"""
Exception Handlers
Map pipeline errors, request validation failures and crashes to the JSON error body
"""
import logging
from datetime import datetime

from fastapi import Request, status
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from vesseladapt.exceptions import VesselAdaptError

logger = logging.getLogger(__name__)


def _error_body(error: str, detail, status_code: int) -> dict:
    return {
        "error": error,
        "detail": detail,
        "status_code": status_code,
        "timestamp": datetime.utcnow().isoformat()
    }


async def vesseladapt_exception_handler(request: Request, exc: VesselAdaptError):
    """Handle pipeline errors with their own status code"""
    logger.warning(f"{exc.error}: {exc.detail}")
    return JSONResponse(
        status_code=exc.status_code,
        content=_error_body(exc.error, exc.detail, exc.status_code)
    )


async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """Handle validation errors"""
    logger.error(f"Validation error: {exc.errors()}")
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content=_error_body("Validation Error", jsonable_errors(exc), status.HTTP_422_UNPROCESSABLE_ENTITY)
    )


async def general_exception_handler(request: Request, exc: Exception):
    """Handle general exceptions"""
    logger.exception(f"Unhandled exception: {str(exc)}")
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content=_error_body(
            "Internal Server Error", "An unexpected error occurred", status.HTTP_500_INTERNAL_SERVER_ERROR
        )
    )


def jsonable_errors(exc: RequestValidationError) -> list:
    return [{k: (str(v) if k == "ctx" else v) for k, v in err.items()} for err in exc.errors()]
