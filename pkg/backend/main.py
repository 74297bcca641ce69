"""
FastAPI backend for the health telemetry data fabric.

Serves the ingest gateway (record and batch submission, CIDE schema
lookup) and the read-only access layer (dataset catalog, series queries).
"""
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, File, Request, UploadFile
from fastapi.concurrency import run_in_threadpool
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import ValidationError

# Add parent directory to path for imports
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import get_server_config, load_fabric_config
from src.access_layer import QueryRequest
from src.errors import ConstraintError, FabricError, ForbiddenError
from src.fabric import DataFabric
from src.ingest_gateway import Record, parse_record
from utils.logger import create_error_handler, setup_logger
from utils.timeutil import format_utc, utc_now

logger = logging.getLogger(__name__)
error_handler = create_error_handler('backend')

API_VERSION = '1.0.0'
INGEST_STATUS = {'accepted': 201, 'duplicate': 200, 'rejected': 422}


def bearer_token(request: Request) -> Optional[str]:
    header = request.headers.get('authorization') or ''
    scheme, _, token = header.partition(' ')
    if scheme.lower() != 'bearer' or not token.strip():
        return None
    return token.strip()


def create_app(fabric: DataFabric, cors_origins: Optional[List[str]] = None) -> FastAPI:
    """
    Build the HTTP application around one fabric.

    Args:
        fabric: Wired data fabric for the local environment
        cors_origins: Origins allowed to call the API from a browser dashboard

    Returns:
        FastAPI application
    """
    app = FastAPI(
        title="Health Telemetry Data Fabric API",
        description="Record ingest gated by CIDE schemas and read-only access to published datasets",
        version=API_VERSION,
        docs_url="/docs",
        redoc_url="/redoc"
    )

    # Configure CORS for dashboard frontends
    app.add_middleware(
        CORSMiddleware,
        allow_origins=cors_origins or [],
        allow_credentials=True,
        allow_methods=["GET", "POST"],
        allow_headers=["*"],
    )

    @app.exception_handler(FabricError)
    async def fabric_error_handler(request: Request, exc: FabricError):
        body = error_handler.handle_fabric_error(exc, f"{request.method} {request.url.path}")
        return JSONResponse(status_code=body['status'], content=body)

    def require_ingest_scope(token: Optional[str], record: Record) -> None:
        access = fabric.access.authorize(token)
        if not access.covers(fabric.environment, record.study_id):
            raise ForbiddenError('UNAUTHORIZED', f"token does not cover study {record.study_id} "
                                                 f"in environment {fabric.environment}")

    @app.get("/")
    def root():
        """Root endpoint with API information."""
        return {
            "message": "Health Telemetry Data Fabric API",
            "version": API_VERSION,
            "environment": fabric.environment,
            "docs": "/docs",
            "status": "running"
        }

    @app.get("/health")
    def health_check():
        """Health check endpoint."""
        return {
            "status": "healthy",
            "timestamp": format_utc(utc_now()),
            "environment": fabric.environment,
            "key_material_loaded": fabric.access.key is not None
        }

    @app.post("/api/v1/records")
    async def submit_record(request: Request):
        """Submit one record; 201 accepted, 200 duplicate, 422 rejected."""
        token = bearer_token(request)
        fabric.access.authorize(token)
        record = parse_record(await request.body())
        require_ingest_scope(token, record)
        outcome = await run_in_threadpool(fabric.gateway.submit_realtime, record)
        return JSONResponse(status_code=INGEST_STATUS[outcome.status], content=outcome.to_dict())

    @app.post("/api/v1/batches")
    async def submit_batch(request: Request, archive: UploadFile = File(...)):
        """Submit a ZIP batch archive (multipart field `archive`)."""
        token = bearer_token(request)
        fabric.access.authorize(token)
        content = await archive.read()
        report = await run_in_threadpool(
            fabric.gateway.submit_batch, content, admit=lambda record: require_ingest_scope(token, record))
        return report.model_dump()

    @app.get("/api/v1/schemas/{task_id}")
    def get_schema(task_id: str):
        """Published CIDE schema governing a task."""
        return fabric.gateway.get_schema(task_id).model_dump(exclude_none=True)

    @app.get("/api/v1/datasets")
    def list_datasets(request: Request):
        """Outbound datasets covered by the bearer token."""
        return {"datasets": fabric.access.list_datasets(bearer_token(request))}

    @app.post("/api/v1/query")
    async def query(request: Request):
        """Time-bucketed aggregate of one dataset field."""
        token = bearer_token(request)
        fabric.access.authorize(token)
        try:
            body: Dict[str, Any] = await request.json()
            query_request = QueryRequest.model_validate(body)
        except ValueError as e:
            if isinstance(e, ValidationError):
                problems = [f"{'.'.join(str(p) for p in item['loc'])}: {item['msg']}" for item in e.errors()]
                raise ConstraintError('CONSTRAINT_VIOLATION', f"malformed query: {'; '.join(problems)}")
            raise ConstraintError('CONSTRAINT_VIOLATION', 'query body must be a JSON object')
        series = await run_in_threadpool(fabric.access.query_series, query_request, token)
        return series.model_dump()

    return app


def main() -> None:
    settings = load_fabric_config()
    setup_logger('', level=settings['log_level'], log_format=settings['log_format'], log_dir=settings['log_dir'])
    server = get_server_config(settings)
    fabric = DataFabric.from_settings(settings)
    uvicorn.run(create_app(fabric, server['cors_origins']), host=server['host'], port=server['port'],
                log_level=server['log_level'].lower())


if __name__ == "__main__":
    main()
