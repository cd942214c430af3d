"""HTTP wrapper around the runner.

The CLI talks to this app in process by default; `burstsim serve` exposes the
same routes over a socket. Invalid configurations surface as 422 responses
whose detail names the violated constraint; a failed verification is a normal
200 with verdict "fail" (it is a result, not a transport error).
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..errors import BurstSimError, ConfigError, MaskError, ShapeError
from ..runner import SCHEMA_VERSION, run_cost, run_sweep, run_trace, run_verify
from .schemas import (CostResponse, HealthResponse, RunRequest, SweepRequest,
                      SweepResponse, TraceResponse, VerifyResponse)


def create_app() -> FastAPI:
    app = FastAPI(title="burstsim", version=__version__)

    @app.exception_handler(ConfigError)
    @app.exception_handler(MaskError)
    @app.exception_handler(ShapeError)
    async def _config_error(request: Request, exc: BurstSimError):
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    async def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/verify", response_model=VerifyResponse)
    async def verify(req: RunRequest):
        return run_verify(req.to_config())

    @app.post("/sweep", response_model=SweepResponse)
    async def sweep(req: SweepRequest):
        rows = run_sweep(req.to_config(), req.gs, req.ns, cap=req.cap)
        return SweepResponse(schema_version=SCHEMA_VERSION, rows=rows)

    @app.post("/cost", response_model=CostResponse)
    async def cost(req: RunRequest):
        return run_cost(req.to_config())

    @app.post("/trace", response_model=TraceResponse)
    async def trace(req: RunRequest):
        return run_trace(req.to_config())

    return app
