"""Request and response shapes for the HTTP surface."""

from __future__ import annotations

from typing import Optional, Union

from pydantic import BaseModel, ConfigDict, Field

from ..runner import RunConfig

MaskSpec = Union[str, dict, None]


class RunRequest(BaseModel):
    """Mirror of RunConfig; unknown keys are rejected, defaults match."""

    model_config = ConfigDict(extra="forbid")

    seq: int = 16
    dim: int = 4
    heads: int = 2
    batch: int = 1
    gpus: int = 4
    seed: int = 0
    precision: str = "double"
    mode: str = "burst"
    mask: MaskSpec = None
    tile_rows: Optional[int] = None
    tile_cols: Optional[int] = None
    overlap: str = "none"
    executor: str = "lockstep"
    pad: bool = False
    bandwidth: float = 1.0e9
    flops_rate: float = 1.0e12
    sram_bytes: int = 4096
    tol_forward: Optional[float] = None
    tol_backward: Optional[float] = None

    def to_config(self) -> RunConfig:
        return RunConfig(**self.model_dump())


class SweepRequest(RunRequest):
    gs: list[int] = Field(default_factory=lambda: [2, 4, 8])
    ns: list[int] = Field(default_factory=lambda: [8, 16, 32])
    cap: int = 64

    def to_config(self) -> RunConfig:
        data = self.model_dump()
        for extra in ("gs", "ns", "cap"):
            data.pop(extra)
        return RunConfig(**data)


class VerifyResponse(BaseModel):
    schema_version: int
    config: dict
    errors: dict[str, float]
    tolerances: dict[str, float]
    ledger: dict
    peak_activation_per_device: list[int]
    makespan: Optional[dict] = None
    verdict: str


class SweepResponse(BaseModel):
    schema_version: int
    rows: list[dict]


class CostResponse(BaseModel):
    schema_version: int
    spec: dict
    methods: dict
    units: str
    warnings: Optional[list[str]] = None


class TraceResponse(BaseModel):
    schema_version: int
    config: dict
    events_ndjson: str
    ledger: dict
    makespan: dict


class HealthResponse(BaseModel):
    status: str
    version: str
