"""HTTP surface: POST /describe, POST /similarity, GET /healthz.

The service is stateless; the description dictionary lives client-side.
Captions are generated per (prompt, repeat) and are deterministic at
temperature 0.  Similarity scores are raw (unnormalized); callers apply
their own normalization.
"""

from __future__ import annotations

import base64
import binascii
import time

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .backends import Backend, backend_from_env


class DescribeRequest(BaseModel):
    video_id: str
    frame_index: int = Field(ge=0)
    prompts: list[str]
    image_b64: str | None = None
    frame_payload: list[float] | str | None = None
    repeats: int = Field(default=1, ge=1)
    temperature: float = Field(default=0.0, ge=0.0)


class DescribeResponse(BaseModel):
    descriptions: list[str]
    model_id: str
    latency_ms: float


class SimilarityRequest(BaseModel):
    query: str
    candidates: list[str]


class SimilarityResponse(BaseModel):
    scores: list[float]


def _payload_key(req: DescribeRequest) -> str:
    """Canonical string for the frame content; 422 on an undecodable image."""
    if req.image_b64 is not None:
        try:
            raw = base64.b64decode(req.image_b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise HTTPException(status_code=422, detail=f"undecodable image: {exc}") from exc
        if not raw:
            raise HTTPException(status_code=422, detail="undecodable image: empty payload")
        return req.image_b64
    if req.frame_payload is not None:
        if isinstance(req.frame_payload, str):
            return req.frame_payload
        return ",".join(f"{x:.8g}" for x in req.frame_payload)
    return f"{req.video_id}#{req.frame_index}"


def create_app(backend: Backend | None = None) -> FastAPI:
    backend = backend or backend_from_env()
    app = FastAPI(title="captionsvc", version="0.1.0")

    @app.get("/healthz")
    def healthz():
        status = "ok" if backend.loaded() else "loading"
        return {"status": status, "model_id": backend.model_id}

    @app.post("/describe", response_model=DescribeResponse)
    def describe(req: DescribeRequest) -> DescribeResponse:
        if not req.prompts:
            raise HTTPException(status_code=400, detail="prompts must not be empty")
        key = _payload_key(req)
        if not backend.loaded():
            raise HTTPException(status_code=503, detail="model not loaded")
        start = time.perf_counter()
        descriptions = [
            backend.describe(key, prompt, repeat, req.temperature)
            for repeat in range(req.repeats)
            for prompt in req.prompts
        ]
        latency = (time.perf_counter() - start) * 1000.0
        return DescribeResponse(descriptions=descriptions, model_id=backend.model_id, latency_ms=latency)

    @app.post("/similarity", response_model=SimilarityResponse)
    def similarity(req: SimilarityRequest) -> SimilarityResponse:
        if not req.candidates:
            raise HTTPException(status_code=400, detail="candidates must not be empty")
        if not backend.loaded():
            raise HTTPException(status_code=503, detail="model not loaded")
        return SimilarityResponse(scores=backend.similarity(req.query, req.candidates))

    return app


app = create_app()
