"""HTTP prediction service wrapping the routing bundle.

One immutable bundle (head, store, mask, descriptions, LLM client) is
shared across concurrent requests; hot reload happens only through the
explicit admin endpoint, which rebuilds the bundle from the config file
the app was started with.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .config import load_config
from .pipeline import Bundle, build_bundle
from .router import route


class PredictRequest(BaseModel):
    query: str = Field(..., min_length=1)


class LatencyModel(BaseModel):
    classifier_ms: float
    llm_ms: float
    total_ms: float


class PredictResponse(BaseModel):
    labels: list[str]
    source: str
    uncertainty: str
    scores: dict[str, float]
    latency_ms: LatencyModel


class HealthResponse(BaseModel):
    status: str
    intents: int


class ReloadResponse(BaseModel):
    status: str
    intents: int


def create_app(bundle: Bundle, config_path: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="intentgate", version="0.1.0")
    app.state.bundle = bundle
    app.state.config_path = str(config_path) if config_path else None

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse(status="ok", intents=len(app.state.bundle.dataset.intents))

    @app.post("/v1/predict", response_model=PredictResponse)
    def predict(request: PredictRequest) -> PredictResponse:
        current: Bundle = app.state.bundle
        prediction = route(request.query, current.router_deps(), current.policy)
        return PredictResponse(
            labels=sorted(prediction.labels),
            source=prediction.source.value,
            uncertainty=prediction.uncertainty,
            scores=prediction.scores,
            latency_ms=LatencyModel(**prediction.latency.as_dict()),
        )

    @app.post("/admin/reload", response_model=ReloadResponse)
    def reload_bundle() -> ReloadResponse:
        if not app.state.config_path:
            raise HTTPException(status_code=409, detail="service was not started from a config file")
        cfg = load_config(app.state.config_path)
        app.state.bundle = build_bundle(cfg)
        return ReloadResponse(status="reloaded", intents=len(app.state.bundle.dataset.intents))

    return app


def create_app_from_config(config_path: str | Path) -> FastAPI:
    cfg = load_config(config_path)
    return create_app(build_bundle(cfg), config_path=config_path)
