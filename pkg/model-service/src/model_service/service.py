"""HTTP surface: POST /score, POST /embed, GET /healthz.

The request and response shapes are the wire contract the recommender
pipeline's remote scorer and remote embedding clients expect, so this
module defines exactly those three routes and nothing else.  Malformed
bodies answer 400, batches over the configured limit answer 413.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .classifier import SensitivityModel
from .embedding import DEFAULT_MODEL_ID, resolve_encoder
from .errors import ConfigError

DEFAULT_BIND = "127.0.0.1:8500"
DEFAULT_MAX_BATCH = 256


@dataclass(frozen=True)
class ServiceConfig:
    classifier_checkpoint: Path
    embedding_model_id: str = DEFAULT_MODEL_ID
    bind_address: str = DEFAULT_BIND
    max_batch: int = DEFAULT_MAX_BATCH

    def __post_init__(self):
        if self.max_batch < 1:
            raise ConfigError(f"max_batch must be positive, got {self.max_batch}")
        self.host_port()

    def host_port(self) -> tuple[str, int]:
        host, _, port = self.bind_address.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"bind_address must be host:port, got {self.bind_address!r}")
        return host, int(port)


class TextsRequest(BaseModel):
    texts: list[str]


def create_app(config: ServiceConfig) -> FastAPI:
    """Load the checkpoint and encoder, then build the application."""
    model = SensitivityModel.load(Path(config.classifier_checkpoint))
    encoder = resolve_encoder(config.embedding_model_id)
    app = FastAPI(title="model-service", docs_url=None, redoc_url=None, openapi_url=None)

    @app.exception_handler(RequestValidationError)
    async def bad_request(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": "malformed request body"})

    def check_batch(texts: list[str]) -> None:
        if len(texts) > config.max_batch:
            raise HTTPException(
                status_code=413,
                detail=f"batch of {len(texts)} exceeds the limit of {config.max_batch}",
            )

    @app.post("/score")
    def score(request: TextsRequest) -> dict:
        check_batch(request.texts)
        return {"probabilities": model.probabilities(request.texts)}

    @app.post("/embed")
    def embed(request: TextsRequest) -> dict:
        check_batch(request.texts)
        return {"embeddings": encoder.embed(request.texts).tolist()}

    @app.get("/healthz")
    def healthz() -> dict:
        return {"status": "ok"}

    return app
