"""FastAPI application exposing the engine over HTTP."""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import EngineConfig
from ..engine import Engine
from . import handlers, schemas

logger = logging.getLogger(__name__)


def create_app(
    config: EngineConfig | None = None, engine: Engine | None = None
) -> FastAPI:
    engine = engine or Engine(config or EngineConfig())
    app = FastAPI(
        title="pathtrack service",
        version=__version__,
        description="Knowledge-graph path tracking retrieval engine",
    )
    app.state.engine = engine

    def guard(fn, *args):
        try:
            return fn(engine, *args)
        except handlers.CLIENT_ERRORS as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc

    @app.get("/health", response_model=schemas.HealthResponse)
    def health() -> schemas.HealthResponse:
        return handlers.handle_health(engine)

    @app.post("/index", response_model=schemas.IndexResponse)
    def index(req: schemas.IndexRequest) -> schemas.IndexResponse:
        return guard(handlers.handle_index, req)

    @app.post("/retrieve", response_model=schemas.RetrieveResponse)
    def retrieve(req: schemas.RetrieveRequest) -> schemas.RetrieveResponse:
        return guard(handlers.handle_retrieve, req)

    @app.post("/answer", response_model=schemas.AnswerResponse)
    def answer(req: schemas.AnswerRequest) -> schemas.AnswerResponse:
        return guard(handlers.handle_answer, req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    def evaluate(req: schemas.EvalRequest) -> schemas.EvalResponse:
        return guard(handlers.handle_eval, req)

    @app.post("/inspect", response_model=schemas.InspectResponse)
    def inspect(req: schemas.InspectRequest) -> schemas.InspectResponse:
        return guard(handlers.handle_inspect, req)

    return app
