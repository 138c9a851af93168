"""Endpoint handlers shared by the HTTP routes and the in-process client.

Each handler takes an engine plus a request model and returns a response
model. The FastAPI routes are thin registrations over these functions, and
the CLI calls them directly when no remote server is configured, so both
transports run exactly the same code.
"""

from __future__ import annotations

from .. import __version__
from ..config import ConfigError
from ..corpus import CorpusError
from ..embedding import EmbeddingError
from ..engine import Engine, EngineError
from ..evaluation import EvalError
from ..generator import GeneratorError
from ..indexer import IndexArchiveError, IndexBuildError
from ..tracker import TrackingError
from . import schemas

# Errors the caller can fix; everything else is a genuine server fault.
CLIENT_ERRORS = (
    CorpusError,
    ConfigError,
    EvalError,
    IndexArchiveError,
    IndexBuildError,
    TrackingError,
    EngineError,
    GeneratorError,
    EmbeddingError,
    ValueError,
)


def handle_health(engine: Engine) -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


def handle_index(engine: Engine, req: schemas.IndexRequest) -> schemas.IndexResponse:
    overrides = {
        k: v
        for k, v in {
            "coref_threshold": req.coref_threshold,
            "coref_k": req.coref_k,
            "max_chunk_tokens": req.max_chunk_tokens,
            "concurrency": req.concurrency,
        }.items()
        if v is not None
    }
    stats = engine.build(req.corpus_path, req.out_path, **overrides)
    return schemas.IndexResponse(**stats)


def handle_retrieve(
    engine: Engine, req: schemas.RetrieveRequest
) -> schemas.RetrieveResponse:
    payload = engine.retrieve(
        req.index_path, req.question, trace_path=req.trace_path, **req.as_dict()
    )
    return schemas.RetrieveResponse(**payload)


def handle_answer(engine: Engine, req: schemas.AnswerRequest) -> schemas.AnswerResponse:
    payload = engine.answer(
        req.index_path, req.question, trace_path=req.trace_path, **req.as_dict()
    )
    return schemas.AnswerResponse(**payload)


def handle_eval(engine: Engine, req: schemas.EvalRequest) -> schemas.EvalResponse:
    overrides = req.as_dict()
    if req.concurrency is not None:
        overrides["concurrency"] = req.concurrency
    report = engine.evaluate(
        req.index_path,
        req.corpus_path,
        mode=req.mode,
        ks=tuple(req.k),
        out_path=req.out_path,
        **overrides,
    )
    return schemas.EvalResponse(report=report)


def handle_inspect(engine: Engine, req: schemas.InspectRequest) -> schemas.InspectResponse:
    return schemas.InspectResponse(trace=engine.inspect(req.trace_path))
