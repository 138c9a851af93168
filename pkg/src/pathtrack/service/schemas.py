"""Request and response models for the service endpoints."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class IndexRequest(BaseModel):
    corpus_path: str
    out_path: str
    coref_threshold: Optional[float] = None
    coref_k: Optional[int] = None
    max_chunk_tokens: Optional[int] = None
    concurrency: Optional[int] = None


class IndexResponse(BaseModel):
    out_path: str
    documents: int
    entities: int
    relations: int
    triples: int
    skipped_documents: int
    tokens: dict


class RankedDocModel(BaseModel):
    doc_id: str
    provenance: str
    score: float


class QueryOverrides(BaseModel):
    """Per-request knobs; unset fields fall back to the engine config."""

    max_hops: Optional[int] = None
    prune_k: Optional[int] = None
    limit: Optional[int] = None
    second_stage_k: Optional[int] = None
    merge_order: Optional[str] = None
    use_completion: Optional[bool] = None
    use_expansion_goal: Optional[bool] = None
    qa_docs: Optional[int] = None

    def as_dict(self) -> dict:
        data = self.model_dump(include=set(QueryOverrides.model_fields))
        return {k: v for k, v in data.items() if v is not None}


class RetrieveRequest(QueryOverrides):
    index_path: str
    question: str
    trace_path: Optional[str] = None


class RetrieveResponse(BaseModel):
    question: str
    q_prime: str
    ranked: list[RankedDocModel]
    trace_ref: str
    stop_reason: str
    hops_used: int
    tokens: dict
    trace_path: Optional[str] = None


class AnswerRequest(RetrieveRequest):
    pass


class AnswerResponse(RetrieveResponse):
    answer: str


class EvalRequest(QueryOverrides):
    index_path: str
    corpus_path: str
    mode: Literal["retrieval", "qa"] = "retrieval"
    k: list[int] = Field(default_factory=lambda: [2, 5, 10])
    out_path: Optional[str] = None
    concurrency: Optional[int] = None


class EvalResponse(BaseModel):
    report: dict


class InspectRequest(BaseModel):
    trace_path: str


class InspectResponse(BaseModel):
    trace: dict
