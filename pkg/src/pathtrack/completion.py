"""Post-retrieval completion: path documents plus a second dense pass.

Path tracking yields documents through the triples on valid paths. Those
alone can miss evidence that never surfaced as a clean triple, so the
question is augmented with the final reasoning chain and expansion
requirement and run through a straight dense retrieval over the document
embeddings. Both document sets merge, path evidence first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .embedding import EmbeddingIndex, top_k
from .indexer import GraphIndex, KnowledgeGraph
from .tracker import TrackResult

logger = logging.getLogger(__name__)

PROVENANCE_PATH = "path"
PROVENANCE_SECOND_STAGE = "second_stage"

MERGE_ORDERS = ("path_first", "score_interleave")


@dataclass
class RankedDoc:
    doc_id: str
    provenance: str
    score: float

    def to_dict(self) -> dict:
        return {"doc_id": self.doc_id, "provenance": self.provenance, "score": self.score}


@dataclass
class RetrievalResult:
    """Final ranked document list for one question."""

    question: str
    augmented_query: str
    ranked_docs: list[RankedDoc] = field(default_factory=list)
    trace_ref: str = ""

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.ranked_docs]

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "q_prime": self.augmented_query,
            "ranked": [d.to_dict() for d in self.ranked_docs],
            "trace_ref": self.trace_ref,
        }


def path_doc_counts(result: TrackResult, kg: KnowledgeGraph) -> dict[str, int]:
    """How many valid-path segments each document backs."""
    counts: dict[str, int] = {}
    for path in result.final_valid_paths:
        for seg in path.segments:
            doc_id = kg.triples[seg.triple_index].source_doc_id
            counts[doc_id] = counts.get(doc_id, 0) + 1
    return counts


def collect_path_docs(result: TrackResult, kg: KnowledgeGraph) -> list[str]:
    """Documents backing the final valid paths.

    Ranked by how many path segments a document sourced, ties resolved by
    first appearance across the valid paths in order.
    """
    counts: dict[str, int] = {}
    first_seen: dict[str, int] = {}
    position = 0
    for path in result.final_valid_paths:
        for seg in path.segments:
            doc_id = kg.triples[seg.triple_index].source_doc_id
            counts[doc_id] = counts.get(doc_id, 0) + 1
            first_seen.setdefault(doc_id, position)
            position += 1
    return sorted(counts, key=lambda d: (-counts[d], first_seen[d]))


def build_second_query(question: str, last_chain: str, last_goal: str) -> str:
    """Augmented query: question, final chain, final goal, empties skipped."""
    parts = [question.strip()]
    for extra in (last_chain.strip(), last_goal.strip()):
        if extra:
            parts.append(extra)
    return "\n".join(parts)


def second_stage_retrieve(
    augmented_query: str, doc_index: EmbeddingIndex, embedder, k: int
) -> list[tuple[str, float]]:
    """Dense retrieval of the augmented query over document embeddings."""
    if k < 1:
        raise ValueError(f"second stage k must be >= 1, got {k}")
    vector = embedder.embed([augmented_query])[0]
    return top_k(vector, doc_index, min(k, len(doc_index)))


def merge(
    path_docs: list,
    second_docs: list[tuple[str, float]],
    limit: int,
    question: str = "",
    augmented_query: str = "",
    merge_order: str = "path_first",
    trace_ref: str = "",
) -> RetrievalResult:
    """Union of both document sets, deduplicated and truncated to ``limit``.

    ``path_docs`` entries are doc ids or ``(doc_id, score)`` pairs. A
    document found by both routes keeps its path provenance. The default
    order lists path documents first; ``score_interleave`` sorts the union
    by score instead.
    """
    if limit < 1:
        raise ValueError(f"merge limit must be >= 1, got {limit}")
    if merge_order not in MERGE_ORDERS:
        raise ValueError(f"unknown merge order '{merge_order}'")
    ranked: list[RankedDoc] = []
    seen: set[str] = set()
    for entry in path_docs:
        doc_id, score = entry if isinstance(entry, tuple) else (entry, 0.0)
        if doc_id not in seen:
            seen.add(doc_id)
            ranked.append(RankedDoc(doc_id, PROVENANCE_PATH, float(score)))
    for doc_id, score in second_docs:
        if doc_id not in seen:
            seen.add(doc_id)
            ranked.append(RankedDoc(doc_id, PROVENANCE_SECOND_STAGE, float(score)))
    if merge_order == "score_interleave":
        ranked.sort(key=lambda d: (-d.score, d.provenance != PROVENANCE_PATH, d.doc_id))
    return RetrievalResult(
        question=question,
        augmented_query=augmented_query,
        ranked_docs=ranked[:limit],
        trace_ref=trace_ref,
    )


def complete_retrieval(
    result: TrackResult,
    index: GraphIndex,
    embedder,
    question: str,
    limit: int = 10,
    second_stage_k: int = 10,
    merge_order: str = "path_first",
    use_completion: bool = True,
    trace_ref: str = "",
) -> RetrievalResult:
    """Full completion stage for one tracked question."""
    counts = path_doc_counts(result, index.kg)
    ordered = collect_path_docs(result, index.kg)
    path_docs = [(doc_id, float(counts[doc_id])) for doc_id in ordered]
    if not use_completion:
        return merge(
            path_docs,
            [],
            limit,
            question=question,
            augmented_query=question,
            merge_order=merge_order,
            trace_ref=trace_ref,
        )
    augmented = build_second_query(question, result.last_chain, result.last_goal)
    second = (
        second_stage_retrieve(augmented, index.doc_index, embedder, second_stage_k)
        if len(index.doc_index)
        else []
    )
    return merge(
        path_docs,
        second,
        limit,
        question=question,
        augmented_query=augmented,
        merge_order=merge_order,
        trace_ref=trace_ref,
    )
