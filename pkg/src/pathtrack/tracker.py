"""Dynamic path tracking: seeds, hop-wise expansion, pruning, decision loop.

A path is a chain of graph triples traversed from a seed entity. Each hop
the engine expands the paths the model asked to extend, carries the paths it
marked valid, prunes the union down to the candidates most similar to the
current goal text, and asks the model to re-judge. Hop 0 prunes against the
question itself; later hops prune against the expansion requirement the
model produced on the previous hop.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum

from .embedding import EmbeddingIndex, cosine_sim, top_k
from .generator import BackendError, Generator, TrackerOutput
from .indexer import GraphIndex, IndexBuildError, KnowledgeGraph, normalize_entity

logger = logging.getLogger(__name__)

DEFAULT_MAX_HOPS = 2
MAX_HOP_LIMIT = 3
DEFAULT_PRUNE_K = 30


class TrackingError(RuntimeError):
    """Raised when tracking cannot start or a path is malformed."""


class StopReason(str, Enum):
    ANSWER_FOUND = "answer_found"
    MAX_HOPS = "max_hops"
    NO_CANDIDATES = "no_candidates"
    DEGRADED = "degraded"


@dataclass(frozen=True)
class PathSegment:
    """One traversed triple; ``entered_via`` is the endpoint we came from."""

    triple_index: int
    entered_via: str


@dataclass(frozen=True)
class Path:
    """An ordered chain of segments starting at a seed entity.

    ``rendering`` doubles as the dedup identity: two candidates that read
    identically collapse into one. ``path_id`` is a stable digest of the
    rendering used for tie-breaking and tracing.
    """

    segments: tuple[PathSegment, ...]
    origin_seed: str
    path_id: str
    rendering: str

    @property
    def triple_indices(self) -> tuple[int, ...]:
        return tuple(seg.triple_index for seg in self.segments)


def _render_segments(segments: tuple[PathSegment, ...], kg: KnowledgeGraph) -> str:
    """Text form of a path: ``(head) –relation→ (tail)``.

    A segment traversed from its tail renders with the arrow reversed, e.g.
    ``(android) ←created– (andy rubin)``. Consecutive segments share the
    written node; a hop that crossed to a coreferent alias writes the alias
    after a ``~`` marker.
    """
    first = segments[0]
    current = first.entered_via
    parts = [f"({current})"]
    for seg in segments:
        triple = kg.triples[seg.triple_index]
        if seg.entered_via != current:
            parts.append(f" ~ ({seg.entered_via})")
        if seg.entered_via == triple.head:
            nxt = triple.tail
            parts.append(f" –{triple.relation}→ ({nxt})")
        else:
            nxt = triple.head
            parts.append(f" ←{triple.relation}– ({nxt})")
        current = nxt
    return "".join(parts)


def make_path(
    segments: tuple[PathSegment, ...], origin_seed: str, kg: KnowledgeGraph
) -> Path:
    """Construct a path, validating that each segment enters via an endpoint."""
    if not segments:
        raise TrackingError("a path needs at least one segment")
    for seg in segments:
        if not 0 <= seg.triple_index < len(kg.triples):
            raise TrackingError(f"segment references unknown triple {seg.triple_index}")
        triple = kg.triples[seg.triple_index]
        if seg.entered_via not in (triple.head, triple.tail):
            raise TrackingError(
                f"segment entered via '{seg.entered_via}' which is not an endpoint "
                f"of ({triple.head}, {triple.relation}, {triple.tail})"
            )
    rendering = _render_segments(segments, kg)
    path_id = hashlib.blake2b(rendering.encode("utf-8"), digest_size=8).hexdigest()
    return Path(
        segments=tuple(segments),
        origin_seed=origin_seed,
        path_id=path_id,
        rendering=rendering,
    )


def render_path(path: Path, kg: KnowledgeGraph) -> str:
    return _render_segments(path.segments, kg)


def path_nodes(path: Path, kg: KnowledgeGraph) -> list[str]:
    """Every node the path touches, in traversal order, bridges included."""
    first = path.segments[0]
    current = first.entered_via
    nodes = [current]
    for seg in path.segments:
        triple = kg.triples[seg.triple_index]
        if seg.entered_via != current:
            nodes.append(seg.entered_via)
        nxt = triple.tail if seg.entered_via == triple.head else triple.head
        nodes.append(nxt)
        current = nxt
    return nodes


def path_doc_ids(path: Path, kg: KnowledgeGraph) -> list[str]:
    """Source documents of the path's triples, first appearance order."""
    docs: list[str] = []
    for seg in path.segments:
        doc_id = kg.triples[seg.triple_index].source_doc_id
        if doc_id not in docs:
            docs.append(doc_id)
    return docs


def expandable_nodes(path: Path, kg: KnowledgeGraph) -> set[str]:
    """Free endpoints of the last segment: where a new segment may attach.

    Nodes the path already passed through are excluded, so a candidate that
    curls back onto itself has nowhere left to grow.
    """
    nodes = path_nodes(path, kg)
    return {nodes[-1]} - set(nodes[:-1])


@dataclass
class TrackState:
    """Loop state between hops. Hop 0 starts with just the seed entities."""

    hop: int = 0
    seeds: list[str] = field(default_factory=list)
    valid_paths: list[Path] = field(default_factory=list)
    expand_paths: list[Path] = field(default_factory=list)
    chain: str = ""
    goal: str = ""
    continue_flag: bool = True


@dataclass
class TrackResult:
    final_valid_paths: list[Path]
    last_chain: str
    last_goal: str
    hops_used: int
    stop_reason: StopReason


@dataclass
class HopRecord:
    """Everything one hop saw and decided, for traces and diagnostics."""

    hop: int
    prune_goal: str
    candidate_ids: list[str]
    kept: list[dict]
    rendered_chars: int
    tracker: dict
    valid_after: list[str]

    def to_dict(self) -> dict:
        return {
            "hop": self.hop,
            "prune_goal": self.prune_goal,
            "candidate_ids": self.candidate_ids,
            "kept": self.kept,
            "rendered_chars": self.rendered_chars,
            "tracker": self.tracker,
            "valid_after": self.valid_after,
        }


@dataclass
class TrackTrace:
    question: str
    query_entities: list[str] = field(default_factory=list)
    seeds: list[str] = field(default_factory=list)
    hops: list[HopRecord] = field(default_factory=list)
    stop_reason: str = ""
    hops_used: int = 0
    final_valid: list[dict] = field(default_factory=list)
    last_chain: str = ""
    last_goal: str = ""

    def to_dict(self) -> dict:
        return {
            "question": self.question,
            "query_entities": self.query_entities,
            "seeds": self.seeds,
            "hops": [h.to_dict() for h in self.hops],
            "stop_reason": self.stop_reason,
            "hops_used": self.hops_used,
            "final_valid": self.final_valid,
            "last_chain": self.last_chain,
            "last_goal": self.last_goal,
        }


def select_seed_nodes(
    query_entities: list[str],
    kg: KnowledgeGraph,
    coref: dict[str, list[tuple[str, float]]],
    entity_index: EmbeddingIndex,
    embedder,
) -> list[str]:
    """Map each query entity to its most similar graph entity plus aliases.

    Every query entity contributes exactly one nearest graph entity; that
    entity's coreference set joins the seed pool as well. Order follows the
    query entities, duplicates dropped.
    """
    if not kg.entities:
        raise TrackingError("the knowledge graph has no entities to seed from")
    if not query_entities:
        raise TrackingError("no query entities to seed from")
    texts = []
    for raw in query_entities:
        try:
            texts.append(normalize_entity(raw))
        except IndexBuildError:
            texts.append(raw.strip().lower() or raw)
    vectors = embedder.embed(texts)
    seeds: list[str] = []
    seen: set[str] = set()
    for row in range(len(texts)):
        hits = top_k(vectors[row], entity_index, 1)
        if not hits:
            continue
        name = hits[0][0]
        for candidate in [name] + [other for other, _ in coref.get(name, [])]:
            if candidate not in seen:
                seen.add(candidate)
                seeds.append(candidate)
    return seeds


def expand(
    state: TrackState,
    kg: KnowledgeGraph,
    coref: dict[str, list[tuple[str, float]]],
) -> list[Path]:
    """Candidate paths for the current hop.

    Hop 0 fans out one single-segment path per triple incident to each seed.
    Later hops carry every currently valid path unchanged and extend each
    expansion path by one segment through its expandable nodes and their
    coreferent aliases. A triple never repeats within one path, and
    candidates that render identically collapse to the first occurrence.
    """
    candidates: list[Path] = []
    seen: set[str] = set()

    def add(path: Path) -> None:
        if path.rendering not in seen:
            seen.add(path.rendering)
            candidates.append(path)

    if state.hop == 0:
        for seed in state.seeds:
            for ti in kg.triple_indices_of(seed):
                add(make_path((PathSegment(ti, seed),), seed, kg))
        return candidates

    for path in state.valid_paths:
        add(path)
    for path in state.expand_paths:
        used = set(path.triple_indices)
        for node in sorted(expandable_nodes(path, kg)):
            bridge = [node] + [other for other, _ in coref.get(node, [])]
            for entry in bridge:
                for ti in kg.triple_indices_of(entry):
                    if ti in used:
                        continue
                    add(
                        make_path(
                            path.segments + (PathSegment(ti, entry),),
                            path.origin_seed,
                            kg,
                        )
                    )
    return candidates


def rank_candidates(
    candidates: list[Path], goal_text: str, embedder
) -> list[tuple[Path, float]]:
    """Candidates scored by similarity between goal text and rendering.

    Sorted best first; exact score ties fall back to ascending path id so
    the ranking is deterministic.
    """
    if not candidates:
        return []
    vectors = embedder.embed([goal_text] + [p.rendering for p in candidates])
    goal_vec = vectors[0]
    scored = [
        (path, cosine_sim(goal_vec, vectors[i + 1])) for i, path in enumerate(candidates)
    ]
    scored.sort(key=lambda item: (-item[1], item[0].path_id))
    return scored


def prune(candidates: list[Path], goal_text: str, k: int, embedder) -> list[Path]:
    """Keep the k candidates most similar to the goal text.

    ``k`` of zero or less disables pruning. A candidate list already within
    budget is preserved untouched.
    """
    if k is None or k <= 0 or len(candidates) <= k:
        return list(candidates)
    return [path for path, _ in rank_candidates(candidates, goal_text, embedder)[:k]]


def _merge_valid(ordered: list[Path], marked: list[Path]) -> list[Path]:
    # Keep oldest-first order across hops: survivors keep their slot, newly
    # marked paths append in the order the tracker listed them.
    marked_ids = {p.path_id for p in marked}
    merged = [p for p in ordered if p.path_id in marked_ids]
    known = {p.path_id for p in merged}
    for path in marked:
        if path.path_id not in known:
            known.add(path.path_id)
            merged.append(path)
    return merged


def track(
    question: str,
    index: GraphIndex,
    generator: Generator,
    embedder,
    max_hops: int = DEFAULT_MAX_HOPS,
    prune_k: int = DEFAULT_PRUNE_K,
    use_expansion_goal: bool = True,
) -> tuple[TrackResult, TrackTrace]:
    """Run the full tracking loop for one question.

    Stops when the model reports the answer covered (``answer_found``), the
    hop budget runs out (``max_hops``), expansion dries up or the model marks
    nothing worth keeping (``no_candidates``), or the backend fails outright
    (``degraded``, keeping the last known valid paths).
    """
    if not question.strip():
        raise TrackingError("question must be non-empty")
    if max_hops < 1 or max_hops > MAX_HOP_LIMIT:
        raise TrackingError(f"max_hops must be between 1 and {MAX_HOP_LIMIT}")
    kg = index.kg
    trace = TrackTrace(question=question)
    ordered_valid: list[Path] = []
    state = TrackState()
    stop: StopReason | None = None
    hops_used = 0

    try:
        query_entities = generator.extract_query_entities(question)
        seeds = select_seed_nodes(
            query_entities, kg, index.coref, index.entity_index, embedder
        )
        trace.query_entities = query_entities
        trace.seeds = seeds
        state = TrackState(hop=0, seeds=seeds)

        while state.hop < max_hops:
            candidates = expand(state, kg, index.coref)
            if not candidates:
                stop = StopReason.NO_CANDIDATES
                break
            prune_goal = question
            if state.hop > 0 and use_expansion_goal and state.goal.strip():
                prune_goal = state.goal
            scored = rank_candidates(candidates, prune_goal, embedder)
            kept = scored[:prune_k] if prune_k and prune_k > 0 else scored
            renders = [path.rendering for path, _ in kept]

            output = generator.track_paths(question, renders, state.chain)

            hops_used = state.hop + 1
            valid = [kept[i][0] for i in output.valid_path_ids]
            expansions = [kept[i][0] for i in output.expand_path_ids]
            ordered_valid = _merge_valid(ordered_valid, valid)
            trace.hops.append(
                HopRecord(
                    hop=state.hop,
                    prune_goal=prune_goal,
                    candidate_ids=[p.path_id for p in candidates],
                    kept=[
                        {"path_id": p.path_id, "render": p.rendering, "score": s}
                        for p, s in kept
                    ],
                    rendered_chars=sum(len(r) for r in renders),
                    tracker={
                        "chain": output.chain,
                        "valid": output.valid_path_ids,
                        "expand": output.expand_path_ids,
                        "requirement": output.expansion_requirement,
                        "continue": output.continue_flag,
                        "degraded": output.degraded,
                    },
                    valid_after=[p.path_id for p in ordered_valid],
                )
            )
            state = TrackState(
                hop=state.hop + 1,
                seeds=state.seeds,
                valid_paths=list(ordered_valid),
                expand_paths=expansions,
                chain=output.chain,
                goal=output.expansion_requirement,
                continue_flag=output.continue_flag,
            )
            if not output.continue_flag:
                stop = StopReason.ANSWER_FOUND
                break
            if not valid and not expansions:
                stop = StopReason.NO_CANDIDATES
                break
        if stop is None:
            stop = StopReason.MAX_HOPS
    except BackendError as exc:
        logger.warning("tracking degraded for %r: %s", question, exc)
        stop = StopReason.DEGRADED

    result = TrackResult(
        final_valid_paths=list(ordered_valid),
        last_chain=state.chain,
        last_goal=state.goal,
        hops_used=hops_used,
        stop_reason=stop,
    )
    trace.stop_reason = stop.value
    trace.hops_used = hops_used
    trace.final_valid = [
        {
            "path_id": p.path_id,
            "render": p.rendering,
            "nodes": path_nodes(p, kg),
            "doc_ids": path_doc_ids(p, kg),
        }
        for p in ordered_valid
    ]
    trace.last_chain = state.chain
    trace.last_goal = state.goal
    return result, trace
