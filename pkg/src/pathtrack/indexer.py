"""Static indexing: knowledge graph assembly, coreference table, persistence.

Indexing runs once per corpus. Every document goes through open information
extraction exactly once; the extracted triples are normalized, deduplicated,
and assembled into an entity-adjacency graph. Each entity's canonical form
is embedded, and a per-entity coreference set (nearest neighbours above a
similarity floor) is precomputed so path expansion can bridge aliases.

The whole index persists as a single versioned zip archive with JSON
sections for the graph and coreference table plus one binary block for the
vectors. Serialization is byte-deterministic for identical inputs.
"""

from __future__ import annotations

import io
import json
import logging
import string
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import Corpus, Document
from .embedding import EmbeddingIndex, top_k
from .generator import Generator, GraphExtractionError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_COREF_THRESHOLD = 0.8
DEFAULT_COREF_K = 5

# Fixed timestamp so identical content yields identical archive bytes.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)

_STRIP_CHARS = string.punctuation + string.whitespace


class IndexBuildError(RuntimeError):
    """Raised when index construction cannot proceed."""


class IndexArchiveError(RuntimeError):
    """Raised for unreadable, corrupt, or version-mismatched archives."""


def normalize_entity(name: str) -> str:
    """Canonical entity form: lowercased, de-quoted, whitespace-collapsed.

    Idempotent by construction. Raises :class:`IndexBuildError` when nothing
    remains after stripping.
    """
    cleaned = name.lower()
    while True:
        # Stripping can expose new whitespace and vice versa; run to a fixed
        # point so the result is stable under re-normalization.
        stripped = " ".join(cleaned.split()).strip(_STRIP_CHARS)
        if stripped == cleaned:
            break
        cleaned = stripped
    if not cleaned:
        raise IndexBuildError(f"entity name {name!r} is empty after normalization")
    return cleaned


@dataclass
class Entity:
    canonical_name: str
    surface_forms: set[str] = field(default_factory=set)
    source_doc_ids: set[str] = field(default_factory=set)
    embedding_key: str = ""


@dataclass(frozen=True)
class Triple:
    head: str
    relation: str
    tail: str
    source_doc_id: str


@dataclass
class KnowledgeGraph:
    """Entities, triples, and an undirected incidence map.

    ``adjacency`` maps a canonical entity name to the indices of every triple
    it appears in, as head or tail, in triple order.
    """

    entities: dict[str, Entity] = field(default_factory=dict)
    triples: list[Triple] = field(default_factory=list)
    adjacency: dict[str, list[int]] = field(default_factory=dict)

    def triples_of(self, entity: str) -> list[Triple]:
        """All triples incident to an entity; unknown names yield []."""
        return [self.triples[i] for i in self.adjacency.get(entity, [])]

    def triple_indices_of(self, entity: str) -> list[int]:
        return list(self.adjacency.get(entity, []))

    def relation_names(self) -> set[str]:
        return {t.relation for t in self.triples}

    def stats(self) -> dict:
        return {
            "entities": len(self.entities),
            "relations": len(self.relation_names()),
            "triples": len(self.triples),
        }


def _rebuild_adjacency(kg: KnowledgeGraph) -> None:
    kg.adjacency = {name: [] for name in kg.entities}
    for idx, triple in enumerate(kg.triples):
        kg.adjacency.setdefault(triple.head, []).append(idx)
        if triple.tail != triple.head:
            kg.adjacency.setdefault(triple.tail, []).append(idx)


def build_graph(
    corpus: Corpus,
    generator: Generator,
    concurrency: int = 1,
) -> tuple[KnowledgeGraph, int]:
    """Extract and assemble the knowledge graph for a corpus.

    Extraction calls run on a bounded pool; assembly is a single-threaded
    reduce in corpus order so the result is independent of scheduling.
    Documents whose extraction stays unparseable are skipped with a warning;
    more than half the corpus failing aborts the build. Returns the graph and
    the number of skipped documents.
    """
    if not corpus.documents:
        raise IndexBuildError("cannot build an index from an empty corpus")

    def run(doc: Document):
        try:
            return generator.extract_graph(doc)
        except GraphExtractionError as exc:
            logger.warning("skipping document '%s': %s", doc.doc_id, exc)
            return None

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(run, corpus.documents))
    else:
        results = [run(doc) for doc in corpus.documents]

    skipped = sum(1 for r in results if r is None)
    if skipped * 2 > len(corpus.documents):
        raise IndexBuildError(
            f"graph extraction failed for {skipped} of {len(corpus.documents)} "
            "documents; refusing to build an index from a minority of the corpus"
        )

    kg = KnowledgeGraph()
    seen_triples: set[tuple[str, str, str, str]] = set()
    for doc, extracted in zip(corpus.documents, results):
        if extracted is None:
            continue
        raw_entities, raw_triples = extracted
        for raw in raw_entities:
            try:
                canonical = normalize_entity(raw)
            except IndexBuildError:
                logger.warning("dropping unusable entity %r from '%s'", raw, doc.doc_id)
                continue
            _upsert(kg, canonical, raw, doc.doc_id)
        for head_raw, relation_raw, tail_raw in raw_triples:
            relation = " ".join(relation_raw.split())
            try:
                head = normalize_entity(head_raw)
                tail = normalize_entity(tail_raw)
            except IndexBuildError:
                logger.warning(
                    "dropping triple (%r, %r, %r) from '%s'",
                    head_raw, relation_raw, tail_raw, doc.doc_id,
                )
                continue
            if not relation:
                continue
            key = (head, relation, tail, doc.doc_id)
            if key in seen_triples:
                continue
            seen_triples.add(key)
            _upsert(kg, head, head_raw, doc.doc_id)
            _upsert(kg, tail, tail_raw, doc.doc_id)
            kg.triples.append(Triple(head, relation, tail, doc.doc_id))
    _rebuild_adjacency(kg)
    return kg, skipped


def _upsert(kg: KnowledgeGraph, canonical: str, surface: str, doc_id: str) -> None:
    entity = kg.entities.get(canonical)
    if entity is None:
        entity = Entity(canonical_name=canonical, embedding_key=canonical)
        kg.entities[canonical] = entity
    entity.surface_forms.add(surface.strip())
    entity.source_doc_ids.add(doc_id)


CoreferenceTable = "dict[str, list[tuple[str, float]]]"


def build_coreference(
    kg: KnowledgeGraph,
    entity_index: EmbeddingIndex,
    threshold: float = DEFAULT_COREF_THRESHOLD,
    k_coref: int = DEFAULT_COREF_K,
) -> dict[str, list[tuple[str, float]]]:
    """Per-entity nearest neighbours: top-k first, then similarity floor.

    Each entity maps to at most ``k_coref`` other entities whose canonical
    embeddings score at or above ``threshold``, best first. The entity itself
    never appears in its own set.
    """
    if not (0.0 < threshold <= 1.0):
        raise IndexBuildError(f"coref threshold must be in (0, 1], got {threshold}")
    if k_coref < 0:
        raise IndexBuildError(f"coref size must be >= 0, got {k_coref}")
    table: dict[str, list[tuple[str, float]]] = {}
    for name in kg.entities:
        if k_coref == 0 or len(entity_index) <= 1 or name not in entity_index:
            table[name] = []
            continue
        hits = top_k(entity_index.vector(name), entity_index, k_coref + 1)
        others = [(key, score) for key, score in hits if key != name][:k_coref]
        table[name] = [(key, score) for key, score in others if score >= threshold]
    return table


@dataclass
class GraphIndex:
    """Everything retrieval needs, built once and persisted as one archive."""

    kg: KnowledgeGraph
    coref: dict[str, list[tuple[str, float]]]
    entity_index: EmbeddingIndex
    doc_index: EmbeddingIndex
    documents: dict[str, Document]
    meta: dict = field(default_factory=dict)

    def stats(self) -> dict:
        out = self.kg.stats()
        out["documents"] = len(self.documents)
        out["skipped_documents"] = self.meta.get("skipped_documents", 0)
        return out


def doc_embedding_text(doc: Document) -> str:
    """Documents embed as title plus text so titles stay searchable."""
    return f"{doc.title}\n{doc.text}" if doc.title else doc.text


def build_index(
    corpus: Corpus,
    generator: Generator,
    embedder,
    coref_threshold: float = DEFAULT_COREF_THRESHOLD,
    coref_k: int = DEFAULT_COREF_K,
    concurrency: int = 1,
) -> GraphIndex:
    """Full indexing stage: graph, entity and document embeddings, coreference."""
    kg, skipped = build_graph(corpus, generator, concurrency=concurrency)
    entity_names = list(kg.entities)
    entity_index = EmbeddingIndex.build(
        entity_names,
        embedder.embed(entity_names)
        if entity_names
        else np.zeros((0, getattr(embedder, "dim", 0) or 0)),
    )
    coref = build_coreference(kg, entity_index, coref_threshold, coref_k)
    doc_ids = [d.doc_id for d in corpus.documents]
    doc_index = EmbeddingIndex.build(
        doc_ids, embedder.embed([doc_embedding_text(d) for d in corpus.documents])
    )
    documents = {d.doc_id: d for d in corpus.documents}
    meta = {
        "schema_version": SCHEMA_VERSION,
        "coref_threshold": coref_threshold,
        "coref_k": coref_k,
        "skipped_documents": skipped,
        "embedding_dim": entity_index.dim if entity_names else doc_index.dim,
    }
    return GraphIndex(
        kg=kg,
        coref=coref,
        entity_index=entity_index,
        doc_index=doc_index,
        documents=documents,
        meta=meta,
    )


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode(
        "utf-8"
    )


def save_index(index: GraphIndex, path: str | Path) -> None:
    """Persist a graph index as a single versioned archive."""
    path = Path(path)
    graph_section = {
        "entities": [
            {
                "name": e.canonical_name,
                "surface_forms": sorted(e.surface_forms),
                "source_doc_ids": sorted(e.source_doc_ids),
                "embedding_key": e.embedding_key,
            }
            for e in (index.kg.entities[k] for k in sorted(index.kg.entities))
        ],
        "triples": [
            [t.head, t.relation, t.tail, t.source_doc_id] for t in index.kg.triples
        ],
    }
    coref_section = {
        name: [[other, score] for other, score in pairs]
        for name, pairs in index.coref.items()
    }
    docs_section = [
        {"id": d.doc_id, "title": d.title, "text": d.text, "token_count": d.token_count}
        for d in index.documents.values()
    ]
    vectors_meta = {
        "dim": index.entity_index.dim if len(index.entity_index) else index.doc_index.dim,
        "entity_keys": index.entity_index.keys,
        "doc_keys": index.doc_index.keys,
    }
    blob = (
        index.entity_index.matrix.astype("<f8").tobytes()
        + index.doc_index.matrix.astype("<f8").tobytes()
    )
    members = [
        ("meta.json", _dump_json(index.meta | {"schema_version": SCHEMA_VERSION})),
        ("documents.json", _dump_json(docs_section)),
        ("graph.json", _dump_json(graph_section)),
        ("coref.json", _dump_json(coref_section)),
        ("vectors.json", _dump_json(vectors_meta)),
        ("vectors.bin", blob),
    ]
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in members:
            info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
            zf.writestr(info, payload)
    path.write_bytes(buffer.getvalue())


def load_index(path: str | Path) -> GraphIndex:
    """Load an archive written by :func:`save_index`.

    Version mismatches and corrupt archives raise
    :class:`IndexArchiveError` with the reason.
    """
    path = Path(path)
    if not path.exists():
        raise IndexArchiveError(f"index archive not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            version = meta.get("schema_version")
            if version != SCHEMA_VERSION:
                raise IndexArchiveError(
                    f"index archive {path} has schema version {version}, "
                    f"this engine reads version {SCHEMA_VERSION}"
                )
            docs_section = json.loads(zf.read("documents.json"))
            graph_section = json.loads(zf.read("graph.json"))
            coref_section = json.loads(zf.read("coref.json"))
            vectors_meta = json.loads(zf.read("vectors.json"))
            blob = zf.read("vectors.bin")
    except IndexArchiveError:
        raise
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise IndexArchiveError(f"index archive {path} is corrupt: {exc}") from exc

    kg = KnowledgeGraph()
    for item in graph_section["entities"]:
        kg.entities[item["name"]] = Entity(
            canonical_name=item["name"],
            surface_forms=set(item["surface_forms"]),
            source_doc_ids=set(item["source_doc_ids"]),
            embedding_key=item["embedding_key"],
        )
    kg.triples = [Triple(*item) for item in graph_section["triples"]]
    _rebuild_adjacency(kg)

    coref = {
        name: [(other, float(score)) for other, score in pairs]
        for name, pairs in coref_section.items()
    }
    dim = int(vectors_meta["dim"])
    entity_keys = list(vectors_meta["entity_keys"])
    doc_keys = list(vectors_meta["doc_keys"])
    expected = (len(entity_keys) + len(doc_keys)) * dim * 8
    if len(blob) != expected:
        raise IndexArchiveError(
            f"index archive {path} is corrupt: vector block holds {len(blob)} bytes, "
            f"expected {expected}"
        )
    matrix = np.frombuffer(blob, dtype="<f8").reshape(-1, dim)
    entity_matrix = matrix[: len(entity_keys)].copy()
    doc_matrix = matrix[len(entity_keys) :].copy()
    documents = {
        item["id"]: Document(
            doc_id=item["id"],
            title=item["title"],
            text=item["text"],
            token_count=int(item["token_count"]),
        )
        for item in docs_section
    }
    return GraphIndex(
        kg=kg,
        coref=coref,
        entity_index=EmbeddingIndex(keys=entity_keys, matrix=entity_matrix),
        doc_index=EmbeddingIndex(keys=doc_keys, matrix=doc_matrix),
        documents=documents,
        meta=meta,
    )
