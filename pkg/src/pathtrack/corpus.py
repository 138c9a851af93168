"""Corpus ingestion: JSONL loading, token counting, and document chunking."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")
# A sentence ends at a run of terminal punctuation followed by whitespace.
_SENTENCE_END_RE = re.compile(r"[.!?]+(?=\s)")

MIN_CHUNK_TOKENS = 32
DEFAULT_CHUNK_TOKENS = 512


class CorpusError(ValueError):
    """Raised for malformed corpus files or invalid document operations."""


class Tokenizer(Protocol):
    """Anything that can split text into token spans.

    The engine only needs counts and cut points, so a tokenizer exposes
    character spans rather than token strings. Production deployments can
    bind a subword tokenizer here; the default is a deterministic
    word-and-punctuation splitter.
    """

    def spans(self, text: str) -> list[tuple[int, int]]: ...

    def count(self, text: str) -> int: ...


class RegexTokenizer:
    """Fallback tokenizer: each word or punctuation mark is one token."""

    def spans(self, text: str) -> list[tuple[int, int]]:
        return [m.span() for m in _TOKEN_RE.finditer(text)]

    def count(self, text: str) -> int:
        return sum(1 for _ in _TOKEN_RE.finditer(text))


DEFAULT_TOKENIZER = RegexTokenizer()


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    """Deterministic token count for budgeting prompts and chunks."""
    tok = tokenizer or DEFAULT_TOKENIZER
    return tok.count(text)


@dataclass
class Document:
    """One retrievable unit: a titled passage of text."""

    doc_id: str
    title: str
    text: str
    token_count: int = 0

    @classmethod
    def make(
        cls,
        doc_id: str,
        title: str,
        text: str,
        tokenizer: Tokenizer | None = None,
    ) -> "Document":
        if not doc_id:
            raise CorpusError("document id must be non-empty")
        if not text or not text.strip():
            raise CorpusError(f"document '{doc_id}' has empty text")
        return cls(
            doc_id=doc_id,
            title=title,
            text=text,
            token_count=count_tokens(text, tokenizer),
        )


@dataclass
class QARecord:
    """A benchmark question with its gold answer and supporting documents."""

    query_id: str
    question: str
    gold_answer: str = ""
    gold_doc_ids: set[str] = field(default_factory=set)

    def __post_init__(self) -> None:
        if not self.query_id:
            raise CorpusError("question record id must be non-empty")
        if not self.question or not self.question.strip():
            raise CorpusError(f"question record '{self.query_id}' has empty question")


@dataclass
class Corpus:
    """Documents plus optional QA records loaded from one source."""

    documents: list[Document] = field(default_factory=list)
    records: list[QARecord] = field(default_factory=list)
    _by_id: dict[str, Document] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._by_id:
            for doc in self.documents:
                if doc.doc_id in self._by_id:
                    raise CorpusError(f"duplicate document id '{doc.doc_id}'")
                self._by_id[doc.doc_id] = doc
        self._validate_records()

    def _validate_records(self) -> None:
        # Gold references may point at a document or at a chunk's parent.
        known = set(self._by_id)
        known.update(parent_doc_id(d) for d in self._by_id)
        seen_queries: set[str] = set()
        for rec in self.records:
            if rec.query_id in seen_queries:
                raise CorpusError(f"duplicate question record id '{rec.query_id}'")
            seen_queries.add(rec.query_id)
            for doc_id in rec.gold_doc_ids:
                if doc_id not in known:
                    raise CorpusError(
                        f"record '{rec.query_id}' references unknown "
                        f"supporting document '{doc_id}'"
                    )

    def get(self, doc_id: str) -> Document:
        try:
            return self._by_id[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document id '{doc_id}'") from None

    def doc_ids(self) -> list[str]:
        return [d.doc_id for d in self.documents]

    def __len__(self) -> int:
        return len(self.documents)


def parent_doc_id(doc_id: str) -> str:
    """Map a chunk id like ``base#2`` back to its source document id."""
    return doc_id.split("#", 1)[0]


def load_corpus(
    path: str | Path,
    format: str = "jsonl",
    tokenizer: Tokenizer | None = None,
) -> Corpus:
    """Load a corpus file.

    Each JSONL line is either a document record with ``id``/``title``/``text``
    fields or a question record with ``id``/``question`` and optional
    ``answer``/``supporting_ids`` fields. Malformed lines and duplicate ids
    raise :class:`CorpusError` naming the offending line or id.
    """
    if format != "jsonl":
        raise CorpusError(f"unsupported corpus format '{format}'")
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"corpus file not found: {path}")

    documents: list[Document] = []
    records: list[QARecord] = []
    seen_docs: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: invalid JSON: {exc.msg}") from exc
            if not isinstance(obj, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            if "question" in obj:
                records.append(_parse_record(obj, lineno))
            else:
                doc = _parse_document(obj, lineno, tokenizer)
                if doc.doc_id in seen_docs:
                    raise CorpusError(
                        f"duplicate document id '{doc.doc_id}' (line {lineno})"
                    )
                seen_docs.add(doc.doc_id)
                documents.append(doc)
    return Corpus(documents=documents, records=records)


def _require(obj: dict, key: str, lineno: int, kind: str) -> object:
    if key not in obj:
        raise CorpusError(f"line {lineno}: {kind} record missing field '{key}'")
    return obj[key]


def _parse_document(
    obj: dict, lineno: int, tokenizer: Tokenizer | None
) -> Document:
    doc_id = _require(obj, "id", lineno, "document")
    text = _require(obj, "text", lineno, "document")
    if not isinstance(doc_id, str) or not doc_id:
        raise CorpusError(f"line {lineno}: document id must be a non-empty string")
    if not isinstance(text, str) or not text.strip():
        raise CorpusError(f"line {lineno}: document '{doc_id}' has empty text")
    title = obj.get("title", "")
    if not isinstance(title, str):
        raise CorpusError(f"line {lineno}: document title must be a string")
    return Document.make(doc_id, title, text, tokenizer)


def _parse_record(obj: dict, lineno: int) -> QARecord:
    query_id = _require(obj, "id", lineno, "question")
    question = obj["question"]
    if not isinstance(query_id, str) or not query_id:
        raise CorpusError(f"line {lineno}: question record id must be a non-empty string")
    if not isinstance(question, str) or not question.strip():
        raise CorpusError(f"line {lineno}: question record '{query_id}' has empty question")
    supporting = obj.get("supporting_ids", [])
    if not isinstance(supporting, list) or not all(isinstance(s, str) for s in supporting):
        raise CorpusError(
            f"line {lineno}: supporting_ids of '{query_id}' must be a list of strings"
        )
    return QARecord(
        query_id=query_id,
        question=question,
        gold_answer=str(obj.get("answer", "") or ""),
        gold_doc_ids=set(supporting),
    )


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back to JSONL (inverse of :func:`load_corpus`)."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for doc in corpus.documents:
            fh.write(
                json.dumps(
                    {"id": doc.doc_id, "title": doc.title, "text": doc.text},
                    ensure_ascii=False,
                )
                + "\n"
            )
        for rec in corpus.records:
            fh.write(
                json.dumps(
                    {
                        "id": rec.query_id,
                        "question": rec.question,
                        "answer": rec.gold_answer,
                        "supporting_ids": sorted(rec.gold_doc_ids),
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def _sentence_spans(text: str) -> list[tuple[int, int]]:
    spans = []
    start = 0
    for m in _SENTENCE_END_RE.finditer(text):
        spans.append((start, m.end()))
        start = m.end()
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def chunk_document(
    doc: Document,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
    tokenizer: Tokenizer | None = None,
) -> list[Document]:
    """Split a document into chunks of at most ``max_tokens`` tokens.

    Chunk boundaries prefer sentence ends; a single sentence over budget is
    cut at token boundaries. Chunk ids are ``<doc_id>#<k>`` with ``k``
    starting at 0 and every chunk keeps the source title. A document that
    already fits is returned unchanged as a single-element list.
    """
    tok = tokenizer or DEFAULT_TOKENIZER
    if max_tokens < MIN_CHUNK_TOKENS:
        raise CorpusError(
            f"max_tokens must be at least {MIN_CHUNK_TOKENS}, got {max_tokens}"
        )
    if not doc.text.strip():
        raise CorpusError(f"document '{doc.doc_id}' has empty text")
    if doc.token_count <= max_tokens:
        return [doc]

    text = doc.text
    pieces: list[tuple[int, int]] = []
    cur_start: int | None = None
    cur_end = 0
    cur_tokens = 0

    def flush() -> None:
        nonlocal cur_start, cur_tokens
        if cur_start is not None:
            pieces.append((cur_start, cur_end))
            cur_start = None
            cur_tokens = 0

    for s, e in _sentence_spans(text):
        n = tok.count(text[s:e])
        if n > max_tokens:
            # Oversized sentence: cut at token boundaries.
            flush()
            spans = [(s + a, s + b) for a, b in tok.spans(text[s:e])]
            for i in range(0, len(spans), max_tokens):
                group = spans[i : i + max_tokens]
                pieces.append((group[0][0], group[-1][1]))
            continue
        if cur_start is None:
            cur_start, cur_end, cur_tokens = s, e, n
        elif cur_tokens + n <= max_tokens:
            cur_end, cur_tokens = e, cur_tokens + n
        else:
            flush()
            cur_start, cur_end, cur_tokens = s, e, n
    flush()

    chunks: list[Document] = []
    for start, end in pieces:
        piece = text[start:end].strip()
        if not piece:
            continue
        chunks.append(
            Document.make(f"{doc.doc_id}#{len(chunks)}", doc.title, piece, tok)
        )
    return chunks


def chunk_corpus(
    corpus: Corpus,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
    tokenizer: Tokenizer | None = None,
) -> Corpus:
    """Chunk every document in a corpus, preserving QA records."""
    docs: list[Document] = []
    for doc in corpus.documents:
        docs.extend(chunk_document(doc, max_tokens, tokenizer))
    return Corpus(documents=docs, records=list(corpus.records))
