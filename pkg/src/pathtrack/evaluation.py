"""Benchmark metrics and the end-to-end evaluation harness."""

from __future__ import annotations

import logging
import re
import string
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .completion import complete_retrieval
from .corpus import Corpus, QARecord, parent_doc_id
from .generator import Generator, TokenLedger
from .indexer import GraphIndex, KnowledgeGraph
from .tracker import TrackTrace, track

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")


class EvalError(ValueError):
    """Raised for invalid metric inputs or benchmark configuration."""


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in string.punctuation)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, gold: str) -> int:
    """1 when the normalized strings are identical, else 0."""
    return int(normalize_answer(prediction) == normalize_answer(gold))


def f1(prediction: str, gold: str) -> float:
    """Token-bag F1 over normalized answers."""
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def recall_at_k(ranked_doc_ids: list[str], gold_doc_ids: set[str], k: int) -> float:
    """Fraction of gold documents found in the top k of the ranking."""
    if k < 1:
        raise EvalError(f"k must be >= 1, got {k}")
    if not gold_doc_ids:
        raise EvalError("recall is undefined for an empty gold set")
    hits = set(ranked_doc_ids[:k]) & set(gold_doc_ids)
    return len(hits) / len(gold_doc_ids)


def _gold_entity_set(kg: KnowledgeGraph, gold_doc_ids: set[str]) -> set[str]:
    return {
        name
        for name, entity in kg.entities.items()
        if entity.source_doc_ids & gold_doc_ids
    }


def mismatch_diagnostics(
    trace: "TrackTrace | dict", kg: KnowledgeGraph, gold_doc_ids: set[str]
) -> dict:
    """Why retrieval may have missed: seeds or paths disjoint from gold entities.

    Compares the trace's seed entities and final path nodes against the
    entity set the indexer extracted from the gold documents. An empty
    intersection flags the corresponding mismatch.
    """
    if not gold_doc_ids:
        raise EvalError("mismatch diagnostics need a non-empty gold set")
    if isinstance(trace, dict):
        seeds = set(trace.get("seeds") or [])
        path_nodes: set[str] = set()
        for item in trace.get("final_valid") or []:
            path_nodes.update(item.get("nodes") or [])
    else:
        seeds = set(trace.seeds)
        path_nodes = {node for item in trace.final_valid for node in item["nodes"]}
    gold_entities = _gold_entity_set(kg, set(gold_doc_ids))
    return {
        "seed_mismatch": not (seeds & gold_entities),
        "path_mismatch": not (path_nodes & gold_entities),
        "gold_entity_count": len(gold_entities),
    }


@dataclass
class EvalReport:
    """Versioned benchmark report: per-query rows plus aggregate means."""

    mode: str
    ks: list[int]
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    tokens: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "mode": self.mode,
            "ks": self.ks,
            "config": self.config,
            "rows": self.rows,
            "aggregates": self.aggregates,
            "diagnostics": self.diagnostics,
            "tokens": self.tokens,
        }


def _zero_row(record: QARecord, ks: list[int], mode: str, error: str) -> dict:
    row = {
        "query_id": record.query_id,
        "question": record.question,
        "error": error,
        "ranked": [],
        "stop_reason": None,
        "hops_used": 0,
        "seed_mismatch": None,
        "path_mismatch": None,
        "tokens": {},
    }
    for k in ks:
        row[f"recall@{k}"] = 0.0
    if mode == "qa":
        row["answer"] = ""
        row["em"] = 0
        row["f1"] = 0.0
    return row


def run_benchmark(
    corpus: Corpus,
    index: GraphIndex,
    generator: Generator,
    embedder,
    mode: str = "retrieval",
    ks: tuple[int, ...] = (2, 5, 10),
    max_hops: int = 2,
    prune_k: int = 30,
    limit: int = 10,
    second_stage_k: int = 10,
    merge_order: str = "path_first",
    use_completion: bool = True,
    use_expansion_goal: bool = True,
    qa_docs: int = 5,
    concurrency: int = 1,
    config_echo: dict | None = None,
) -> EvalReport:
    """Run every QA record through the full pipeline and score it.

    Per-query failures are caught and reported as zero-score rows with an
    error note; the benchmark itself never aborts on one bad query. Rows are
    assembled in query id order, so reports are deterministic under any
    worker scheduling.
    """
    if mode not in ("retrieval", "qa"):
        raise EvalError(f"unknown benchmark mode '{mode}'")
    if not corpus.records:
        raise EvalError("corpus has no question records to evaluate")
    ks = sorted(set(int(k) for k in ks))
    if any(k < 1 for k in ks):
        raise EvalError("every k must be >= 1")
    missing_gold = [r.query_id for r in corpus.records if not r.gold_doc_ids]
    if missing_gold:
        raise EvalError(
            f"{len(missing_gold)} records lack supporting documents "
            f"(first: '{missing_gold[0]}'); retrieval metrics need gold documents"
        )
    if mode == "qa":
        missing = [r.query_id for r in corpus.records if not r.gold_answer.strip()]
        if missing:
            raise EvalError(
                f"mode 'qa' needs a gold answer on every record, "
                f"{len(missing)} records lack one (first: '{missing[0]}')"
            )

    def run_one(record: QARecord) -> dict:
        ledger = TokenLedger()
        bound = generator.with_ledger(ledger)
        try:
            result, trace = track(
                record.question,
                index,
                bound,
                embedder,
                max_hops=max_hops,
                prune_k=prune_k,
                use_expansion_goal=use_expansion_goal,
            )
            retrieval = complete_retrieval(
                result,
                index,
                embedder,
                record.question,
                limit=limit,
                second_stage_k=second_stage_k,
                merge_order=merge_order,
                use_completion=use_completion,
            )
            # Chunked corpora retrieve chunk ids; gold links whole documents.
            ranked_parents: list[str] = []
            for doc in retrieval.ranked_docs:
                parent = parent_doc_id(doc.doc_id)
                if parent not in ranked_parents:
                    ranked_parents.append(parent)
            diag = mismatch_diagnostics(trace, index.kg, record.gold_doc_ids)
            row = {
                "query_id": record.query_id,
                "question": record.question,
                "error": None,
                "ranked": [d.to_dict() for d in retrieval.ranked_docs],
                "stop_reason": result.stop_reason.value,
                "hops_used": result.hops_used,
                "seed_mismatch": diag["seed_mismatch"],
                "path_mismatch": diag["path_mismatch"],
            }
            for k in ks:
                row[f"recall@{k}"] = recall_at_k(ranked_parents, record.gold_doc_ids, k)
            if mode == "qa":
                contexts = [
                    index.documents[d.doc_id]
                    for d in retrieval.ranked_docs[:qa_docs]
                    if d.doc_id in index.documents
                ]
                if contexts:
                    prediction = bound.answer(record.question, contexts)
                else:
                    prediction = ""
                row["answer"] = prediction
                row["em"] = exact_match(prediction, record.gold_answer)
                row["f1"] = f1(prediction, record.gold_answer)
            row["tokens"] = ledger.snapshot()
            return row
        except Exception as exc:  # noqa: BLE001
            logger.warning("query '%s' failed: %s", record.query_id, exc)
            row = _zero_row(record, ks, mode, f"{type(exc).__name__}: {exc}")
            row["tokens"] = ledger.snapshot()
            return row

    if concurrency > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            rows = list(pool.map(run_one, corpus.records))
    else:
        rows = [run_one(record) for record in corpus.records]
    rows.sort(key=lambda r: r["query_id"])

    aggregates: dict = {}
    n = len(rows)
    for k in ks:
        aggregates[f"recall@{k}"] = sum(r[f"recall@{k}"] for r in rows) / n
    if mode == "qa":
        aggregates["em"] = sum(r["em"] for r in rows) / n
        aggregates["f1"] = sum(r["f1"] for r in rows) / n
    failed = [r for r in rows if r["error"]]
    aggregates["failed_queries"] = len(failed)

    judged = [r for r in rows if r["seed_mismatch"] is not None]
    diagnostics = {
        "seed_mismatch_rate": (
            sum(1 for r in judged if r["seed_mismatch"]) / len(judged) if judged else 0.0
        ),
        "path_mismatch_rate": (
            sum(1 for r in judged if r["path_mismatch"]) / len(judged) if judged else 0.0
        ),
    }

    tokens = {"prompt_tokens": 0, "completion_tokens": 0, "calls": 0}
    stages: dict[str, dict] = {}
    for row in rows:
        snap = row.get("tokens") or {}
        tokens["prompt_tokens"] += snap.get("prompt_tokens", 0)
        tokens["completion_tokens"] += snap.get("completion_tokens", 0)
        tokens["calls"] += snap.get("calls", 0)
        for stage, bucket in (snap.get("stages") or {}).items():
            agg = stages.setdefault(
                stage, {"prompt_tokens": 0, "completion_tokens": 0, "calls": 0}
            )
            for key in agg:
                agg[key] += bucket.get(key, 0)
    tokens["stages"] = stages

    return EvalReport(
        mode=mode,
        ks=list(ks),
        rows=rows,
        aggregates=aggregates,
        diagnostics=diagnostics,
        tokens=tokens,
        config=dict(config_echo or {}),
    )
