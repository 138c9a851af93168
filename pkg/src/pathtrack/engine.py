"""Engine facade: wires config, backends, and the three pipeline stages."""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path

from .completion import complete_retrieval
from .config import EngineConfig
from .corpus import chunk_corpus, load_corpus
from .embedding import HashEmbedder, HttpEmbedder
from .evaluation import run_benchmark
from .generator import (
    Generator,
    OpenAIChatBackend,
    ScriptedBackend,
    TokenLedger,
    load_templates,
)
from .indexer import GraphIndex, build_index, load_index, save_index
from .tracker import track

logger = logging.getLogger(__name__)

TRACE_SCHEMA_VERSION = 1


class EngineError(RuntimeError):
    """Raised for operational failures the caller should see verbatim."""


def _dump_json(payload: dict, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


class Engine:
    """One configured engine instance serving all operations.

    ``generator`` and ``embedder`` are injectable for offline runs and
    tests; by default they are built from the config.
    """

    def __init__(
        self,
        config: EngineConfig | None = None,
        generator: Generator | None = None,
        embedder=None,
    ) -> None:
        self.config = (config or EngineConfig()).validate()
        self.embedder = embedder if embedder is not None else self._make_embedder()
        self._generator = generator
        self._templates = None
        self._index_cache: dict[str, tuple[float, GraphIndex]] = {}

    def _make_embedder(self):
        if self.config.embedder_kind == "hash":
            return HashEmbedder(dim=self.config.embedder_dim)
        return HttpEmbedder(base_url=self.config.embedder_base_url)

    @property
    def templates(self):
        if self._templates is None:
            self._templates = load_templates(self.config.templates_dir)
        return self._templates

    def make_generator(self, ledger: TokenLedger | None = None) -> Generator:
        if self._generator is not None:
            return self._generator.with_ledger(ledger or TokenLedger())
        if self.config.generator_kind == "scripted":
            backend = ScriptedBackend.from_file(self.config.generator_script)
        else:
            backend = OpenAIChatBackend(
                base_url=self.config.generator_base_url,
                model=self.config.generator_model,
            )
        return Generator(
            backend,
            templates=self.templates,
            mode=self.config.prompt_mode,
            ledger=ledger or TokenLedger(),
            retries=self.config.retries,
            include_chain=self.config.include_chain,
        )

    # -- operations ---------------------------------------------------------

    def build(self, corpus_path: str, out_path: str, **overrides) -> dict:
        cfg = self.config.with_overrides(**overrides)
        corpus = load_corpus(corpus_path)
        if cfg.max_chunk_tokens:
            corpus = chunk_corpus(corpus, cfg.max_chunk_tokens)
        ledger = TokenLedger()
        generator = self.make_generator(ledger)
        index = build_index(
            corpus,
            generator,
            self.embedder,
            coref_threshold=cfg.coref_threshold,
            coref_k=cfg.coref_k,
            concurrency=cfg.concurrency,
        )
        save_index(index, out_path)
        self._index_cache.pop(str(Path(out_path).resolve()), None)
        stats = index.stats()
        stats["out_path"] = str(out_path)
        stats["tokens"] = ledger.snapshot()
        return stats

    def load(self, index_path: str) -> GraphIndex:
        resolved = str(Path(index_path).resolve())
        mtime = Path(index_path).stat().st_mtime if Path(index_path).exists() else -1.0
        cached = self._index_cache.get(resolved)
        if cached and cached[0] == mtime:
            return cached[1]
        index = load_index(index_path)
        self._index_cache[resolved] = (mtime, index)
        return index

    def _trace_ref(self, question: str, cfg: EngineConfig) -> str:
        seed = json.dumps({"question": question, "config": cfg.echo()}, sort_keys=True)
        return hashlib.blake2b(seed.encode("utf-8"), digest_size=8).hexdigest()

    def _run_query(self, index: GraphIndex, question: str, cfg: EngineConfig):
        ledger = TokenLedger()
        generator = self.make_generator(ledger)
        result, trace = track(
            question,
            index,
            generator,
            self.embedder,
            max_hops=cfg.max_hops,
            prune_k=cfg.prune_k,
            use_expansion_goal=cfg.use_expansion_goal,
        )
        trace_ref = self._trace_ref(question, cfg)
        retrieval = complete_retrieval(
            result,
            index,
            self.embedder,
            question,
            limit=cfg.limit,
            second_stage_k=cfg.second_stage_k,
            merge_order=cfg.merge_order,
            use_completion=cfg.use_completion,
            trace_ref=trace_ref,
        )
        return result, trace, retrieval, ledger, generator

    def retrieve(
        self,
        index_path: str,
        question: str,
        trace_path: str | None = None,
        **overrides,
    ) -> dict:
        cfg = self.config.with_overrides(**overrides)
        index = self.load(index_path)
        result, trace, retrieval, ledger, _ = self._run_query(index, question, cfg)
        payload = retrieval.to_dict()
        payload["stop_reason"] = result.stop_reason.value
        payload["hops_used"] = result.hops_used
        payload["tokens"] = ledger.snapshot()
        if trace_path:
            trace_doc = {
                "schema_version": TRACE_SCHEMA_VERSION,
                "trace_ref": retrieval.trace_ref,
                "config": cfg.echo(),
                "tracking": trace.to_dict(),
                "retrieval": retrieval.to_dict(),
                "tokens": ledger.snapshot(),
            }
            _dump_json(trace_doc, trace_path)
            payload["trace_path"] = str(trace_path)
        return payload

    def answer(
        self,
        index_path: str,
        question: str,
        trace_path: str | None = None,
        **overrides,
    ) -> dict:
        cfg = self.config.with_overrides(**overrides)
        index = self.load(index_path)
        result, trace, retrieval, ledger, generator = self._run_query(
            index, question, cfg
        )
        contexts = [
            index.documents[d.doc_id]
            for d in retrieval.ranked_docs[: cfg.qa_docs]
            if d.doc_id in index.documents
        ]
        if not contexts:
            raise EngineError(
                f"retrieval returned no documents to answer from for {question!r}"
            )
        answer_text = generator.answer(question, contexts)
        payload = retrieval.to_dict()
        payload["answer"] = answer_text
        payload["stop_reason"] = result.stop_reason.value
        payload["hops_used"] = result.hops_used
        payload["tokens"] = ledger.snapshot()
        if trace_path:
            trace_doc = {
                "schema_version": TRACE_SCHEMA_VERSION,
                "trace_ref": retrieval.trace_ref,
                "config": cfg.echo(),
                "tracking": trace.to_dict(),
                "retrieval": retrieval.to_dict(),
                "answer": answer_text,
                "tokens": ledger.snapshot(),
            }
            _dump_json(trace_doc, trace_path)
            payload["trace_path"] = str(trace_path)
        return payload

    def evaluate(
        self,
        index_path: str,
        corpus_path: str,
        mode: str = "retrieval",
        ks: tuple[int, ...] = (2, 5, 10),
        out_path: str | None = None,
        **overrides,
    ) -> dict:
        cfg = self.config.with_overrides(**overrides)
        index = self.load(index_path)
        corpus = load_corpus(corpus_path)
        generator = self.make_generator()
        report = run_benchmark(
            corpus,
            index,
            generator,
            self.embedder,
            mode=mode,
            ks=ks,
            max_hops=cfg.max_hops,
            prune_k=cfg.prune_k,
            limit=cfg.limit,
            second_stage_k=cfg.second_stage_k,
            merge_order=cfg.merge_order,
            use_completion=cfg.use_completion,
            use_expansion_goal=cfg.use_expansion_goal,
            qa_docs=cfg.qa_docs,
            concurrency=cfg.concurrency,
            config_echo=cfg.echo(),
        )
        payload = report.to_dict()
        if out_path:
            _dump_json(payload, out_path)
            payload["out_path"] = str(out_path)
        return payload

    def inspect(self, trace_path: str) -> dict:
        path = Path(trace_path)
        if not path.exists():
            raise EngineError(f"trace file not found: {trace_path}")
        try:
            payload = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise EngineError(f"trace file {trace_path} is not valid JSON: {exc.msg}")
        if not isinstance(payload, dict) or "tracking" not in payload:
            raise EngineError(f"trace file {trace_path} is not an engine trace")
        return payload
