"""LLM access layer: prompt templates, backends, output parsing, token ledger.

All engine stages call the model through :class:`Generator`, which renders a
named template, sends it to a pluggable chat backend, parses the reply, and
charges the tokens to a per-stage ledger. Two backends ship with the engine:
an OpenAI-compatible HTTP client and a scripted offline mock.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .corpus import Document, count_tokens

logger = logging.getLogger(__name__)

GENERATOR_URL_ENV = "PATHTRACK_GENERATOR_BASE_URL"
GENERATOR_KEY_ENV = "PATHTRACK_GENERATOR_API_KEY"
GENERATOR_MODEL_ENV = "PATHTRACK_GENERATOR_MODEL"

TEMPLATE_NAMES = ("openie", "query_entities", "path_tracking", "path_tracking_oneshot", "qa")
PROMPT_MODES = ("zero_shot", "one_shot")

# Ledger stage charged for each call type.
STAGE_BY_CALL = {
    "openie": "indexing",
    "query_entities": "retrieval",
    "path_tracking": "retrieval",
    "qa": "qa",
}
STAGES = ("indexing", "retrieval", "qa")

_PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")

REFORMAT_REMINDER = (
    "Your previous reply could not be parsed. Respond again with only the "
    "JSON object in the requested shape, no prose and no code fences."
)


class GeneratorError(Exception):
    """Base error for the LLM access layer."""


class BackendError(GeneratorError):
    """The chat backend failed after retries."""


class OutputParseError(GeneratorError):
    """The model reply could not be parsed in the expected shape."""


class GraphExtractionError(GeneratorError):
    """Graph extraction failed for one document after all retries."""


@dataclass
class PromptTemplate:
    """A named prompt body with ``{placeholder}`` slots."""

    name: str
    body: str
    mode: str = "zero_shot"

    def placeholders(self) -> set[str]:
        return set(_PLACEHOLDER_RE.findall(self.body))

    def render(self, **fields: str) -> str:
        slots = self.placeholders()
        missing = slots - set(fields)
        if missing:
            raise GeneratorError(
                f"template '{self.name}' missing values for: {sorted(missing)}"
            )
        unknown = set(fields) - slots
        if unknown:
            raise GeneratorError(
                f"template '{self.name}' has no placeholder for: {sorted(unknown)}"
            )
        out = self.body
        for key, value in fields.items():
            out = out.replace("{" + key + "}", str(value))
        return out


def default_templates_dir() -> Path:
    return Path(__file__).parent / "prompts"


def load_templates(templates_dir: str | Path | None = None) -> dict[str, PromptTemplate]:
    """Load the five prompt templates from a directory, one file per prompt."""
    base = Path(templates_dir) if templates_dir else default_templates_dir()
    templates: dict[str, PromptTemplate] = {}
    for name in TEMPLATE_NAMES:
        path = base / f"{name}.txt"
        if not path.exists():
            raise GeneratorError(f"prompt template file not found: {path}")
        mode = "one_shot" if name.endswith("oneshot") else "zero_shot"
        templates[name] = PromptTemplate(name=name, body=path.read_text("utf-8"), mode=mode)
    return templates


@dataclass
class TrackerOutput:
    """Parsed reply of one path tracking call.

    Path ids are 0-based indices into the candidate list that was presented.
    ``degraded`` marks the conservative fallback used when the model kept
    returning unparseable output.
    """

    chain: str
    valid_path_ids: list[int]
    expand_path_ids: list[int]
    expansion_requirement: str
    continue_flag: bool
    degraded: bool = False


class TokenLedger:
    """Thread-safe token accounting across the three engine stages."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._stages = {s: {"prompt_tokens": 0, "completion_tokens": 0, "calls": 0} for s in STAGES}

    def add(self, stage: str, prompt_tokens: int, completion_tokens: int) -> None:
        if stage not in self._stages:
            raise GeneratorError(f"unknown ledger stage '{stage}'")
        if prompt_tokens < 0 or completion_tokens < 0:
            raise GeneratorError("token counts must be non-negative")
        with self._lock:
            bucket = self._stages[stage]
            bucket["prompt_tokens"] += prompt_tokens
            bucket["completion_tokens"] += completion_tokens
            bucket["calls"] += 1

    @property
    def prompt_tokens(self) -> int:
        with self._lock:
            return sum(b["prompt_tokens"] for b in self._stages.values())

    @property
    def completion_tokens(self) -> int:
        with self._lock:
            return sum(b["completion_tokens"] for b in self._stages.values())

    @property
    def calls(self) -> int:
        with self._lock:
            return sum(b["calls"] for b in self._stages.values())

    def snapshot(self) -> dict:
        with self._lock:
            stages = {s: dict(b) for s, b in self._stages.items()}
        return {
            "stages": stages,
            "prompt_tokens": sum(b["prompt_tokens"] for b in stages.values()),
            "completion_tokens": sum(b["completion_tokens"] for b in stages.values()),
            "calls": sum(b["calls"] for b in stages.values()),
        }


@dataclass
class CompletionResult:
    text: str
    prompt_tokens: int | None = None
    completion_tokens: int | None = None


ScriptEntry = "str | Callable[[list[dict]], str]"


class ScriptedBackend:
    """Deterministic offline backend driven by per-call-type scripts.

    Responses are consumed FIFO from the queue registered for a call type.
    Entries may be plain strings or callables taking the message list, which
    lets tests compute replies from the rendered prompt. When a queue runs
    dry the optional default handler for that call type answers; without one
    the backend raises, which keeps strict scripts strict.
    """

    def __init__(self, scripts: dict[str, Sequence] | None = None) -> None:
        self._queues: dict[str, deque] = {}
        self._handlers: dict[str, Callable[[list[dict]], str]] = {}
        self.call_log: list[tuple[str, str]] = []
        for call_type, entries in (scripts or {}).items():
            self.push(call_type, *entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        """Load canned string responses from a JSON file keyed by call type."""
        try:
            data = json.loads(Path(path).read_text("utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise BackendError(f"cannot load generator script {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise BackendError(f"generator script {path} must be a JSON object")
        scripts: dict[str, list[str]] = {}
        for call_type, entries in data.items():
            if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
                raise BackendError(
                    f"generator script entry '{call_type}' must be a list of strings"
                )
            scripts[call_type] = entries
        return cls(scripts)

    def push(self, call_type: str, *responses) -> None:
        self._queues.setdefault(call_type, deque()).extend(responses)

    def set_handler(self, call_type: str, handler: Callable[[list[dict]], str]) -> None:
        self._handlers[call_type] = handler

    def complete(self, messages: list[dict], call_type: str) -> CompletionResult:
        queue = self._queues.get(call_type)
        if queue:
            entry = queue.popleft()
            text = entry(messages) if callable(entry) else entry
        elif call_type in self._handlers:
            text = self._handlers[call_type](messages)
        else:
            raise BackendError(
                f"scripted backend has no response left for call type '{call_type}'"
            )
        self.call_log.append((call_type, messages[-1]["content"]))
        return CompletionResult(text=text)


class OpenAIChatBackend:
    """OpenAI-compatible chat completions client."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str | None = None,
        timeout: float = 60.0,
        retries: int = 2,
        client: httpx.Client | None = None,
    ) -> None:
        self.base_url = (base_url or os.environ.get(GENERATOR_URL_ENV, "https://api.openai.com/v1")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(GENERATOR_KEY_ENV)
        if not self.api_key:
            raise BackendError(
                f"HTTP generator backend selected but {GENERATOR_KEY_ENV} is not set"
            )
        self.model = model or os.environ.get(GENERATOR_MODEL_ENV, "gpt-4o-mini")
        self.retries = retries
        self._client = client or httpx.Client(timeout=timeout)

    def complete(self, messages: list[dict], call_type: str) -> CompletionResult:
        payload = {"model": self.model, "messages": messages, "temperature": 0}
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self._client.post(
                    f"{self.base_url}/chat/completions", json=payload, headers=headers
                )
                if resp.status_code >= 500 or resp.status_code == 429:
                    last_error = BackendError(
                        f"generator backend returned {resp.status_code}: {resp.text[:200]}"
                    )
                    time.sleep(0.1 * (attempt + 1))
                    continue
                if resp.status_code != 200:
                    raise BackendError(
                        f"generator backend returned {resp.status_code}: {resp.text[:200]}"
                    )
                body = resp.json()
                text = body["choices"][0]["message"]["content"]
                usage = body.get("usage") or {}
                return CompletionResult(
                    text=text,
                    prompt_tokens=usage.get("prompt_tokens"),
                    completion_tokens=usage.get("completion_tokens"),
                )
            except httpx.HTTPError as exc:
                last_error = BackendError(f"generator backend unreachable: {exc}")
                time.sleep(0.1 * (attempt + 1))
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise BackendError(f"generator backend returned malformed body: {exc}") from exc
        raise last_error or BackendError("generator backend failed")


def parse_json_block(text: str) -> dict:
    """Extract the first JSON object from a reply, fenced or bare."""
    fence = re.search(r"```(?:json)?\s*(.*?)```", text, re.DOTALL)
    if fence:
        text = fence.group(1)
    start = text.find("{")
    if start == -1:
        raise OutputParseError("no JSON object in model reply")
    depth = 0
    in_string = False
    escape = False
    for i in range(start, len(text)):
        ch = text[i]
        if escape:
            escape = False
            continue
        if ch == "\\":
            escape = in_string
            continue
        if ch == '"':
            in_string = not in_string
            continue
        if in_string:
            continue
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                try:
                    obj = json.loads(text[start : i + 1])
                except json.JSONDecodeError as exc:
                    raise OutputParseError(f"invalid JSON in model reply: {exc.msg}") from exc
                if not isinstance(obj, dict):
                    raise OutputParseError("model reply JSON is not an object")
                return obj
    raise OutputParseError("unbalanced JSON object in model reply")


def _coerce_ids(values, limit: int, label: str) -> list[int]:
    """Map 1-based candidate numbers to 0-based indices, dropping junk."""
    ids: list[int] = []
    if not isinstance(values, list):
        values = []
    for item in values:
        try:
            number = int(item)
        except (TypeError, ValueError):
            logger.warning("tracker %s id %r is not an integer, dropped", label, item)
            continue
        if 1 <= number <= limit:
            idx = number - 1
            if idx not in ids:
                ids.append(idx)
        else:
            logger.warning("tracker %s id %d out of range 1..%d, dropped", label, number, limit)
    return ids


def _coerce_flag(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, (int, float)):
        return value != 0
    if isinstance(value, str):
        return value.strip().lower() in ("1", "true", "yes", "continue")
    return False


class Generator:
    """Renders prompts, runs the backend, and parses stage outputs."""

    def __init__(
        self,
        backend,
        templates: dict[str, PromptTemplate] | None = None,
        mode: str = "zero_shot",
        ledger: TokenLedger | None = None,
        retries: int = 2,
        include_chain: bool = True,
    ) -> None:
        if mode not in PROMPT_MODES:
            raise GeneratorError(f"unknown prompt mode '{mode}'")
        self.backend = backend
        self.templates = templates or load_templates()
        self.mode = mode
        self.ledger = ledger or TokenLedger()
        self.retries = retries
        self.include_chain = include_chain

    def with_ledger(self, ledger: TokenLedger) -> "Generator":
        clone = copy.copy(self)
        clone.ledger = ledger
        return clone

    def _call(self, call_type: str, messages: list[dict]) -> str:
        stage = STAGE_BY_CALL.get(call_type, "retrieval")
        result = self.backend.complete(messages, call_type)
        prompt_tokens = result.prompt_tokens
        if prompt_tokens is None:
            prompt_tokens = sum(count_tokens(m["content"]) for m in messages)
        completion_tokens = result.completion_tokens
        if completion_tokens is None:
            completion_tokens = count_tokens(result.text)
        self.ledger.add(stage, prompt_tokens, completion_tokens)
        return result.text

    def _call_json(self, call_type: str, prompt: str) -> dict:
        messages = [{"role": "user", "content": prompt}]
        last_exc: OutputParseError | None = None
        for attempt in range(self.retries + 1):
            text = self._call(call_type, messages)
            try:
                return parse_json_block(text)
            except OutputParseError as exc:
                last_exc = exc
                messages = [
                    {"role": "user", "content": prompt},
                    {"role": "assistant", "content": text},
                    {"role": "user", "content": REFORMAT_REMINDER},
                ]
        raise last_exc or OutputParseError("unparseable model reply")

    # -- indexing stage -----------------------------------------------------

    def extract_graph(self, doc: Document) -> tuple[list[str], list[tuple[str, str, str]]]:
        """Open extraction of entities and relation triples from one document.

        Raises :class:`GraphExtractionError` when the model output stays
        unparseable after retries; the caller decides whether to skip the
        document.
        """
        prompt = self.templates["openie"].render(title=doc.title, text=doc.text)
        try:
            obj = self._call_json("openie", prompt)
        except OutputParseError as exc:
            raise GraphExtractionError(
                f"graph extraction failed for document '{doc.doc_id}': {exc}"
            ) from exc

        entities: list[str] = []
        for item in obj.get("entities") or []:
            name = str(item).strip()
            if name and name not in entities:
                entities.append(name)
        triples: list[tuple[str, str, str]] = []
        for item in obj.get("triples") or []:
            if isinstance(item, dict):
                parts = (item.get("head"), item.get("relation"), item.get("tail"))
            elif isinstance(item, (list, tuple)) and len(item) == 3:
                parts = tuple(item)
            else:
                logger.warning("dropping malformed triple %r in '%s'", item, doc.doc_id)
                continue
            head, relation, tail = (str(p or "").strip() for p in parts)
            if not head or not relation or not tail:
                logger.warning("dropping incomplete triple %r in '%s'", item, doc.doc_id)
                continue
            triples.append((head, relation, tail))
            # The model sometimes omits triple endpoints from the entity list.
            for name in (head, tail):
                if name not in entities:
                    entities.append(name)
        return entities, triples

    # -- retrieval stage ----------------------------------------------------

    def extract_query_entities(self, question: str) -> list[str]:
        """Entities the question pivots on; never empty."""
        prompt = self.templates["query_entities"].render(question=question)
        names: list[str] = []
        try:
            obj = self._call_json("query_entities", prompt)
            seen: set[str] = set()
            for item in obj.get("entities") or []:
                name = str(item).strip()
                key = name.lower()
                if name and key not in seen:
                    seen.add(key)
                    names.append(name)
        except OutputParseError:
            logger.warning("query entity extraction unparseable, falling back to question")
        if not names:
            logger.warning("no query entities extracted, using the full question")
            names = [question.strip()]
        return names

    def track_paths(
        self,
        question: str,
        candidates: list[str],
        history_chain: str = "",
    ) -> TrackerOutput:
        """One tracking decision over rendered candidate paths.

        Candidates are numbered from 1 in the prompt; returned ids are
        0-based indices into ``candidates``. Unparseable output after all
        retries degrades to a conservative fallback: every candidate valid,
        tracking continues, and the question becomes the next requirement.
        """
        if not candidates:
            raise GeneratorError("track_paths needs a non-empty candidate list")
        numbered = "\n".join(f"{i + 1}. {c}" for i, c in enumerate(candidates))
        chain_block = ""
        if self.include_chain and history_chain.strip():
            chain_block = f"Reasoning so far:\n{history_chain.strip()}\n\n"
        template_name = "path_tracking_oneshot" if self.mode == "one_shot" else "path_tracking"
        prompt = self.templates[template_name].render(
            question=question, candidates=numbered, chain_block=chain_block
        )
        try:
            obj = self._call_json("path_tracking", prompt)
        except OutputParseError:
            logger.warning("tracker output unparseable after retries, degraded fallback")
            return TrackerOutput(
                chain=history_chain,
                valid_path_ids=list(range(len(candidates))),
                expand_path_ids=[],
                expansion_requirement=question,
                continue_flag=True,
                degraded=True,
            )

        valid = _coerce_ids(obj.get("valid"), len(candidates), "valid")
        expand = _coerce_ids(obj.get("expand"), len(candidates), "expand")
        continue_flag = _coerce_flag(obj.get("continue"))
        requirement = str(obj.get("requirement") or "").strip()
        if continue_flag and not requirement:
            requirement = question
        return TrackerOutput(
            chain=str(obj.get("chain") or "").strip(),
            valid_path_ids=valid,
            expand_path_ids=expand,
            expansion_requirement=requirement,
            continue_flag=continue_flag,
        )

    # -- answering stage ----------------------------------------------------

    def answer(self, question: str, contexts: list[Document]) -> str:
        """Short answer grounded in the given passages."""
        if not contexts:
            raise GeneratorError("answer needs at least one context document")
        rendered = "\n\n".join(
            f"[{i + 1}] {d.title}\n{d.text}" if d.title else f"[{i + 1}] {d.text}"
            for i, d in enumerate(contexts)
        )
        prompt = self.templates["qa"].render(question=question, contexts=rendered)
        text = self._call("qa", [{"role": "user", "content": prompt}])
        return text.strip()
