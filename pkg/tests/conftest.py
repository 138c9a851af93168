"""Shared fixtures: tiny corpora, scripted generators, reusable indexes."""

from __future__ import annotations

import json
import re

import pytest

_CRITERION_RE = re.compile(r"test_criterion_(\d+)_([a-z0-9_]+)")

from pathtrack.corpus import Corpus, load_corpus
from pathtrack.embedding import HashEmbedder
from pathtrack.generator import Generator, ScriptedBackend, TokenLedger

TINY_DOCS = [
    {"id": "d1", "title": "Andy Rubin", "text": "Andy Rubin created Android at Danger."},
    {"id": "d2", "title": "Essential", "text": "Essential Products was founded by Andy Rubin."},
    {"id": "d3", "title": "Nothing", "text": "Nothing acquired Essential Products."},
]
TINY_RECORDS = [
    {
        "id": "q1",
        "question": "Which company acquired the startup of the Android creator?",
        "answer": "Nothing",
        "supporting_ids": ["d2", "d3"],
    }
]

TINY_EXTRACTIONS = {
    "d1": {
        "entities": ["Andy Rubin", "Android", "Danger"],
        "triples": [
            ["Andy Rubin", "created", "Android"],
            ["Andy Rubin", "worked at", "Danger"],
        ],
    },
    "d2": {
        "entities": ["Essential Products", "Andy Rubin"],
        "triples": [["Essential Products", "founded by", "Andy Rubin"]],
    },
    "d3": {
        "entities": ["Nothing", "Essential Products"],
        "triples": [["Nothing", "acquired", "Essential Products"]],
    },
}


def write_corpus_file(path, docs, records=()):
    lines = [json.dumps(doc) for doc in docs] + [json.dumps(rec) for rec in records]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def pytest_terminal_summary(terminalreporter):
    """Print one PASS/FAIL line per acceptance criterion that ran."""
    results = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, ()):
            match = _CRITERION_RE.search(getattr(report, "nodeid", ""))
            if match:
                number = int(match.group(1))
                label = match.group(2).replace("_", " ")
                results[number] = (label, outcome == "passed")
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        label, passed = results[number]
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"ACCEPTANCE {number} {label}: {verdict}")


@pytest.fixture
def tiny_corpus_path(tmp_path):
    return write_corpus_file(tmp_path / "corpus.jsonl", TINY_DOCS, TINY_RECORDS)


@pytest.fixture
def tiny_corpus(tiny_corpus_path) -> Corpus:
    return load_corpus(tiny_corpus_path)


@pytest.fixture
def embedder() -> HashEmbedder:
    return HashEmbedder(dim=256)


@pytest.fixture
def small_embedder() -> HashEmbedder:
    return HashEmbedder(dim=64)


def scripted_openie_backend(extractions=TINY_EXTRACTIONS) -> ScriptedBackend:
    """Backend whose openie handler keys off the passage text."""
    backend = ScriptedBackend()
    by_text = {}
    for doc in TINY_DOCS:
        if doc["id"] in extractions:
            by_text[doc["text"]] = extractions[doc["id"]]

    def handler(messages):
        prompt = messages[0]["content"]
        for text, payload in by_text.items():
            if text in prompt:
                return json.dumps(payload)
        return json.dumps({"entities": [], "triples": []})

    backend.set_handler("openie", handler)
    return backend


@pytest.fixture
def tiny_index(tiny_corpus, embedder):
    from pathtrack.indexer import build_index

    generator = Generator(scripted_openie_backend(), ledger=TokenLedger())
    return build_index(tiny_corpus, generator, embedder)
