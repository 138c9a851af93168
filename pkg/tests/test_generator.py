"""Prompt templates, backends, reply parsing, and token accounting."""

import json

import httpx
import pytest

from pathtrack.corpus import Document
from pathtrack.generator import (
    REFORMAT_REMINDER,
    BackendError,
    GeneratorError,
    Generator,
    GraphExtractionError,
    OpenAIChatBackend,
    OutputParseError,
    PromptTemplate,
    ScriptedBackend,
    TokenLedger,
    load_templates,
    parse_json_block,
)


class TestPromptTemplate:
    def test_render_fills_placeholders(self):
        tpl = PromptTemplate("t", "Q: {question}\nA:")
        assert tpl.render(question="why?") == "Q: why?\nA:"

    def test_missing_field_rejected(self):
        tpl = PromptTemplate("t", "{a} {b}")
        with pytest.raises(GeneratorError, match="missing values.*'b'"):
            tpl.render(a="x")

    def test_unknown_field_rejected(self):
        tpl = PromptTemplate("t", "{a}")
        with pytest.raises(GeneratorError, match="no placeholder.*'b'"):
            tpl.render(a="x", b="y")

    def test_literal_json_braces_survive(self):
        tpl = PromptTemplate("t", 'Reply with {"entities": []} for {question}')
        out = tpl.render(question="q")
        assert '{"entities": []}' in out

    def test_placeholders_found(self):
        tpl = PromptTemplate("t", "{alpha} and {beta_2} but not {Upper} or {1bad}")
        assert tpl.placeholders() == {"alpha", "beta_2"}

    def test_default_templates_load(self):
        templates = load_templates()
        assert set(templates) == {
            "openie",
            "query_entities",
            "path_tracking",
            "path_tracking_oneshot",
            "qa",
        }
        assert templates["openie"].placeholders() == {"title", "text"}
        assert templates["query_entities"].placeholders() == {"question"}
        assert templates["path_tracking"].placeholders() == {
            "question",
            "candidates",
            "chain_block",
        }
        assert templates["qa"].placeholders() == {"question", "contexts"}
        assert templates["path_tracking_oneshot"].mode == "one_shot"

    def test_missing_template_file(self, tmp_path):
        with pytest.raises(GeneratorError, match="not found"):
            load_templates(tmp_path)


class TestParseJsonBlock:
    def test_bare_object(self):
        assert parse_json_block('{"a": 1}') == {"a": 1}

    def test_fenced_object(self):
        text = 'Sure!\n```json\n{"a": [1, 2]}\n```\nDone.'
        assert parse_json_block(text) == {"a": [1, 2]}

    def test_fence_without_language(self):
        assert parse_json_block('```\n{"x": "y"}\n```') == {"x": "y"}

    def test_prose_prefix_and_suffix(self):
        text = 'Here you go: {"a": {"b": 2}} hope that helps'
        assert parse_json_block(text) == {"a": {"b": 2}}

    def test_braces_inside_strings(self):
        text = '{"chain": "path {x} -> {y}", "valid": []}'
        assert parse_json_block(text) == {"chain": "path {x} -> {y}", "valid": []}

    def test_escaped_quotes_inside_strings(self):
        text = '{"chain": "say \\"hi\\" {", "valid": [1]}'
        assert parse_json_block(text) == {"chain": 'say "hi" {', "valid": [1]}

    def test_no_object(self):
        with pytest.raises(OutputParseError, match="no JSON object"):
            parse_json_block("I cannot answer that.")

    def test_unbalanced(self):
        with pytest.raises(OutputParseError, match="unbalanced"):
            parse_json_block('{"a": 1')

    def test_invalid_json(self):
        with pytest.raises(OutputParseError, match="invalid JSON"):
            parse_json_block("{'a': 1}")

    def test_array_reply_rejected(self):
        with pytest.raises(OutputParseError):
            parse_json_block("[1, 2]")


class TestTokenLedger:
    def test_stage_accumulation(self):
        ledger = TokenLedger()
        ledger.add("indexing", 10, 5)
        ledger.add("indexing", 1, 1)
        ledger.add("qa", 7, 3)
        snap = ledger.snapshot()
        assert snap["stages"]["indexing"] == {
            "prompt_tokens": 11,
            "completion_tokens": 6,
            "calls": 2,
        }
        assert snap["stages"]["retrieval"]["calls"] == 0
        assert snap["prompt_tokens"] == 18
        assert snap["completion_tokens"] == 9
        assert snap["calls"] == 3

    def test_unknown_stage(self):
        with pytest.raises(GeneratorError, match="unknown ledger stage"):
            TokenLedger().add("mystery", 1, 1)

    def test_negative_rejected(self):
        with pytest.raises(GeneratorError, match="non-negative"):
            TokenLedger().add("qa", -1, 0)

    def test_totals_monotone(self):
        ledger = TokenLedger()
        last = 0
        for i in range(5):
            ledger.add("retrieval", i, i)
            total = ledger.prompt_tokens + ledger.completion_tokens
            assert total >= last
            last = total


class TestScriptedBackend:
    def test_fifo_per_call_type(self):
        backend = ScriptedBackend({"qa": ["first", "second"]})
        assert backend.complete([{"role": "user", "content": "x"}], "qa").text == "first"
        assert backend.complete([{"role": "user", "content": "x"}], "qa").text == "second"

    def test_exhausted_queue_raises(self):
        backend = ScriptedBackend({"qa": ["only"]})
        backend.complete([{"role": "user", "content": "x"}], "qa")
        with pytest.raises(BackendError, match="no response left.*'qa'"):
            backend.complete([{"role": "user", "content": "x"}], "qa")

    def test_callable_entries_see_messages(self):
        backend = ScriptedBackend()
        backend.push("qa", lambda messages: messages[0]["content"].upper())
        got = backend.complete([{"role": "user", "content": "hi"}], "qa")
        assert got.text == "HI"

    def test_handler_used_when_queue_empty(self):
        backend = ScriptedBackend({"qa": ["scripted"]})
        backend.set_handler("qa", lambda messages: "default")
        assert backend.complete([{"role": "user", "content": "x"}], "qa").text == "scripted"
        assert backend.complete([{"role": "user", "content": "x"}], "qa").text == "default"

    def test_call_log_records_last_message(self):
        backend = ScriptedBackend({"qa": ["a"]})
        backend.complete(
            [{"role": "user", "content": "p"}, {"role": "user", "content": "q"}], "qa"
        )
        assert backend.call_log == [("qa", "q")]

    def test_from_file(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps({"qa": ["ans one", "ans two"]}))
        backend = ScriptedBackend.from_file(path)
        assert backend.complete([{"role": "user", "content": "x"}], "qa").text == "ans one"

    def test_from_file_missing(self, tmp_path):
        with pytest.raises(BackendError, match="cannot load"):
            ScriptedBackend.from_file(tmp_path / "absent.json")

    def test_from_file_bad_shape(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps({"qa": "not a list"}))
        with pytest.raises(BackendError, match="list of strings"):
            ScriptedBackend.from_file(path)

    def test_from_file_non_object(self, tmp_path):
        path = tmp_path / "script.json"
        path.write_text(json.dumps([1, 2]))
        with pytest.raises(BackendError, match="JSON object"):
            ScriptedBackend.from_file(path)


def _openai_backend(handler, **kwargs):
    client = httpx.Client(transport=httpx.MockTransport(handler))
    kwargs.setdefault("api_key", "sk-test")
    kwargs.setdefault("base_url", "http://llm.test/v1")
    return OpenAIChatBackend(client=client, **kwargs)


def _chat_response(text, usage=None):
    body = {"choices": [{"message": {"content": text}}]}
    if usage:
        body["usage"] = usage
    return httpx.Response(200, json=body)


class TestOpenAIChatBackend:
    def test_payload_shape_and_usage(self):
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["body"] = json.loads(request.content)
            seen["auth"] = request.headers.get("authorization")
            return _chat_response("ok", {"prompt_tokens": 12, "completion_tokens": 3})

        backend = _openai_backend(handler, model="test-model")
        got = backend.complete([{"role": "user", "content": "hello"}], "qa")
        assert got.text == "ok"
        assert got.prompt_tokens == 12
        assert got.completion_tokens == 3
        assert seen["url"] == "http://llm.test/v1/chat/completions"
        assert seen["auth"] == "Bearer sk-test"
        assert seen["body"]["model"] == "test-model"
        assert seen["body"]["temperature"] == 0
        assert seen["body"]["messages"] == [{"role": "user", "content": "hello"}]

    def test_usage_optional(self):
        backend = _openai_backend(lambda request: _chat_response("ok"))
        got = backend.complete([{"role": "user", "content": "x"}], "qa")
        assert got.prompt_tokens is None and got.completion_tokens is None

    def test_missing_api_key(self, monkeypatch):
        monkeypatch.delenv("PATHTRACK_GENERATOR_API_KEY", raising=False)
        with pytest.raises(BackendError, match="PATHTRACK_GENERATOR_API_KEY"):
            OpenAIChatBackend(base_url="http://llm.test/v1")

    def test_retries_5xx(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            if calls["n"] < 3:
                return httpx.Response(500, text="boom")
            return _chat_response("recovered")

        backend = _openai_backend(handler, retries=2)
        assert backend.complete([{"role": "user", "content": "x"}], "qa").text == "recovered"
        assert calls["n"] == 3

    def test_gives_up_after_retries(self):
        backend = _openai_backend(lambda request: httpx.Response(429, text="slow down"), retries=1)
        with pytest.raises(BackendError, match="429"):
            backend.complete([{"role": "user", "content": "x"}], "qa")

    def test_4xx_not_retried(self):
        calls = {"n": 0}

        def handler(request):
            calls["n"] += 1
            return httpx.Response(400, text="bad request")

        backend = _openai_backend(handler)
        with pytest.raises(BackendError, match="400"):
            backend.complete([{"role": "user", "content": "x"}], "qa")
        assert calls["n"] == 1

    def test_malformed_body(self):
        backend = _openai_backend(lambda request: httpx.Response(200, json={"weird": True}))
        with pytest.raises(BackendError, match="malformed body"):
            backend.complete([{"role": "user", "content": "x"}], "qa")

    def test_env_configuration(self, monkeypatch):
        monkeypatch.setenv("PATHTRACK_GENERATOR_BASE_URL", "http://env.test/v2/")
        monkeypatch.setenv("PATHTRACK_GENERATOR_API_KEY", "sk-env")
        monkeypatch.setenv("PATHTRACK_GENERATOR_MODEL", "env-model")
        seen = {}

        def handler(request):
            seen["url"] = str(request.url)
            seen["body"] = json.loads(request.content)
            return _chat_response("ok")

        client = httpx.Client(transport=httpx.MockTransport(handler))
        backend = OpenAIChatBackend(client=client)
        backend.complete([{"role": "user", "content": "x"}], "qa")
        assert seen["url"] == "http://env.test/v2/chat/completions"
        assert seen["body"]["model"] == "env-model"


def make_generator(backend, **kwargs):
    kwargs.setdefault("ledger", TokenLedger())
    return Generator(backend, **kwargs)


DOC = Document.make("d1", "Andy Rubin", "Andy Rubin created Android.")


class TestExtractGraph:
    def test_happy_path(self):
        backend = ScriptedBackend(
            {
                "openie": [
                    json.dumps(
                        {
                            "entities": ["Andy Rubin", "Android"],
                            "triples": [["Andy Rubin", "created", "Android"]],
                        }
                    )
                ]
            }
        )
        entities, triples = make_generator(backend).extract_graph(DOC)
        assert entities == ["Andy Rubin", "Android"]
        assert triples == [("Andy Rubin", "created", "Android")]

    def test_appends_missing_triple_endpoints(self):
        backend = ScriptedBackend(
            {
                "openie": [
                    json.dumps(
                        {
                            "entities": ["Andy Rubin"],
                            "triples": [["Andy Rubin", "created", "Android"]],
                        }
                    )
                ]
            }
        )
        entities, _ = make_generator(backend).extract_graph(DOC)
        assert entities == ["Andy Rubin", "Android"]

    def test_accepts_dict_triples(self):
        backend = ScriptedBackend(
            {
                "openie": [
                    json.dumps(
                        {
                            "entities": [],
                            "triples": [
                                {"head": "A", "relation": "r", "tail": "B"}
                            ],
                        }
                    )
                ]
            }
        )
        entities, triples = make_generator(backend).extract_graph(DOC)
        assert triples == [("A", "r", "B")]
        assert entities == ["A", "B"]

    def test_drops_malformed_triples(self):
        backend = ScriptedBackend(
            {
                "openie": [
                    json.dumps(
                        {
                            "entities": ["X"],
                            "triples": [
                                ["only", "two"],
                                ["A", "", "B"],
                                "garbage",
                                ["H", "rel", "T"],
                            ],
                        }
                    )
                ]
            }
        )
        _, triples = make_generator(backend).extract_graph(DOC)
        assert triples == [("H", "rel", "T")]

    def test_retry_with_reminder(self):
        backend = ScriptedBackend(
            {
                "openie": [
                    "no json here",
                    json.dumps({"entities": ["A"], "triples": []}),
                ]
            }
        )
        gen = make_generator(backend)
        entities, _ = gen.extract_graph(DOC)
        assert entities == ["A"]
        # The retry carries the reformat reminder as the newest message.
        assert backend.call_log[-1][1] == REFORMAT_REMINDER
        assert gen.ledger.snapshot()["stages"]["indexing"]["calls"] == 2

    def test_fails_after_all_retries(self):
        backend = ScriptedBackend({"openie": ["junk", "junk", "junk"]})
        gen = make_generator(backend, retries=2)
        with pytest.raises(GraphExtractionError, match="'d1'"):
            gen.extract_graph(DOC)
        assert gen.ledger.snapshot()["stages"]["indexing"]["calls"] == 3


class TestExtractQueryEntities:
    def test_dedup_case_insensitive_keeps_first_spelling(self):
        backend = ScriptedBackend(
            {
                "query_entities": [
                    json.dumps({"entities": ["Android", "android", "Andy Rubin"]})
                ]
            }
        )
        got = make_generator(backend).extract_query_entities("who made android?")
        assert got == ["Android", "Andy Rubin"]

    def test_empty_falls_back_to_question(self):
        backend = ScriptedBackend({"query_entities": [json.dumps({"entities": []})]})
        got = make_generator(backend).extract_query_entities(" who? ")
        assert got == ["who?"]

    def test_unparseable_falls_back_to_question(self):
        backend = ScriptedBackend({"query_entities": ["nope"] * 3})
        got = make_generator(backend).extract_query_entities("who made android?")
        assert got == ["who made android?"]
        # Fallback is charged to the retrieval stage, not silently free.
        assert backend.call_log[0][0] == "query_entities"


class TestTrackPaths:
    def _reply(self, **kwargs):
        base = {
            "chain": "step one",
            "valid": [1],
            "expand": [2],
            "requirement": "find the founder",
            "continue": 1,
        }
        base.update(kwargs)
        return json.dumps(base)

    def test_ids_are_one_based_in_reply(self):
        backend = ScriptedBackend({"path_tracking": [self._reply()]})
        out = make_generator(backend).track_paths("q?", ["p1", "p2", "p3"])
        assert out.valid_path_ids == [0]
        assert out.expand_path_ids == [1]
        assert out.continue_flag is True
        assert out.degraded is False

    def test_out_of_range_ids_dropped(self):
        backend = ScriptedBackend(
            {"path_tracking": [self._reply(valid=[0, 1, 7, "x"], expand=[3, 3])]}
        )
        out = make_generator(backend).track_paths("q?", ["p1", "p2", "p3"])
        assert out.valid_path_ids == [0]
        assert out.expand_path_ids == [2]

    def test_candidates_numbered_from_one_in_prompt(self):
        backend = ScriptedBackend({"path_tracking": [self._reply()]})
        make_generator(backend).track_paths("q?", ["alpha", "beta"])
        prompt = backend.call_log[0][1]
        assert "1. alpha" in prompt
        assert "2. beta" in prompt

    def test_chain_block_included_when_history_present(self):
        backend = ScriptedBackend({"path_tracking": [self._reply(), self._reply()]})
        gen = make_generator(backend)
        gen.track_paths("q?", ["p"], history_chain="so far so good")
        assert "Reasoning so far:\nso far so good" in backend.call_log[0][1]
        gen.track_paths("q?", ["p"], history_chain="")
        assert "Reasoning so far" not in backend.call_log[1][1]

    def test_chain_block_suppressed_when_disabled(self):
        backend = ScriptedBackend({"path_tracking": [self._reply()]})
        gen = make_generator(backend, include_chain=False)
        gen.track_paths("q?", ["p"], history_chain="history")
        assert "Reasoning so far" not in backend.call_log[0][1]

    def test_one_shot_mode_uses_worked_example(self):
        backend = ScriptedBackend({"path_tracking": [self._reply()]})
        gen = make_generator(backend, mode="one_shot")
        gen.track_paths("q?", ["p"])
        assert "Worked example" in backend.call_log[0][1]

    def test_zero_shot_mode_has_no_worked_example(self):
        backend = ScriptedBackend({"path_tracking": [self._reply()]})
        make_generator(backend).track_paths("q?", ["p"])
        assert "Worked example" not in backend.call_log[0][1]

    def test_requirement_falls_back_to_question(self):
        backend = ScriptedBackend(
            {"path_tracking": [self._reply(requirement="", **{"continue": 1})]}
        )
        out = make_generator(backend).track_paths("the question?", ["p"])
        assert out.expansion_requirement == "the question?"

    def test_stop_keeps_empty_requirement(self):
        backend = ScriptedBackend(
            {"path_tracking": [self._reply(requirement="", **{"continue": 0})]}
        )
        out = make_generator(backend).track_paths("q?", ["p"])
        assert out.continue_flag is False
        assert out.expansion_requirement == ""

    def test_continue_flag_coercions(self):
        for raw, want in [(0, False), (1, True), ("true", True), ("no", False), (None, False)]:
            backend = ScriptedBackend(
                {"path_tracking": [self._reply(**{"continue": raw})]}
            )
            out = make_generator(backend).track_paths("q?", ["p"])
            assert out.continue_flag is want, raw

    def test_degraded_fallback_after_retries(self):
        backend = ScriptedBackend({"path_tracking": ["junk"] * 3})
        gen = make_generator(backend, retries=2)
        out = gen.track_paths("q?", ["p1", "p2"], history_chain="kept")
        assert out.degraded is True
        assert out.valid_path_ids == [0, 1]
        assert out.expand_path_ids == []
        assert out.expansion_requirement == "q?"
        assert out.continue_flag is True
        assert out.chain == "kept"

    def test_empty_candidates_rejected(self):
        backend = ScriptedBackend()
        with pytest.raises(GeneratorError, match="non-empty candidate"):
            make_generator(backend).track_paths("q?", [])


class TestAnswer:
    def test_renders_numbered_contexts(self):
        backend = ScriptedBackend({"qa": ["  Nothing  "]})
        gen = make_generator(backend)
        docs = [
            Document.make("d1", "Title One", "text one"),
            Document.make("d2", "", "text two"),
        ]
        assert gen.answer("q?", docs) == "Nothing"
        prompt = backend.call_log[0][1]
        assert "[1] Title One\ntext one" in prompt
        assert "[2] text two" in prompt

    def test_requires_contexts(self):
        with pytest.raises(GeneratorError, match="at least one context"):
            make_generator(ScriptedBackend()).answer("q?", [])

    def test_qa_stage_charged(self):
        gen = make_generator(ScriptedBackend({"qa": ["x"]}))
        gen.answer("q?", [DOC])
        snap = gen.ledger.snapshot()
        assert snap["stages"]["qa"]["calls"] == 1
        assert snap["stages"]["qa"]["prompt_tokens"] > 0
        assert snap["stages"]["retrieval"]["calls"] == 0


class TestLedgerIntegration:
    def test_estimated_usage_when_backend_reports_none(self):
        backend = ScriptedBackend({"qa": ["four words exactly here"]})
        gen = make_generator(backend)
        gen.answer("q?", [DOC])
        snap = gen.ledger.snapshot()
        assert snap["stages"]["qa"]["completion_tokens"] == 4

    def test_backend_usage_preferred(self):
        class UsageBackend:
            def complete(self, messages, call_type):
                from pathtrack.generator import CompletionResult

                return CompletionResult("hi", prompt_tokens=100, completion_tokens=50)

        gen = make_generator(UsageBackend())
        gen.answer("q?", [DOC])
        snap = gen.ledger.snapshot()
        assert snap["stages"]["qa"]["prompt_tokens"] == 100
        assert snap["stages"]["qa"]["completion_tokens"] == 50

    def test_with_ledger_swaps_accounting(self):
        gen = make_generator(ScriptedBackend({"qa": ["a", "b"]}))
        fresh = TokenLedger()
        clone = gen.with_ledger(fresh)
        clone.answer("q?", [DOC])
        assert fresh.calls == 1
        assert gen.ledger.calls == 0
        assert clone.backend is gen.backend

    def test_unknown_prompt_mode_rejected(self):
        with pytest.raises(GeneratorError, match="unknown prompt mode"):
            Generator(ScriptedBackend(), mode="few_shot")
