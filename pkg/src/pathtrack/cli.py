"""Command line client for the engine service.

The CLI is a thin client: every subcommand marshals its flags into the
service request model and sends it through a transport. With ``--server``
(or PATHTRACK_SERVER) set, requests go to a running service over HTTP;
otherwise an engine is built in process from the resolved configuration and
the same handler functions run locally.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click
import httpx

from . import __version__
from .config import ConfigError, resolve_config
from .service import handlers, schemas

logger = logging.getLogger(__name__)

HANDLERS = {
    "index": (handlers.handle_index, schemas.IndexRequest),
    "retrieve": (handlers.handle_retrieve, schemas.RetrieveRequest),
    "answer": (handlers.handle_answer, schemas.AnswerRequest),
    "eval": (handlers.handle_eval, schemas.EvalRequest),
    "inspect": (handlers.handle_inspect, schemas.InspectRequest),
}


class Client:
    """Dispatches requests to a remote service or an in-process engine."""

    def __init__(self, config_file: str | None, server: str | None) -> None:
        self.config_file = config_file
        self.server = server.rstrip("/") if server else None
        self._engine = None

    def _local_engine(self):
        if self._engine is None:
            from .engine import Engine

            try:
                config = resolve_config(config_file=self.config_file)
                self._engine = Engine(config)
            except Exception as exc:
                raise click.ClickException(str(exc)) from exc
        return self._engine

    def call(self, endpoint: str, payload) -> dict:
        if self.server:
            try:
                resp = httpx.post(
                    f"{self.server}/{endpoint}",
                    json=payload.model_dump(),
                    timeout=600.0,
                )
            except httpx.HTTPError as exc:
                raise click.ClickException(f"service unreachable: {exc}") from exc
            if resp.status_code != 200:
                try:
                    detail = resp.json().get("detail", resp.text)
                except ValueError:
                    detail = resp.text
                raise click.ClickException(f"service error {resp.status_code}: {detail}")
            return resp.json()
        handler, _ = HANDLERS[endpoint]
        try:
            return handler(self._local_engine(), payload).model_dump()
        except handlers.CLIENT_ERRORS as exc:
            raise click.ClickException(str(exc)) from exc


def _echo_json(payload: dict) -> None:
    click.echo(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))


def _parse_ks(value: str) -> list[int]:
    try:
        ks = [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.UsageError(f"--k expects comma-separated integers, got {value!r}")
    if not ks or any(k < 1 for k in ks):
        raise click.UsageError(f"--k values must be positive integers, got {value!r}")
    return ks


@click.group()
@click.version_option(version=__version__, prog_name="pathtrack")
@click.option(
    "--config",
    "config_file",
    type=click.Path(dir_okay=False),
    default=None,
    envvar="PATHTRACK_CONFIG",
    help="Config file with 'key = value' lines.",
)
@click.option(
    "--server",
    default=None,
    envvar="PATHTRACK_SERVER",
    help="URL of a running service; default runs the engine in process.",
)
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
@click.pass_context
def main(ctx: click.Context, config_file: str | None, server: str | None, verbose: bool):
    """Knowledge-graph path tracking retrieval engine."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    ctx.obj = Client(config_file, server)


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--coref-threshold", type=float, default=None)
@click.option("--coref-k", type=int, default=None)
@click.option("--max-chunk-tokens", type=int, default=None)
@click.option("--concurrency", type=int, default=None)
@click.pass_obj
def index(client: Client, corpus_path, out_path, coref_threshold, coref_k, max_chunk_tokens, concurrency):
    """Build a knowledge-graph index from a JSONL corpus."""
    req = schemas.IndexRequest(
        corpus_path=corpus_path,
        out_path=out_path,
        coref_threshold=coref_threshold,
        coref_k=coref_k,
        max_chunk_tokens=max_chunk_tokens,
        concurrency=concurrency,
    )
    stats = client.call("index", req)
    click.echo(f"Index written to {stats['out_path']}")
    for label, key in (
        ("Documents", "documents"),
        ("Entities", "entities"),
        ("Relations", "relations"),
        ("Triples", "triples"),
        ("Skipped", "skipped_documents"),
    ):
        click.echo(f"  {label:<10} {stats[key]}")


def _query_options(fn):
    fn = click.option("--index", "index_path", required=True, type=click.Path(dir_okay=False))(fn)
    fn = click.option("--question", required=True)(fn)
    fn = click.option("--max-hops", type=int, default=None)(fn)
    fn = click.option("--prune-k", type=int, default=None, help="0 disables pruning.")(fn)
    fn = click.option("--limit", type=int, default=None)(fn)
    fn = click.option("--second-stage-k", type=int, default=None)(fn)
    fn = click.option(
        "--merge-order",
        type=click.Choice(["path_first", "score_interleave"]),
        default=None,
    )(fn)
    fn = click.option(
        "--completion/--no-completion", "use_completion", default=None,
        help="Toggle the second retrieval stage.",
    )(fn)
    fn = click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None)(fn)
    return fn


@main.command()
@_query_options
@click.pass_obj
def retrieve(client: Client, index_path, question, max_hops, prune_k, limit,
             second_stage_k, merge_order, use_completion, trace_path):
    """Track paths for one question and print the ranked documents."""
    req = schemas.RetrieveRequest(
        index_path=index_path,
        question=question,
        max_hops=max_hops,
        prune_k=prune_k,
        limit=limit,
        second_stage_k=second_stage_k,
        merge_order=merge_order,
        use_completion=use_completion,
        trace_path=trace_path,
    )
    _echo_json(client.call("retrieve", req))


@main.command()
@_query_options
@click.option("--qa-docs", type=int, default=None, help="Contexts passed to the answerer.")
@click.pass_obj
def answer(client: Client, index_path, question, max_hops, prune_k, limit,
           second_stage_k, merge_order, use_completion, trace_path, qa_docs):
    """Retrieve and then answer one question."""
    req = schemas.AnswerRequest(
        index_path=index_path,
        question=question,
        max_hops=max_hops,
        prune_k=prune_k,
        limit=limit,
        second_stage_k=second_stage_k,
        merge_order=merge_order,
        use_completion=use_completion,
        trace_path=trace_path,
        qa_docs=qa_docs,
    )
    _echo_json(client.call("answer", req))


@main.command(name="eval")
@click.option("--index", "index_path", required=True, type=click.Path(dir_okay=False))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(dir_okay=False))
@click.option("--mode", type=click.Choice(["retrieval", "qa"]), default="retrieval")
@click.option("--k", "ks", default="2,5,10", help="Comma-separated recall cutoffs.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.option("--max-hops", type=int, default=None)
@click.option("--prune-k", type=int, default=None)
@click.option("--limit", type=int, default=None)
@click.option("--completion/--no-completion", "use_completion", default=None)
@click.option("--concurrency", type=int, default=None)
@click.pass_obj
def eval_cmd(client: Client, index_path, corpus_path, mode, ks, out_path,
             max_hops, prune_k, limit, use_completion, concurrency):
    """Score every question record in a corpus against an index."""
    req = schemas.EvalRequest(
        index_path=index_path,
        corpus_path=corpus_path,
        mode=mode,
        k=_parse_ks(ks),
        out_path=out_path,
        max_hops=max_hops,
        prune_k=prune_k,
        limit=limit,
        use_completion=use_completion,
        concurrency=concurrency,
    )
    payload = client.call("eval", req)
    _echo_json(payload["report"])


@main.command()
@click.argument("trace_path", type=click.Path(dir_okay=False))
@click.pass_obj
def inspect(client: Client, trace_path):
    """Pretty-print a retrieval trace hop by hop."""
    payload = client.call("inspect", schemas.InspectRequest(trace_path=trace_path))
    trace = payload["trace"]
    tracking = trace.get("tracking", {})
    click.echo(f"Trace {trace.get('trace_ref', '?')}")
    click.echo(f"Question: {tracking.get('question', '')}")
    click.echo(f"Stop: {tracking.get('stop_reason', '?')}  hops used: {tracking.get('hops_used', 0)}")
    click.echo(f"Query entities: {', '.join(tracking.get('query_entities', []))}")
    click.echo(f"Seeds: {', '.join(tracking.get('seeds', []))}")
    click.echo()
    header = f"{'hop':<4} {'candidates':<11} {'kept':<5} {'valid':<6} {'expand':<7} {'cont':<5} goal"
    click.echo(header)
    click.echo("-" * len(header))
    for hop in tracking.get("hops", []):
        tracker_out = hop.get("tracker", {})
        goal = hop.get("prune_goal", "")
        if len(goal) > 48:
            goal = goal[:45] + "..."
        click.echo(
            f"{hop.get('hop', '?'):<4} "
            f"{len(hop.get('candidate_ids', [])):<11} "
            f"{len(hop.get('kept', [])):<5} "
            f"{len(tracker_out.get('valid', [])):<6} "
            f"{len(tracker_out.get('expand', [])):<7} "
            f"{'yes' if tracker_out.get('continue') else 'no':<5} "
            f"{goal}"
        )
    final = tracking.get("final_valid", [])
    click.echo()
    click.echo(f"Final valid paths ({len(final)}):")
    for i, item in enumerate(final, start=1):
        click.echo(f"  {i}. {item.get('render', '')}")
    ranked = trace.get("retrieval", {}).get("ranked", [])
    click.echo()
    click.echo(f"Ranked documents ({len(ranked)}):")
    for i, doc in enumerate(ranked, start=1):
        click.echo(
            f"  {i}. {doc.get('doc_id', '?')}  {doc.get('provenance', '?')}"
            f"  {doc.get('score', 0.0):.4f}"
        )


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.pass_obj
def serve(client: Client, host: str, port: int):
    """Run the HTTP service."""
    import uvicorn

    from .engine import Engine
    from .service.app import create_app

    try:
        config = resolve_config(config_file=client.config_file)
        app = create_app(engine=Engine(config))
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
