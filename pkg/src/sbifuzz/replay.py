"""Re-run a recorded finding and judge whether the behavior persists.

A replay file carries the provenance of every step in the minimal
sequence; requests are rebuilt byte-for-byte, except that handle-typed
path values are rebound to the ids the fresh run hands out.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

from .detect import BugClass
from .engine import (
    ExecutedExchange,
    HttpTransport,
    Provenance,
    assemble_request,
    extract_handles,
    send_request,
)
from .grammar import Grammar
from .tokens import SignedToken, TokenRequest, acquire_token


@dataclass
class ReplayStep:
    template_id: str
    status: int
    exchange: ExecutedExchange


@dataclass
class ReplayResult:
    reproduced: bool
    expected: str
    observed_status: int
    steps: list[ReplayStep]

    @property
    def detail(self) -> str:
        verdict = "reproduced" if self.reproduced else "not reproduced"
        return f"{verdict}: expected {self.expected}, observed {self.observed_status}"


def reproduction_rule(bug_class: str, recorded_status: int):
    """What the final replayed status must look like, per bug class."""
    if bug_class in (
        BugClass.UNHANDLED_ERROR_500.value,
        BugClass.STATUS_MAPPING_VIOLATION.value,
    ):
        return "status 500", lambda s: s == 500
    if bug_class == BugClass.AUTHZ_SCOPE_BYPASS.value:
        return "a 2xx acceptance", lambda s: 200 <= s < 300
    if bug_class == BugClass.UNDECLARED_STATUS.value:
        return f"status {recorded_status}", lambda s: s == recorded_status
    raise ValueError(f"unknown bug class {bug_class!r}")


def replay_bug(
    document: dict,
    grammar: Grammar,
    transport: HttpTransport,
    token_provider_factory: Callable[[str | None, str | None], Callable[[], SignedToken] | None]
    | None = None,
    sink=None,
) -> ReplayResult:
    """Execute one replay document against a live target.

    The token is minted for the recorded scope and audience, so a
    wrong-scope acceptance is retried with the same wrong scope.  Every
    step of a multi-step sequence shares that provider; recorded
    sequences only chain steps within one service.
    """
    provider = None
    if token_provider_factory is not None:
        provider = token_provider_factory(
            document.get("token_scope"), document.get("token_audience")
        )
    extracted: list[dict] = []
    steps: list[ReplayStep] = []
    for index, step in enumerate(document["steps"]):
        template = grammar.template(step["template_id"])
        provenance = Provenance.from_dict(step["provenance"])
        values = dict(provenance.values)
        for slot, ref in provenance.handle_slots.items():
            source = int(ref["step"])
            if source < len(extracted):
                fresh = extracted[source].get(ref["handle"])
                if fresh is not None:
                    values[slot] = fresh
        request = assemble_request(
            template,
            values,
            provenance.body_text,
            provenance.mutation,
            sources=provenance.sources,
            handle_slots=provenance.handle_slots,
        )
        exchange = send_request(request, transport, provider=provider, sink=sink, step_index=index)
        extracted.append(extract_handles(template, exchange, grammar.graph))
        steps.append(ReplayStep(template.template_id, exchange.status, exchange))
    expected, accepts = reproduction_rule(document["bug_class"], document["status"])
    observed = steps[-1].status if steps else 0
    return ReplayResult(
        reproduced=bool(steps) and accepts(observed),
        expected=expected,
        observed_status=observed,
        steps=steps,
    )


def load_replay_document(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def iter_replay_documents(reports_dir) -> Iterator[tuple[Path, dict]]:
    """All replay.json files under a reports directory, sorted by path."""
    for path in sorted(Path(reports_dir).glob("*/replay.json")):
        yield path, load_replay_document(path)


def scope_provider_factory(
    token_url: str,
    consumer_instance_id: str,
    consumer_nf_type: str,
) -> Callable[[str | None, str | None], Callable[[], SignedToken] | None]:
    """Factory minting through a token endpoint with a recorded scope."""

    def factory(scope: str | None, audience: str | None):
        if scope is None:
            return None

        def provider() -> SignedToken:
            request = TokenRequest(
                consumer_instance_id=consumer_instance_id,
                consumer_nf_type=consumer_nf_type,
                target_nf_type=audience or "UDM",
                requested_scope=scope,
            )
            return acquire_token(token_url, request)

        return provider

    return factory
