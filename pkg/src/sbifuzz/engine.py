"""Stateful campaign engine: plan sequences, render requests, execute.

Sequences grow breadth-first over the dependency graph; a prefix is
extended only after an execution in which every step answered 2xx.
Each concrete request carries enough provenance to be re-derived
byte-exactly, which is what the replay path leans on.
"""

from __future__ import annotations

import json
import logging
import random
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable
from urllib.parse import quote, urlencode, urlsplit

import requests

from .grammar import DependencyGraph, FuzzDictionary, Grammar, RequestTemplate
from .tokens import AccessTokenClaims, SignedToken, attach_token

logger = logging.getLogger(__name__)

DEFAULT_OPTIONAL_PROBABILITY = 0.75

_GENERATION_DEPTH_LIMIT = 4


class EngineError(Exception):
    pass


class MissingBinding(EngineError):
    pass


class InvalidSequence(EngineError):
    pass


class AllowlistViolation(EngineError):
    pass


# ===== sequences =====


@dataclass(frozen=True)
class HandleRef:
    """Points at a value a producer step will extract at run time."""

    step: int
    handle: str


@dataclass
class SequenceStep:
    template_id: str
    bindings: dict = field(default_factory=dict)  # slot -> HandleRef or wire value


@dataclass
class TestSequence:
    __test__ = False  # not a pytest collection target

    steps: list = field(default_factory=list)

    def validate(self, graph: DependencyGraph) -> None:
        edge_set = set(graph.edges)
        for k, step in enumerate(self.steps):
            for slot, ref in step.bindings.items():
                if not isinstance(ref, HandleRef):
                    continue
                if not 0 <= ref.step < k:
                    raise InvalidSequence(
                        f"step {k} references step {ref.step}, which does not precede it"
                    )
                producer = self.steps[ref.step].template_id
                if (producer, step.template_id, slot) not in edge_set:
                    raise InvalidSequence(
                        f"no edge {producer} -> {step.template_id} for handle {slot!r}"
                    )

    @property
    def template_ids(self) -> list:
        return [s.template_id for s in self.steps]


# ===== concrete requests =====


@dataclass
class Provenance:
    """Everything needed to rebuild a request's bytes without the rng."""

    template_id: str
    mutation: str
    values: dict = field(default_factory=dict)  # param name -> wire string
    sources: dict = field(default_factory=dict)  # param name -> value origin
    body_text: str | None = None
    handle_slots: dict = field(default_factory=dict)  # slot -> {step, handle}

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "mutation": self.mutation,
            "values": self.values,
            "sources": self.sources,
            "body_text": self.body_text,
            "handle_slots": self.handle_slots,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Provenance":
        return cls(
            template_id=d["template_id"],
            mutation=d.get("mutation", "explore"),
            values=dict(d.get("values", {})),
            sources=dict(d.get("sources", {})),
            body_text=d.get("body_text"),
            handle_slots=dict(d.get("handle_slots", {})),
        )


@dataclass
class ConcreteRequest:
    method: str
    url: str  # absolute, query string included
    headers: dict
    body: bytes | None
    provenance: Provenance
    service: str
    pinned_header_values: dict = field(default_factory=dict)

    @property
    def template_id(self) -> str:
        return self.provenance.template_id

    @property
    def host(self) -> str:
        return urlsplit(self.url).netloc


def _to_wire(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (dict, list)):
        return json.dumps(value, sort_keys=True, separators=(",", ":"))
    return str(value)


def _build_url(template: RequestTemplate, values: dict) -> str:
    path = template.path_template
    for p in template.path_params:
        if p.name not in values:
            raise MissingBinding(f"path slot {p.name!r} of {template.template_id} is unbound")
        path = path.replace("{" + p.name + "}", quote(values[p.name], safe=""))
    # path_template already carries the server's path prefix
    server = urlsplit(template.server_url)
    url = f"{server.scheme}://{server.netloc}{path}"
    query = [(p.name, values[p.name]) for p in template.query_params if p.name in values]
    if query:
        url += "?" + urlencode(query, quote_via=quote)
    return url


def assemble_request(
    template: RequestTemplate,
    values: dict,
    body_text: str | None,
    mutation: str,
    sources: dict | None = None,
    handle_slots: dict | None = None,
) -> ConcreteRequest:
    """Deterministically turn wire values into a sendable request."""
    url = _build_url(template, values)
    headers = {"Accept": "application/json"}
    for p in template.header_params:
        if p.name in values:
            headers[p.name] = values[p.name]
    body = None
    if body_text is not None:
        headers["Content-Type"] = template.body_content_type or "application/json"
        body = body_text.encode("utf-8")
    provenance = Provenance(
        template_id=template.template_id,
        mutation=mutation,
        values=dict(values),
        sources=dict(sources or {}),
        body_text=body_text,
        handle_slots=dict(handle_slots or {}),
    )
    return ConcreteRequest(
        method=template.method,
        url=url,
        headers=headers,
        body=body,
        provenance=provenance,
        service=template.service,
    )


def canonical_request(template: RequestTemplate, provenance: Provenance) -> ConcreteRequest:
    """Rebuild the exact bytes a recorded request had."""
    return assemble_request(
        template,
        provenance.values,
        provenance.body_text,
        provenance.mutation,
        sources=provenance.sources,
        handle_slots=provenance.handle_slots,
    )


# ===== value generation =====


def _draw(
    dictionary: FuzzDictionary,
    name: str,
    schema: dict | None,
    rng: random.Random,
    forbid_empty: bool = False,
):
    choices = dictionary.values_for(name, schema)
    usable = [c for c in choices if c[1] != "probe"] or choices
    if forbid_empty:
        # an empty path segment degenerates the URL and tests the router,
        # not the operation
        usable = [c for c in usable if _to_wire(c[0]) != ""] or usable
    index = rng.randrange(len(usable))
    return usable[index]


def _generate_value(
    schema: dict | None,
    name: str,
    dictionary: FuzzDictionary,
    rng: random.Random,
    optional_probability: float,
    depth: int = 0,
) -> Any:
    schema = schema or {}
    enum = schema.get("enum")
    if isinstance(enum, list) and enum:
        return enum[rng.randrange(len(enum))]
    stype = schema.get("type")
    if stype == "object" or "properties" in schema:
        if depth >= _GENERATION_DEPTH_LIMIT:
            return {}
        out = {}
        props = schema.get("properties", {})
        required = set(schema.get("required", []))
        for prop_name, prop_schema in props.items():
            if prop_name in required or rng.random() < optional_probability:
                out[prop_name] = _generate_value(
                    prop_schema, prop_name, dictionary, rng, optional_probability, depth + 1
                )
        return out
    if stype == "array":
        if depth >= _GENERATION_DEPTH_LIMIT:
            return []
        item = _generate_value(
            schema.get("items", {}), name, dictionary, rng, optional_probability, depth + 1
        )
        return [item]
    value, _ = _draw(dictionary, name, schema, rng)
    return value


def instantiate(
    template: RequestTemplate,
    dictionary: FuzzDictionary,
    bindings: dict | None = None,
    rng: random.Random | None = None,
    optional_probability: float = DEFAULT_OPTIONAL_PROBABILITY,
    mutation: str = "explore",
) -> ConcreteRequest:
    """Render one concrete request from a template.

    Required parameters are always present; optional ones appear with the
    configured probability.  `bindings` carries wire values for slots fed
    by earlier steps and wins over the dictionary.
    """
    rng = rng if rng is not None else random.Random()
    bindings = bindings or {}
    values: dict = {}
    sources: dict = {}
    for p in template.params:
        if p.name in bindings:
            values[p.name] = _to_wire(bindings[p.name])
            sources[p.name] = "handle"
            continue
        if p.location != "path" and not p.required:
            if rng.random() >= optional_probability:
                continue
        schema = p.schema or {}
        if p.json_content or schema.get("type") in ("object", "array") or "properties" in schema:
            overlay = dictionary.overlay.get(p.name, [])
            if overlay:
                value = overlay[rng.randrange(len(overlay))]
                sources[p.name] = "overlay"
            else:
                value = _generate_value(schema, p.name, dictionary, rng, optional_probability)
                sources[p.name] = "generated"
            values[p.name] = _to_wire(value)
        elif not p.fuzzable:
            values[p.name] = _to_wire(dictionary.first_choice(p.name, schema))
            sources[p.name] = "pinned"
        else:
            value, source = _draw(dictionary, p.name, schema, rng, forbid_empty=p.location == "path")
            values[p.name] = _to_wire(value)
            sources[p.name] = source
    body_text = None
    if template.body_schema is not None:
        generated = _generate_value(
            template.body_schema, "body", dictionary, rng, optional_probability
        )
        if template.body_content_type == "application/x-www-form-urlencoded":
            fields = generated.items() if isinstance(generated, dict) else []
            body_text = urlencode([(k, _to_wire(v)) for k, v in fields], quote_via=quote)
        else:
            body_text = json.dumps(generated, sort_keys=True, separators=(",", ":"))
    return assemble_request(template, values, body_text, mutation, sources=sources)


# ===== planning =====


class SequencePlanner:
    """Breadth-first frontier over the dependency graph.

    All length-1 sequences come out before any length-2.  record() with
    retained=True queues every extension of that prefix: dependency-free
    templates plus consumers whose handles the prefix can produce.
    """

    def __init__(self, grammar: Grammar, max_sequence_length: int = 4):
        self.grammar = grammar
        self.graph = grammar.graph
        self.max_sequence_length = max_sequence_length
        self._edge_set = set(self.graph.edges)
        self._queue: deque = deque()
        for template in grammar.templates:
            if not self.graph.required_handles(template.template_id):
                self._queue.append(TestSequence(steps=[SequenceStep(template.template_id)]))

    def has_pending(self) -> bool:
        return bool(self._queue)

    def next(self) -> TestSequence:
        if not self._queue:
            raise EngineError("planner frontier is empty")
        return self._queue.popleft()

    def record(self, sequence: TestSequence, retained: bool) -> None:
        """Feed back an execution outcome; retained prefixes get extended."""
        if not retained or len(sequence.steps) >= self.max_sequence_length:
            return
        for template in self.grammar.templates:
            extension = self._extend(sequence, template)
            if extension is not None:
                self._queue.append(extension)

    def _extend(self, sequence: TestSequence, template: RequestTemplate) -> TestSequence | None:
        required = self.graph.required_handles(template.template_id)
        bindings: dict = {}
        for handle in sorted(required):
            producers = [
                k
                for k, step in enumerate(sequence.steps)
                if (step.template_id, template.template_id, handle) in self._edge_set
            ]
            if not producers:
                return None
            bindings[handle] = HandleRef(step=max(producers), handle=handle)
        extended = TestSequence(
            steps=[*sequence.steps, SequenceStep(template.template_id, bindings)]
        )
        extended.validate(self.graph)
        return extended


# ===== transport =====


@dataclass
class TransportResult:
    status: int  # 0 marks a transport failure
    headers: dict
    body: bytes
    latency_ms: float
    error: str | None = None


class RateLimiter:
    """Spaces sends per target; None means unlimited."""

    def __init__(self, per_second: float | None = None):
        self._interval = 1.0 / per_second if per_second else 0.0
        self._last: dict = {}

    def acquire(self, target: str) -> None:
        if not self._interval:
            return
        now = time.monotonic()
        wait = self._last.get(target, 0.0) + self._interval - now
        if wait > 0:
            time.sleep(wait)
            now = time.monotonic()
        self._last[target] = now


class HttpTransport:
    """requests-backed sender with an allowlist and one retry on flake."""

    def __init__(
        self,
        allowlist,
        rate_limiter: RateLimiter | None = None,
        timeout: float = 10.0,
        retries: int = 1,
        session: requests.Session | None = None,
    ):
        self._hosts = {urlsplit(u).netloc for u in allowlist}
        self._limiter = rate_limiter or RateLimiter(None)
        self._timeout = timeout
        self._retries = retries
        self._session = session or requests.Session()

    def send(self, request: ConcreteRequest) -> TransportResult:
        host = request.host
        if host not in self._hosts:
            raise AllowlistViolation(f"{host} is not an allowlisted target")
        self._limiter.acquire(host)
        error = ""
        started = time.perf_counter()
        for _ in range(self._retries + 1):
            try:
                reply = self._session.request(
                    request.method,
                    request.url,
                    headers=request.headers,
                    data=request.body,
                    timeout=self._timeout,
                )
            except requests.RequestException as exc:
                error = str(exc) or exc.__class__.__name__
                continue
            latency = (time.perf_counter() - started) * 1000.0
            return TransportResult(
                status=reply.status_code,
                headers=dict(reply.headers),
                body=reply.content,
                latency_ms=latency,
            )
        latency = (time.perf_counter() - started) * 1000.0
        return TransportResult(status=0, headers={}, body=b"", latency_ms=latency, error=error)

    def close(self) -> None:
        self._session.close()


# ===== execution =====


@dataclass
class ExecutedExchange:
    request: ConcreteRequest
    status: int
    response_headers: dict
    response_body: bytes
    latency_ms: float
    token_claims: AccessTokenClaims | None = None
    transport_error: str | None = None
    sequence_index: int = -1
    step_index: int = 0

    @property
    def succeeded(self) -> bool:
        return 200 <= self.status < 300

    def response_header(self, name: str) -> str | None:
        for key, value in self.response_headers.items():
            if key.lower() == name.lower():
                return value
        return None

    def to_log_record(self) -> dict:
        """Log view: stable across runs, so no latency or wall-clock.

        Carries the full provenance and the token scope so reports and
        replays can be rebuilt from the log alone.
        """
        kept_headers = {}
        for name in ("Content-Type", "Location"):
            value = self.response_header(name)
            if value is not None:
                kept_headers[name.lower()] = value
        return {
            "method": self.request.method,
            "url": self.request.url,
            "template_id": self.request.template_id,
            "mutation": self.request.provenance.mutation,
            "request_headers": dict(self.request.headers),
            "request_body": self.request.provenance.body_text,
            "provenance": self.request.provenance.to_dict(),
            "status": self.status,
            "response_headers": kept_headers,
            "response_body": self.response_body.decode("utf-8", errors="replace"),
            "transport_error": self.transport_error,
            "token_scope": self.token_claims.scope if self.token_claims else None,
            "token_audience": self.token_claims.audience if self.token_claims else None,
            "sequence_index": self.sequence_index,
            "step_index": self.step_index,
        }


def send_request(
    request: ConcreteRequest,
    transport: HttpTransport,
    provider: Callable[[], SignedToken] | None = None,
    sink: Callable[[ExecutedExchange], None] | None = None,
    sequence_index: int = -1,
    step_index: int = 0,
) -> ExecutedExchange:
    """Attach a token when a provider is given, send, wrap, forward."""
    claims = None
    if provider is not None:
        token = provider()
        attach_token(request, token)
        claims = token.claims
    result = transport.send(request)
    exchange = ExecutedExchange(
        request=request,
        status=result.status,
        response_headers=result.headers,
        response_body=result.body,
        latency_ms=result.latency_ms,
        token_claims=claims,
        transport_error=result.error,
        sequence_index=sequence_index,
        step_index=step_index,
    )
    if sink is not None:
        sink(exchange)
    return exchange


def _provider_lookup(provider_for, service: str):
    if provider_for is None:
        return None
    if isinstance(provider_for, dict):
        return provider_for.get(service)
    return provider_for(service)


def extract_handles(
    template: RequestTemplate, exchange: ExecutedExchange, graph: DependencyGraph
) -> dict:
    """Pull produced handle values from a 2xx response."""
    wanted = graph.handles_produced_by(template.template_id)
    if not wanted or not exchange.succeeded:
        return {}
    out: dict = {}
    try:
        body = json.loads(exchange.response_body.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        body = None
    if isinstance(body, dict):
        for handle in wanted:
            if handle in body:
                out[handle] = _to_wire(body[handle])
    location = exchange.response_header("Location")
    if location:
        segment = urlsplit(location).path.rstrip("/").rsplit("/", 1)[-1]
        for handle in wanted:
            out.setdefault(handle, segment)
    return out


def execute_sequence(
    sequence: TestSequence,
    grammar: Grammar,
    transport: HttpTransport,
    provider_for=None,
    rng: random.Random | None = None,
    dictionary: FuzzDictionary | None = None,
    optional_probability: float = DEFAULT_OPTIONAL_PROBABILITY,
    sink: Callable[[ExecutedExchange], None] | None = None,
    sequence_index: int = -1,
    mutation: str = "explore",
) -> list[ExecutedExchange]:
    """Run the steps in order, binding extracted handles as they appear.

    A transport failure aborts the remaining steps; an HTTP error does
    not, though steps depending on its handles cannot run and stop the
    sequence when reached.
    """
    rng = rng if rng is not None else random.Random()
    dictionary = dictionary or grammar.dictionary
    extracted: list[dict] = []
    exchanges: list[ExecutedExchange] = []
    for step_index, step in enumerate(sequence.steps):
        template = grammar.template(step.template_id)
        bindings: dict = {}
        handle_slots: dict = {}
        aborted = False
        for slot, ref in step.bindings.items():
            if isinstance(ref, HandleRef):
                value = extracted[ref.step].get(ref.handle) if ref.step < len(extracted) else None
                if value is None:
                    # routine on misbehaving targets: the producer step failed
                    logger.debug(
                        "sequence %d step %d: handle %r never materialized; aborting",
                        sequence_index,
                        step_index,
                        ref.handle,
                    )
                    aborted = True
                    break
                bindings[slot] = value
                handle_slots[slot] = {"step": ref.step, "handle": ref.handle}
            else:
                bindings[slot] = ref
        if aborted:
            break
        request = instantiate(
            template,
            dictionary,
            bindings=bindings,
            rng=rng,
            optional_probability=optional_probability,
            mutation=mutation,
        )
        request.provenance.handle_slots = handle_slots
        exchange = send_request(
            request,
            transport,
            provider=_provider_lookup(provider_for, template.service),
            sink=sink,
            sequence_index=sequence_index,
            step_index=step_index,
        )
        exchanges.append(exchange)
        if exchange.transport_error is not None:
            break
        extracted.append(extract_handles(template, exchange, grammar.graph))
    return exchanges
