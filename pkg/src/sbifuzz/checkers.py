"""Targeted mutation passes, one contract-violation hypothesis each.

Three checkers rewrite a single dimension of an otherwise valid request
(body shape, optional-parameter presence, formatted-value syntax) and
hand the variants back for ordinary execution.  The other two judge
traffic: one sends well-formed requests under a token scoped to a
different service, one compares an observed status against the set the
operation declares.
"""

from __future__ import annotations

import copy
import json
import logging
import random
from dataclasses import dataclass
from typing import Callable, Iterator
from urllib.parse import quote, urlencode

from .engine import (
    ConcreteRequest,
    ExecutedExchange,
    HttpTransport,
    Provenance,
    _to_wire,
    assemble_request,
    send_request,
)
from .grammar import FuzzDictionary, Grammar, ParamSpec, RequestTemplate, semantic_type
from .tokens import TokenError

logger = logging.getLogger(__name__)

CHECKER_NAMES = (
    "payload_body",
    "optional_param_omission",
    "malformed_value",
    "cross_service_token",
    "status_mapping",
)

# 401/403 come from the token layer wrapped around every route, so they
# are never judged against the per-operation declared set.
AUTH_LAYER_STATUSES = frozenset({401, 403})

_FLIP_DEPTH_LIMIT = 2
_STABLE_DEPTH_LIMIT = 4
_OVER_LONG_SUFFIX = "A" * 2048


class CheckerError(Exception):
    pass


class TokenAcquisitionFailed(CheckerError):
    pass


@dataclass
class CheckerFinding:
    """One observed violation plus the request that exposed it."""

    checker_name: str
    mutated_request: ConcreteRequest
    expectation: str
    base_exchange: ExecutedExchange | None = None
    observed: ExecutedExchange | None = None


# ===== stable baselines =====


def _dumps(value) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def _stable_value(schema: dict | None, name: str, dictionary: FuzzDictionary, depth: int = 0):
    """First-choice counterpart of random generation: no rng, all members."""
    schema = schema or {}
    enum = schema.get("enum")
    if isinstance(enum, list) and enum:
        return enum[0]
    stype = schema.get("type")
    if stype == "object" or "properties" in schema:
        if depth >= _STABLE_DEPTH_LIMIT:
            return {}
        return {
            prop_name: _stable_value(prop_schema, prop_name, dictionary, depth + 1)
            for prop_name, prop_schema in schema.get("properties", {}).items()
        }
    if stype == "array":
        if depth >= _STABLE_DEPTH_LIMIT:
            return []
        return [_stable_value(schema.get("items", {}), name, dictionary, depth + 1)]
    return dictionary.first_choice(name, schema)


def _stable_wire(p: ParamSpec, dictionary: FuzzDictionary) -> tuple[str, str]:
    schema = p.schema or {}
    structured = (
        p.json_content or schema.get("type") in ("object", "array") or "properties" in schema
    )
    if structured:
        overlay = dictionary.overlay.get(p.name, [])
        if overlay:
            return _to_wire(overlay[0]), "overlay"
        return _to_wire(_stable_value(schema, p.name, dictionary)), "stable"
    if not p.fuzzable:
        return _to_wire(dictionary.first_choice(p.name, schema)), "pinned"
    candidates = dictionary.values_for(p.name, schema)
    if p.location == "path":
        # an empty path segment degenerates the URL before the route can match
        candidates = [c for c in candidates if _to_wire(c[0]) != ""] or candidates
    value, source = candidates[0]
    return _to_wire(value), source


def _stable_parts(
    template: RequestTemplate, dictionary: FuzzDictionary, skip: str | None = None
) -> tuple[dict, dict]:
    values: dict = {}
    sources: dict = {}
    for p in template.params:
        if skip is not None and p.name == skip:
            continue
        values[p.name], sources[p.name] = _stable_wire(p, dictionary)
    return values, sources


def _stable_body(template: RequestTemplate, dictionary: FuzzDictionary) -> str | None:
    if template.body_schema is None:
        return None
    generated = _stable_value(template.body_schema, "body", dictionary)
    if template.body_content_type == "application/x-www-form-urlencoded":
        fields = generated.items() if isinstance(generated, dict) else []
        return urlencode([(k, _to_wire(v)) for k, v in fields], quote_via=quote)
    return _dumps(generated)


def stable_request(
    template: RequestTemplate, dictionary: FuzzDictionary, mutation: str
) -> ConcreteRequest:
    values, sources = _stable_parts(template, dictionary)
    return assemble_request(
        template, values, _stable_body(template, dictionary), mutation, sources=sources
    )


# ===== body-shape variants =====


def _render_pairs(pairs: list[tuple]) -> str:
    # rendered by hand so a key can appear twice or out of sorted order
    return "{" + ",".join(json.dumps(k) + ":" + _dumps(v) for k, v in pairs) + "}"


def _with_body(base: ConcreteRequest, body_text: str, mutation: str) -> ConcreteRequest:
    prov = base.provenance
    return ConcreteRequest(
        method=base.method,
        url=base.url,
        headers=dict(base.headers),
        body=body_text.encode("utf-8"),
        provenance=Provenance(
            template_id=prov.template_id,
            mutation=mutation,
            values=dict(prov.values),
            sources=dict(prov.sources),
            body_text=body_text,
            handle_slots=dict(prov.handle_slots),
        ),
        service=base.service,
        pinned_header_values=dict(base.pinned_header_values),
    )


def _leaf_paths(value, depth: int = 1, prefix: tuple = ()) -> Iterator[tuple[tuple, object]]:
    if isinstance(value, dict):
        if depth > _FLIP_DEPTH_LIMIT:
            return
        for k, v in value.items():
            yield from _leaf_paths(v, depth + 1, prefix + (k,))
    elif isinstance(value, list):
        if depth > _FLIP_DEPTH_LIMIT:
            return
        for i, v in enumerate(value):
            yield from _leaf_paths(v, depth + 1, prefix + (i,))
    else:
        yield prefix, value


def _flips_for(value) -> list[tuple[str, object]]:
    """Alternate representations in every JSON kind but the value's own."""
    if isinstance(value, bool):
        own = "boolean"
    elif isinstance(value, (int, float)):
        own = "number"
    elif isinstance(value, str):
        own = "string"
    else:
        own = "null"
    as_string = {"boolean": _to_wire(value), "number": str(value), "null": ""}.get(own)
    table = [
        ("string", as_string),
        ("number", 42),
        ("boolean", True),
        ("null", None),
        ("array", [value]),
    ]
    return [(kind, v) for kind, v in table if kind != own]


def payload_body_checker(
    valid: ConcreteRequest, schema: dict | None, rng: random.Random
) -> Iterator[ConcreteRequest]:
    """Variants of a valid JSON object body, one shape change per request.

    Emits, in order: each top-level member dropped, each member stated
    twice, one member-order permutation, then per-leaf type flips down
    to two levels of nesting.
    """
    schema = schema or {}
    if schema.get("type") not in (None, "object") and "properties" not in schema:
        return
    text = valid.provenance.body_text
    if text is None:
        return
    try:
        parsed = json.loads(text)
    except ValueError:
        return
    if not isinstance(parsed, dict) or not parsed:
        return
    pairs = list(parsed.items())
    for key, _ in pairs:
        kept = {k: v for k, v in pairs if k != key}
        yield _with_body(valid, _dumps(kept), f"payload_body:drop:{key}")
    for key, value in pairs:
        doubled = _render_pairs(pairs + [(key, value)])
        yield _with_body(valid, doubled, f"payload_body:dup:{key}")
    if len(pairs) >= 2:
        shuffled = list(pairs)
        for _ in range(8):
            rng.shuffle(shuffled)
            if shuffled != pairs:
                break
        else:
            shuffled = pairs[1:] + pairs[:1]
        yield _with_body(valid, _render_pairs(shuffled), "payload_body:reorder")
    for path, leaf in _leaf_paths(parsed):
        for kind, replacement in _flips_for(leaf):
            mutated = copy.deepcopy(parsed)
            target = mutated
            for step in path[:-1]:
                target = target[step]
            target[path[-1]] = replacement
            label = ".".join(str(s) for s in path)
            yield _with_body(valid, _dumps(mutated), f"payload_body:flip:{label}:{kind}")


# ===== optional-parameter omission =====


def optional_param_omission_checker(
    template: RequestTemplate, dictionary: FuzzDictionary
) -> Iterator[ConcreteRequest]:
    """One variant per optional parameter: everything else at first choice."""
    for omitted in template.params:
        if omitted.required:
            continue
        values, sources = _stable_parts(template, dictionary, skip=omitted.name)
        yield assemble_request(
            template,
            values,
            _stable_body(template, dictionary),
            f"optional_param_omission:{omitted.name}",
            sources=sources,
        )


# ===== malformed formatted values =====


def _structured_format(p: ParamSpec) -> str | None:
    if p.json_content:
        return "json"
    kind = semantic_type(p.schema)
    return kind if kind in ("uuid", "uri", "datetime") else None


def _malformations(format_name: str, valid: str) -> list[tuple[str, str]]:
    if format_name == "json" and ":" in valid:
        truncated = valid[: valid.index(":") + 1]
    else:
        truncated = valid[: max(1, len(valid) // 2)]
    return [
        ("truncated", truncated),
        ("wrong_type", "42"),
        ("over_long", valid + _OVER_LONG_SUFFIX),
        ("invalid_chars", "§" + valid + "§"),
    ]


def malformed_value_checker(
    template: RequestTemplate, dictionary: FuzzDictionary
) -> Iterator[ConcreteRequest]:
    """Break one formatted parameter at a time; plain strings are skipped."""
    targets = [(p, _structured_format(p)) for p in template.params]
    targets = [(p, fmt) for p, fmt in targets if fmt]
    if not targets:
        return
    base_values, base_sources = _stable_parts(template, dictionary)
    body_text = _stable_body(template, dictionary)
    for p, format_name in targets:
        for label, bad in _malformations(format_name, base_values[p.name]):
            values = dict(base_values)
            sources = dict(base_sources)
            values[p.name] = bad
            sources[p.name] = "malformed"
            yield assemble_request(
                template,
                values,
                body_text,
                f"malformed_value:{p.name}:{label}",
                sources=sources,
            )


# ===== cross-service token probing =====


def cross_service_token_checker(
    grammar: Grammar,
    token_provider_factory: Callable,
    transport: HttpTransport,
    pairs: list[tuple[str, str]] | None = None,
    sink: Callable[[ExecutedExchange], None] | None = None,
) -> Iterator[CheckerFinding]:
    """Send each service's first GET under every other service's token.

    The token bytes are attached verbatim; a 2xx answer means the target
    accepted a scope that does not cover it.  Safe reads only, so no
    state is mutated under a token the target should have refused.
    """
    services = list(dict.fromkeys(t.service for t in grammar.templates))
    if pairs is None:
        if len(services) < 2:
            return
        pairs = [(a, b) for a in services for b in services if a != b]
    for holder, target_service in pairs:
        target = next(
            (t for t in grammar.templates if t.service == target_service and t.method == "GET"),
            None,
        )
        if target is None:
            logger.debug(
                "service %s has no GET operation; pair (%s, %s) skipped",
                target_service,
                holder,
                target_service,
            )
            continue
        try:
            provider = token_provider_factory(holder)
            request = stable_request(
                target, grammar.dictionary, f"cross_service_token:{holder}"
            )
            exchange = send_request(request, transport, provider=provider, sink=sink)
        except (TokenAcquisitionFailed, TokenError) as exc:
            logger.warning("token for %s unavailable, pair skipped: %s", holder, exc)
            continue
        if exchange.succeeded:
            yield CheckerFinding(
                checker_name="cross_service_token",
                mutated_request=request,
                expectation=(
                    f"a token scoped to {holder!r} must not authorize "
                    f"{target.template_id}; expected 403, observed {exchange.status}"
                ),
                observed=exchange,
            )


# ===== status mapping =====


def status_mapping_checker(
    exchange: ExecutedExchange, template: RequestTemplate
) -> CheckerFinding | None:
    """Flag statuses the operation never declared, and 500s that mask a 404.

    A 500 is flagged only when the operation declares 404 and every path
    parameter came from neither a handle nor the overlay, i.e. the
    resource id was fabricated and the backend's not-found answer was
    swallowed.  Other 500s are left to the raw-500 classifier.
    """
    status = exchange.status
    if status == 0 or status in AUTH_LAYER_STATUSES:
        return None
    if status == 500:
        sources = exchange.request.provenance.sources
        fabricated = bool(template.path_params) and all(
            sources.get(p.name) not in ("handle", "overlay") for p in template.path_params
        )
        if "404" in template.declared_responses and fabricated:
            return CheckerFinding(
                checker_name="status_mapping",
                mutated_request=exchange.request,
                expectation=(
                    f"{template.template_id} declares 404 for unknown resources "
                    "but answered 500 to a fabricated id"
                ),
                base_exchange=exchange,
                observed=exchange,
            )
        return None
    if not template.declares_status(status):
        return CheckerFinding(
            checker_name="status_mapping",
            mutated_request=exchange.request,
            expectation=(
                f"status {status} is not declared for {template.template_id} "
                f"(declared: {sorted(template.declared_responses)})"
            ),
            base_exchange=exchange,
            observed=exchange,
        )
    return None
