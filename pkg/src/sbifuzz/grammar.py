"""Request-grammar compilation from bundled API documents.

A grammar is the fuzzer's executable view of one or more services: one
RequestTemplate per path+method, a producer/consumer dependency graph
inferred from response fields and Location-header conventions, and a
type-consistent fuzz dictionary seeded from schema enums, formats, and
built-in boundary values.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any
from urllib.parse import urlparse

from .specload import HTTP_METHODS, ResolvedSpec, derive_scope, derive_service

logger = logging.getLogger(__name__)

# headers never mutated by any downstream stage
ALWAYS_PINNED_HEADERS = ("authorization", "content-type")

SUCCESS_PREFIX = "2"


class GrammarError(Exception):
    pass


class EmptySpec(GrammarError):
    """Input document defines no operations."""


class OverlayTypeMismatch(GrammarError):
    """User overlay value conflicts with the declared schema type."""


@dataclass
class ParamSpec:
    """One request parameter slot (path, query, or header)."""

    name: str
    location: str
    required: bool
    schema: dict = field(default_factory=dict)
    json_content: bool = False
    fuzzable: bool = True

    def __post_init__(self):
        if self.location == "path":
            self.required = True  # path slots are never optional

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "location": self.location,
            "required": self.required,
            "schema": self.schema,
            "json_content": self.json_content,
            "fuzzable": self.fuzzable,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ParamSpec":
        return cls(**d)


@dataclass
class RequestTemplate:
    """Everything needed to render concrete requests for one operation."""

    template_id: str
    service: str
    scope: str
    method: str
    path_template: str
    server_url: str
    params: list[ParamSpec] = field(default_factory=list)
    body_schema: dict | None = None
    body_content_type: str | None = None
    declared_responses: dict[str, Any] = field(default_factory=dict)
    produces: list[dict] = field(default_factory=list)
    consumes: list[dict] = field(default_factory=list)
    pinned: list[str] = field(default_factory=list)

    @property
    def path_params(self) -> list[ParamSpec]:
        return [p for p in self.params if p.location == "path"]

    @property
    def query_params(self) -> list[ParamSpec]:
        return [p for p in self.params if p.location == "query"]

    @property
    def header_params(self) -> list[ParamSpec]:
        return [p for p in self.params if p.location == "header"]

    def declares_status(self, status: int) -> bool:
        declared = self.declared_responses
        return (
            str(status) in declared
            or f"{status // 100}XX" in declared
            or "default" in declared
        )

    def declares_explicit_5xx(self) -> bool:
        return "500" in self.declared_responses or "5XX" in self.declared_responses

    def to_dict(self) -> dict:
        return {
            "template_id": self.template_id,
            "service": self.service,
            "scope": self.scope,
            "method": self.method,
            "path_template": self.path_template,
            "server_url": self.server_url,
            "params": [p.to_dict() for p in self.params],
            "body_schema": self.body_schema,
            "body_content_type": self.body_content_type,
            "declared_responses": self.declared_responses,
            "produces": self.produces,
            "consumes": self.consumes,
            "pinned": self.pinned,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RequestTemplate":
        d = dict(d)
        d["params"] = [ParamSpec.from_dict(p) for p in d.get("params", [])]
        return cls(**d)


@dataclass
class DependencyGraph:
    """Edges (producer_id, consumer_id, handle_name), lexicographic order."""

    nodes: list[str] = field(default_factory=list)
    edges: list[tuple[str, str, str]] = field(default_factory=list)

    def required_handles(self, template_id: str) -> set[str]:
        return {h for _, c, h in self.edges if c == template_id}

    def producers_of(self, template_id: str, handle: str) -> list[str]:
        return [p for p, c, h in self.edges if c == template_id and h == handle]

    def handles_produced_by(self, template_id: str) -> set[str]:
        return {h for p, _, h in self.edges if p == template_id}

    def to_dict(self) -> dict:
        return {"nodes": self.nodes, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> "DependencyGraph":
        return cls(nodes=list(d.get("nodes", [])), edges=[tuple(e) for e in d.get("edges", [])])


# ===== Fuzz dictionary =====

DEFAULT_POOLS: dict[str, list] = {
    "string": ["", "A", "A" * 1024, "%s%n", "ünïcødé-☂"],
    "integer": [0, 1, -1, 2**31 - 1],
    "number": [0.0, 1.0, -1.5],
    "boolean": [True, False],
    "uuid": [
        "00000000-0000-0000-0000-000000000000",
        "123e4567-e89b-12d3-a456-426614174000",
    ],
    "uri": ["http://example.invalid/cb", "not a uri"],
    "datetime": ["1970-01-01T00:00:00Z", "9999-12-31T23:59:59Z", "garbage"],
}

ENUM_PROBE = "ZZ_NOT_IN_ENUM"


def semantic_type(schema: dict | None) -> str:
    schema = schema or {}
    fmt = schema.get("format")
    if fmt == "uuid":
        return "uuid"
    if fmt == "uri":
        return "uri"
    if fmt == "date-time":
        return "datetime"
    stype = schema.get("type")
    if stype in ("integer", "number", "boolean"):
        return stype
    return "string"


@dataclass
class FuzzDictionary:
    """Typed value pools plus a user overlay keyed by parameter name."""

    pools: dict[str, list] = field(default_factory=lambda: copy.deepcopy(DEFAULT_POOLS))
    overlay: dict[str, list] = field(default_factory=dict)

    def values_for(self, name: str, schema: dict | None) -> list[tuple[Any, str]]:
        """Ordered choices for a slot: overlay, enum, example, then pool."""
        schema = schema or {}
        out: list[tuple[Any, str]] = []
        seen: set[str] = set()

        def push(value: Any, source: str) -> None:
            key = f"{type(value).__name__}:{value!r}"
            if key not in seen:
                seen.add(key)
                out.append((value, source))

        for v in self.overlay.get(name, []):
            push(v, "overlay")
        enum = schema.get("enum")
        if isinstance(enum, list) and enum:
            for v in enum:
                push(v, "enum")
            push(ENUM_PROBE, "probe")
        if "example" in schema:
            push(schema["example"], "example")
        for v in self.pools.get(semantic_type(schema), []):
            push(v, "builtin")
        return out

    def first_choice(self, name: str, schema: dict | None) -> Any:
        return self.values_for(name, schema)[0][0]

    def to_dict(self) -> dict:
        return {"pools": self.pools, "overlay": self.overlay}

    @classmethod
    def from_dict(cls, d: dict) -> "FuzzDictionary":
        return cls(pools=d.get("pools", copy.deepcopy(DEFAULT_POOLS)), overlay=d.get("overlay", {}))


@dataclass
class PinPolicy:
    """Names the campaign refuses to mutate beyond the built-in set."""

    pin_names: list[str] = field(default_factory=list)


# ===== Compilation =====


def _resolve_local(schema: Any, index: dict[str, Any], seen: tuple = ()) -> Any:
    """Inline local #/components refs; cycles collapse to an opaque object."""
    if isinstance(schema, dict):
        ref = schema.get("$ref")
        if isinstance(ref, str) and ref.startswith("#/components/"):
            key = "/".join(ref.split("/")[2:4])
            if key in seen:
                return {"type": "object"}
            target = index.get(key)
            if target is None:
                return {"type": "object"}
            return _resolve_local(target, index, seen + (key,))
        return {k: _resolve_local(v, index, seen) for k, v in schema.items()}
    if isinstance(schema, list):
        return [_resolve_local(v, index, seen) for v in schema]
    return schema


def _pick_body(request_body: dict | None, index: dict) -> tuple[dict | None, str | None]:
    if not request_body:
        return None, None
    content = request_body.get("content", {})
    for ctype in ("application/json", "application/x-www-form-urlencoded"):
        if ctype in content:
            schema = content[ctype].get("schema", {})
            return _resolve_local(schema, index), ctype
    if content:
        ctype = sorted(content)[0]
        return _resolve_local(content[ctype].get("schema", {}), index), ctype
    return None, None


def _param_spec(raw: dict, index: dict) -> ParamSpec:
    content = raw.get("content", {})
    json_content = "application/json" in content
    if json_content:
        schema = _resolve_local(content["application/json"].get("schema", {}), index)
    else:
        schema = _resolve_local(raw.get("schema", {}), index)
    return ParamSpec(
        name=raw.get("name", ""),
        location=raw.get("in", "query"),
        required=bool(raw.get("required", False)),
        schema=schema if isinstance(schema, dict) else {},
        json_content=json_content,
    )


def _success_body_fields(op: dict, index: dict) -> list[str]:
    """Top-level scalar fields of 2xx JSON responses, identifier candidates."""
    fields: list[str] = []
    for status, resp in (op.get("responses") or {}).items():
        if not str(status).startswith(SUCCESS_PREFIX):
            continue
        schema = (
            (resp or {}).get("content", {}).get("application/json", {}).get("schema")
        )
        if schema is None:
            continue
        resolved = _resolve_local(schema, index)
        if resolved.get("type") == "array":
            resolved = resolved.get("items", {})
        for name, prop in (resolved.get("properties") or {}).items():
            if isinstance(prop, dict) and prop.get("type", "string") in ("string", "integer"):
                fields.append(name)
    return sorted(set(fields))


def _server_for_operation(doc: dict, path_item: dict, op: dict) -> str:
    for scope_node in (op, path_item, doc):
        servers = scope_node.get("servers")
        if isinstance(servers, list) and servers:
            return servers[0].get("url", "")
    return ""


def compile_grammar(spec: ResolvedSpec) -> list[RequestTemplate]:
    """One RequestTemplate per path+method of a bundled, rewritten spec."""
    doc = spec.document
    index = spec.component_index
    doc_service = doc_scope = None
    top_servers = doc.get("servers")
    if isinstance(top_servers, list) and top_servers:
        top_path = urlparse(top_servers[0].get("url", "")).path
        doc_service = derive_service(top_path)
        doc_scope = derive_scope(top_path)
    templates: list[RequestTemplate] = []
    for path_key, path_item in (doc.get("paths") or {}).items():
        if not isinstance(path_item, dict):
            continue
        shared_params = [p for p in path_item.get("parameters", []) if isinstance(p, dict)]
        for method in HTTP_METHODS:
            op = path_item.get(method)
            if not isinstance(op, dict):
                continue
            server_url = _server_for_operation(doc, path_item, op)
            parsed = urlparse(server_url)
            base_path = parsed.path.rstrip("/")
            full_path = base_path + path_key
            service = derive_service(base_path) or doc_service or ""
            scope = derive_scope(base_path) or doc_scope or ""
            params = [
                _param_spec(p, index)
                for p in shared_params + [q for q in op.get("parameters", []) if isinstance(q, dict)]
            ]
            body_schema, body_ctype = _pick_body(op.get("requestBody"), index)
            responses = op.get("responses") or {}
            template = RequestTemplate(
                template_id=f"{method.upper()} {full_path}",
                service=service,
                scope=scope,
                method=method.upper(),
                path_template=full_path,
                server_url=server_url,
                params=params,
                body_schema=body_schema,
                body_content_type=body_ctype,
                declared_responses={str(k): v for k, v in responses.items()},
                produces=[{"name": f, "source": "body"} for f in _success_body_fields(op, index)],
                consumes=[{"slot": p.name, "location": "path"} for p in params if p.location == "path"],
            )
            templates.append(template)
    if not templates:
        raise EmptySpec(f"{spec.origin}: no operations to compile")
    templates.sort(key=lambda t: t.template_id)
    return templates


def _norm(name: str) -> str:
    return name.lower().replace("-", "").replace("_", "")


def _base(name: str) -> str:
    n = _norm(name)
    for suffix in ("id", "ref"):
        if n.endswith(suffix) and len(n) > len(suffix):
            return n[: -len(suffix)]
    return n


def names_match(producer_field: str, consumer_slot: str) -> bool:
    """Case-, separator-, and Id/Ref-suffix-insensitive name equality."""
    return _base(producer_field) == _base(consumer_slot)


def infer_dependencies(templates: list[RequestTemplate]) -> DependencyGraph:
    """Producer/consumer edges from response fields and Location paths."""
    edges: set[tuple[str, str, str]] = set()
    for producer in templates:
        produced_fields = [p["name"] for p in producer.produces]
        has_created = any(str(s) == "201" for s in producer.declared_responses)
        for consumer in templates:
            if consumer.template_id == producer.template_id:
                continue  # self-loops forbidden
            for slot in consumer.consumes:
                slot_name = slot["slot"]
                if any(names_match(f, slot_name) for f in produced_fields):
                    edges.add((producer.template_id, consumer.template_id, slot_name))
                if has_created and consumer.path_template == (
                    producer.path_template + "/{" + slot_name + "}"
                ):
                    # Location-header convention: POST /xs -> /xs/{id}
                    edges.add((producer.template_id, consumer.template_id, slot_name))
    return DependencyGraph(
        nodes=sorted(t.template_id for t in templates),
        edges=sorted(edges),
    )


def _schema_accepts(schema: dict, value: Any) -> bool:
    stype = schema.get("type")
    if stype is None:
        return True
    if stype == "string":
        return isinstance(value, str)
    if stype == "integer":
        return isinstance(value, int) and not isinstance(value, bool)
    if stype == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if stype == "boolean":
        return isinstance(value, bool)
    if stype == "array":
        return isinstance(value, list)
    if stype == "object":
        return isinstance(value, dict)
    return True


def build_dictionary(
    templates: list[RequestTemplate], overlay: dict[str, list] | None = None
) -> FuzzDictionary:
    """Assemble the campaign dictionary and type-check the user overlay."""
    overlay = {k: list(v) for k, v in (overlay or {}).items()}
    named_schemas: dict[str, dict] = {}
    for t in templates:
        for p in t.params:
            named_schemas.setdefault(p.name, p.schema)
        for prop, schema in ((t.body_schema or {}).get("properties") or {}).items():
            if isinstance(schema, dict):
                named_schemas.setdefault(prop, schema)
    for name, values in overlay.items():
        schema = named_schemas.get(name)
        if schema is None:
            continue  # overlay for a name this grammar never uses
        for value in values:
            if not _schema_accepts(schema, value):
                raise OverlayTypeMismatch(
                    f"overlay {name!r}: value {value!r} conflicts with schema type "
                    f"{schema.get('type')!r}"
                )
    return FuzzDictionary(overlay=overlay)


def annotate_fuzzable(template: RequestTemplate, policy: PinPolicy | None = None) -> RequestTemplate:
    """Mark pinned names; Authorization and Content-Type always pin."""
    pinned = set(ALWAYS_PINNED_HEADERS)
    known = {p.name for p in template.params}
    for name in (policy.pin_names if policy else []):
        if name not in known and name.lower() not in pinned:
            logger.warning(
                "pin policy names %r but template %s has no such param",
                name,
                template.template_id,
            )
            continue
        pinned.add(name)
    for p in template.params:
        if p.name in pinned or p.name.lower() in pinned:
            p.fuzzable = False
    template.pinned = sorted(pinned)
    return template


# ===== Serialization =====


def seed_spec_hash(specs: list[ResolvedSpec]) -> str:
    digest = hashlib.sha256()
    for spec in sorted(specs, key=lambda s: str(s.origin)):
        digest.update(json.dumps(spec.document, sort_keys=True).encode("utf-8"))
    return digest.hexdigest()


def grammar_to_json(
    templates: list[RequestTemplate],
    graph: DependencyGraph,
    dictionary: FuzzDictionary,
    spec_hash: str,
) -> str:
    payload = {
        "templates": [t.to_dict() for t in sorted(templates, key=lambda t: t.template_id)],
        "edges": [list(e) for e in graph.edges],
        "dictionary": dictionary.to_dict(),
        "meta": {"seed_spec_hash": spec_hash},
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


@dataclass
class Grammar:
    """A deserialized grammar bundle ready for planning and execution."""

    templates: list[RequestTemplate]
    graph: DependencyGraph
    dictionary: FuzzDictionary
    seed_hash: str = ""

    def template(self, template_id: str) -> RequestTemplate:
        return self._by_id[template_id]

    def __post_init__(self):
        self._by_id = {t.template_id: t for t in self.templates}

    @property
    def services(self) -> list[str]:
        return sorted({t.service for t in self.templates})


def grammar_from_json(text: str) -> Grammar:
    payload = json.loads(text)
    templates = [RequestTemplate.from_dict(t) for t in payload["templates"]]
    graph = DependencyGraph(
        nodes=sorted(t.template_id for t in templates),
        edges=[tuple(e) for e in payload.get("edges", [])],
    )
    dictionary = FuzzDictionary.from_dict(payload.get("dictionary", {}))
    return Grammar(
        templates=templates,
        graph=graph,
        dictionary=dictionary,
        seed_hash=payload.get("meta", {}).get("seed_spec_hash", ""),
    )


def compile_corpus(
    specs: list[ResolvedSpec],
    overlay: dict[str, list] | None = None,
    policy: PinPolicy | None = None,
) -> Grammar:
    """Compile several bundled specs into one grammar."""
    templates: list[RequestTemplate] = []
    for spec in specs:
        templates.extend(compile_grammar(spec))
    templates.sort(key=lambda t: t.template_id)
    for t in templates:
        annotate_fuzzable(t, policy)
    graph = infer_dependencies(templates)
    dictionary = build_dictionary(templates, overlay)
    return Grammar(
        templates=templates,
        graph=graph,
        dictionary=dictionary,
        seed_hash=seed_spec_hash(specs),
    )
