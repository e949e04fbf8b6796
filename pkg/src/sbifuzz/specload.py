"""OpenAPI document loading, external-ref bundling, and server rewriting.

The pipeline is load_document -> resolve_refs -> rewrite_servers ->
validate_spec.  Bundling inlines every cross-file $ref into the local
components section so a single self-contained document remains; server
rewriting replaces '{apiRoot}' templates with concrete hosts from a
HostMap so request templates carry absolute URLs.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable
from urllib.parse import urlparse

import yaml

logger = logging.getLogger(__name__)

HTTP_METHODS = ("get", "put", "post", "delete", "patch", "head", "options", "trace")


class SpecError(Exception):
    """Base class for spec pipeline failures."""


class ParseError(SpecError):
    """File exists but is not parseable YAML/JSON."""


class UnsupportedVersion(SpecError):
    """Document version is not OpenAPI 3.0/3.1."""


class MissingRoot(SpecError):
    """Document root lacks a mandatory key such as paths."""


class DanglingRef(SpecError):
    """A $ref points at a pointer that does not exist."""


class ResolverIO(SpecError):
    """A referenced file could not be read."""


class CollisionUnresolvable(SpecError):
    """Same component name, same origin file, different content."""


class UnknownService(SpecError):
    """No HostMap entry for a derived service name and no default."""


@dataclass
class RawSpecDocument:
    """A parsed OpenAPI document plus its origin path."""

    source_path: Path
    document: dict
    format_version: str


@dataclass
class ResolvedSpec:
    """A self-contained document: no $ref crosses a file boundary."""

    document: dict
    origin: Path
    server_urls: list[str] = field(default_factory=list)
    component_index: dict[str, Any] = field(default_factory=dict)


@dataclass
class HostMap:
    """Service name -> host:port, with an optional '*' default entry."""

    entries: dict[str, str]
    default_scheme: str = "http"


@dataclass
class Diagnostic:
    level: str
    message: str
    location: str


def load_document(path: str | Path) -> RawSpecDocument:
    """Parse one OpenAPI file and gate on version and root shape."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(tree, dict):
        raise ParseError(f"{path}: document root is not a mapping")
    version = tree.get("openapi")
    if not isinstance(version, str) or not version.startswith(("3.0", "3.1")):
        raise UnsupportedVersion(f"{path}: unsupported openapi version {version!r}")
    for key in ("info", "paths"):
        if key not in tree:
            raise MissingRoot(f"{path}: document root lacks {key!r}")
    return RawSpecDocument(source_path=path, document=tree, format_version=version)


def file_resolver(base_dir: str | Path) -> Callable[[str], dict]:
    """Default resolver: load referenced files relative to base_dir."""
    base = Path(base_dir)

    def load(name: str) -> dict:
        target = base / name
        try:
            text = target.read_text(encoding="utf-8")
        except OSError as exc:
            raise ResolverIO(f"cannot read referenced file {target}: {exc}") from exc
        try:
            tree = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ParseError(f"invalid YAML in referenced file {target}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ParseError(f"{target}: referenced document root is not a mapping")
        return tree

    return load


def _split_ref(ref: str) -> tuple[str, str]:
    if "#" not in ref:
        # whole-document refs carry no pointer to merge under a name
        raise DanglingRef(f"whole-document ref unsupported: {ref!r}")
    file_part, _, pointer = ref.partition("#")
    return file_part, pointer


def _pointer_segments(pointer: str) -> list[str]:
    if not pointer.startswith("/"):
        raise DanglingRef(f"unsupported pointer {pointer!r}")
    return [seg.replace("~1", "/").replace("~0", "~") for seg in pointer[1:].split("/")]


def _lookup_pointer(tree: dict, pointer: str, origin: str) -> Any:
    node: Any = tree
    for seg in _pointer_segments(pointer):
        if isinstance(node, dict) and seg in node:
            node = node[seg]
        elif isinstance(node, list) and seg.isdigit() and int(seg) < len(node):
            node = node[int(seg)]
        else:
            raise DanglingRef(f"{origin}#{pointer} does not exist")
    return node


class _Bundler:
    """Inline every cross-file ref under the root components section.

    Components merged from external files keep their names unless the
    name is already taken by different content, in which case a
    _from_<filestem> suffix disambiguates.  Cycles terminate because a
    component's local pointer is registered before its body is walked.
    """

    ROOT = "<root>"

    def __init__(self, doc: dict, resolver: Callable[[str], dict], root_name: str = ""):
        self.doc = doc
        self.resolver = resolver
        self.root_name = root_name
        self.file_cache: dict[str, dict] = {}
        # (file, pointer) -> assigned local pointer
        self.assigned: dict[tuple[str, str], str] = {}
        # (section, name) -> (origin file, origin pointer, raw source node)
        self.owners: dict[tuple[str, str], tuple[str, str, Any]] = {}
        components = self.doc.setdefault("components", {})
        for section, entries in components.items():
            if isinstance(entries, dict):
                for name, node in entries.items():
                    self.owners[(section, name)] = (self.ROOT, f"/components/{section}/{name}", node)

    def _load_file(self, name: str) -> dict:
        if name not in self.file_cache:
            self.file_cache[name] = self.resolver(name)
        return self.file_cache[name]

    def run(self) -> None:
        self._walk(self.doc, self.ROOT)

    def _walk(self, node: Any, file_ctx: str) -> None:
        if isinstance(node, dict):
            ref = node.get("$ref")
            if isinstance(ref, str) and len(node) >= 1:
                node["$ref"] = self._resolve_ref(ref, file_ctx)
            # snapshot: merging inserts siblings into the components maps
            for key, value in list(node.items()):
                if key == "$ref":
                    continue
                self._walk(value, file_ctx)
        elif isinstance(node, list):
            for item in node:
                self._walk(item, file_ctx)

    def _resolve_ref(self, ref: str, file_ctx: str) -> str:
        file_part, pointer = _split_ref(ref)
        target_file = file_part or file_ctx
        if target_file == self.ROOT or (self.root_name and target_file == self.root_name):
            # ref back into the root document stays a plain local ref
            _lookup_pointer(self.doc, pointer, target_file)
            return f"#{pointer}"
        return self._ensure_component(target_file, pointer)

    def _section_and_name(self, pointer: str) -> tuple[str, str]:
        segs = _pointer_segments(pointer)
        if len(segs) == 3 and segs[0] == "components":
            return segs[1], segs[2]
        return "schemas", segs[-1]

    def _ensure_component(self, target_file: str, pointer: str) -> str:
        key = (target_file, pointer)
        if key in self.assigned:
            return self.assigned[key]
        tree = self._load_file(target_file)
        source_node = _lookup_pointer(tree, pointer, target_file)
        section, name = self._section_and_name(pointer)
        final_name = self._claim_name(section, name, target_file, pointer, source_node)
        local_pointer = f"#/components/{section}/{final_name}"
        # register before walking the body so cycles close on the local name
        self.assigned[key] = local_pointer
        if (section, final_name) in self.owners:
            return local_pointer  # content-equal dedupe onto the existing entry
        merged = copy.deepcopy(source_node)
        self.doc.setdefault("components", {}).setdefault(section, {})[final_name] = merged
        self.owners[(section, final_name)] = (target_file, pointer, source_node)
        self._walk(merged, target_file)
        return local_pointer

    def _claim_name(self, section: str, name: str, target_file: str, pointer: str, node: Any) -> str:
        owner = self.owners.get((section, name))
        if owner is None:
            return name
        own_file, own_pointer, own_node = owner
        if own_file == target_file:
            if own_pointer == pointer:
                return name  # same origin, already merged or root-local
            if own_node == node:
                return name
            raise CollisionUnresolvable(
                f"components/{section}/{name}: two distinct definitions inside {target_file}"
            )
        if own_node == node:
            return name  # content-equal across files: deduplicate
        stem = Path(target_file).stem
        candidate = f"{name}_from_{stem}"
        clash = self.owners.get((section, candidate))
        if clash is not None and clash[:2] != (target_file, pointer) and clash[2] != node:
            raise CollisionUnresolvable(
                f"components/{section}/{candidate}: suffixed name already taken"
            )
        return candidate


def resolve_refs(raw: RawSpecDocument, resolver: Callable[[str], dict] | None = None) -> ResolvedSpec:
    """Bundle a document: inline all cross-file refs into local components."""
    if resolver is None:
        resolver = file_resolver(raw.source_path.parent)
    doc = copy.deepcopy(raw.document)
    _Bundler(doc, resolver, root_name=raw.source_path.name).run()
    return ResolvedSpec(
        document=doc,
        origin=raw.source_path,
        server_urls=_absolute_server_urls(doc),
        component_index=_build_component_index(doc),
    )


def _build_component_index(doc: dict) -> dict[str, Any]:
    index: dict[str, Any] = {}
    for section, entries in doc.get("components", {}).items():
        if isinstance(entries, dict):
            for name, node in entries.items():
                index[f"{section}/{name}"] = node
    return index


def _absolute_server_urls(doc: dict) -> list[str]:
    urls = []
    for entry in _iter_server_sections(doc):
        for server in entry:
            url = server.get("url", "")
            if _is_absolute(url):
                urls.append(url)
    return urls


def _is_absolute(url: str) -> bool:
    parsed = urlparse(url)
    return bool(parsed.scheme and parsed.netloc)


def _iter_server_sections(doc: dict):
    """Yield every servers array: top level, path level, operation level."""
    top = doc.get("servers")
    if isinstance(top, list):
        yield top
    for item in (doc.get("paths") or {}).values():
        if not isinstance(item, dict):
            continue
        if isinstance(item.get("servers"), list):
            yield item["servers"]
        for method in HTTP_METHODS:
            op = item.get(method)
            if isinstance(op, dict) and isinstance(op.get("servers"), list):
                yield op["servers"]


def derive_service(api_prefix: str) -> str | None:
    """nudm-sdm -> udm: drop the leading n, keep up to the first hyphen."""
    seg = api_prefix.strip("/").split("/")[0] if api_prefix else ""
    if not seg:
        return None
    if seg.startswith("n") and len(seg) > 1:
        return seg[1:].split("-")[0]
    return seg


def derive_scope(api_prefix: str) -> str | None:
    """First path segment of the API root, e.g. nudm-sdm."""
    seg = api_prefix.strip("/").split("/")[0] if api_prefix else ""
    return seg or None


def rewrite_servers(spec: ResolvedSpec, hosts: HostMap) -> ResolvedSpec:
    """Substitute '{apiRoot}' server templates with HostMap hosts.

    Only servers sections are touched.  Already-absolute URLs pass
    through unchanged, which also makes the rewrite idempotent.
    """
    doc = copy.deepcopy(spec.document)
    default_service = None
    top = doc.get("servers")
    if isinstance(top, list) and top:
        url = top[0].get("url", "")
        suffix = url.split("{apiRoot}", 1)[1] if "{apiRoot}" in url else urlparse(url).path
        default_service = derive_service(suffix)
    for section in _iter_server_sections(doc):
        for server in section:
            url = server.get("url", "")
            if _is_absolute(url):
                continue
            if "{apiRoot}" not in url:
                continue
            suffix = url.split("{apiRoot}", 1)[1]
            service = derive_service(suffix) or default_service
            host = hosts.entries.get(service or "", hosts.entries.get("*"))
            if host is None:
                raise UnknownService(
                    f"no HostMap entry for service {service!r} (server url {url!r})"
                )
            server["url"] = f"{hosts.default_scheme}://{host}{suffix}"
            server.pop("variables", None)
    return ResolvedSpec(
        document=doc,
        origin=spec.origin,
        server_urls=_absolute_server_urls(doc),
        component_index=_build_component_index(doc),
    )


def iter_external_refs(doc: Any):
    """Yield every $ref string that still crosses a file boundary."""
    if isinstance(doc, dict):
        ref = doc.get("$ref")
        if isinstance(ref, str) and not ref.startswith("#"):
            yield ref
        for key, value in doc.items():
            if key != "$ref":
                yield from iter_external_refs(value)
    elif isinstance(doc, list):
        for item in doc:
            yield from iter_external_refs(item)


def validate_spec(spec: ResolvedSpec) -> list[Diagnostic]:
    """Structural lint: surface gaps without failing the pipeline."""
    diags: list[Diagnostic] = []
    doc = spec.document
    reachable: set[str] = set()

    def collect_refs(node: Any) -> None:
        if isinstance(node, dict):
            ref = node.get("$ref")
            if isinstance(ref, str) and ref.startswith("#/components/"):
                key = "/".join(ref.split("/")[2:4])
                if key not in reachable:
                    reachable.add(key)
                    target = spec.component_index.get(key)
                    if target is not None:
                        collect_refs(target)
            for k, v in node.items():
                if k != "$ref":
                    collect_refs(v)
        elif isinstance(node, list):
            for item in node:
                collect_refs(item)

    for path, item in (doc.get("paths") or {}).items():
        if not isinstance(item, dict):
            continue
        collect_refs(item)
        shared_params = item.get("parameters", [])
        for method in HTTP_METHODS:
            op = item.get(method)
            if not isinstance(op, dict):
                continue
            loc = f"paths.{path}.{method}"
            if not op.get("responses"):
                diags.append(Diagnostic("warning", "operation lacks responses", loc))
            for param in list(shared_params) + list(op.get("parameters", [])):
                if not isinstance(param, dict) or "$ref" in param:
                    continue
                if "schema" not in param and "content" not in param:
                    name = param.get("name", "?")
                    diags.append(
                        Diagnostic("warning", f"parameter {name!r} lacks a schema", loc)
                    )
    for key in spec.component_index:
        if key not in reachable:
            diags.append(
                Diagnostic("warning", "component unreachable from paths", f"components.{key}")
            )
    return diags


def dump_yaml(doc: dict, path: str | Path) -> None:
    """Write a bundled document: UTF-8, two-space indent, key order kept."""
    text = yaml.safe_dump(doc, sort_keys=False, indent=2, allow_unicode=True, default_flow_style=False)
    Path(path).write_text(text, encoding="utf-8")
