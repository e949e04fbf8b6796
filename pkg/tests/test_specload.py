"""Spec pipeline tests: load, bundle, rewrite, validate.

The bundling checks lean on an independent stack-based ref walker so the
"zero external refs" and "every local ref resolves" claims are not
verified by the code under test itself.
"""

from __future__ import annotations

import copy
from pathlib import Path

import pytest
import yaml

from sbifuzz import specload
from sbifuzz.specload import (
    CollisionUnresolvable,
    DanglingRef,
    HostMap,
    MissingRoot,
    ParseError,
    ResolverIO,
    UnknownService,
    UnsupportedVersion,
    load_document,
    resolve_refs,
    rewrite_servers,
    validate_spec,
)


# ===== Independent oracle helpers =====


def _collect_file_refs(tree) -> list[str]:
    """Every $ref naming another file, found by an explicit-stack walk."""
    found: list[str] = []
    stack = [tree]
    while stack:
        node = stack.pop()
        if isinstance(node, dict):
            for key, value in node.items():
                if key == "$ref" and isinstance(value, str) and not value.startswith("#"):
                    found.append(value)
                else:
                    stack.append(value)
        elif isinstance(node, list):
            stack.extend(node)
    return found


def _collect_local_refs(tree) -> list[str]:
    found: list[str] = []
    stack = [tree]
    while stack:
        node = stack.pop()
        if isinstance(node, dict):
            for key, value in node.items():
                if key == "$ref" and isinstance(value, str) and value.startswith("#"):
                    found.append(value)
                else:
                    stack.append(value)
        elif isinstance(node, list):
            stack.extend(node)
    return found


def _deref_local(doc: dict, ref: str):
    assert ref.startswith("#/"), ref
    node = doc
    for seg in ref[2:].split("/"):
        seg = seg.replace("~1", "/").replace("~0", "~")
        assert isinstance(node, dict) and seg in node, f"dangling local ref {ref}"
        node = node[seg]
    return node


def _write(tmp_path: Path, name: str, tree: dict) -> Path:
    path = tmp_path / name
    path.write_text(yaml.safe_dump(tree, sort_keys=False), encoding="utf-8")
    return path


def _minimal_doc(**overrides) -> dict:
    doc = {
        "openapi": "3.0.0",
        "info": {"title": "t", "version": "1"},
        "paths": {},
    }
    doc.update(overrides)
    return doc


# ===== load_document =====


def test_load_document_reads_corpus_spec(spec_dir):
    raw = load_document(spec_dir / "TS29503_Nudm_SDM.yaml")
    assert raw.format_version == "3.0.0"
    param = raw.document["paths"]["/shared-data"]["get"]["parameters"][1]
    assert param["name"] == "supported-features"
    assert param["schema"]["$ref"] == "TS29571_CommonData.yaml#/components/schemas/SupportedFeatures"


def test_load_document_rejects_swagger_two(tmp_path):
    path = _write(tmp_path, "old.yaml", {"openapi": "2.0", "info": {}, "paths": {}})
    with pytest.raises(UnsupportedVersion):
        load_document(path)


def test_load_document_rejects_future_version(tmp_path):
    path = _write(tmp_path, "next.yaml", _minimal_doc(openapi="3.2.0"))
    with pytest.raises(UnsupportedVersion):
        load_document(path)


def test_load_document_accepts_three_one(tmp_path):
    path = _write(tmp_path, "new.yaml", _minimal_doc(openapi="3.1.0"))
    assert load_document(path).format_version == "3.1.0"


def test_load_document_missing_paths(tmp_path):
    path = _write(tmp_path, "nopaths.yaml", {"openapi": "3.0.0", "info": {}})
    with pytest.raises(MissingRoot):
        load_document(path)


def test_load_document_parse_error(tmp_path):
    path = tmp_path / "broken.yaml"
    path.write_text("openapi: [unclosed", encoding="utf-8")
    with pytest.raises(ParseError):
        load_document(path)


def test_load_document_missing_file(tmp_path):
    with pytest.raises(ParseError):
        load_document(tmp_path / "absent.yaml")


# ===== resolve_refs =====


def test_resolve_corpus_has_zero_external_refs(corpus_paths):
    for path in corpus_paths:
        resolved = resolve_refs(load_document(path))
        assert _collect_file_refs(resolved.document) == [], path.name


def test_resolve_every_local_ref_resolves(corpus_paths):
    for path in corpus_paths:
        resolved = resolve_refs(load_document(path))
        for ref in _collect_local_refs(resolved.document):
            _deref_local(resolved.document, ref)


def test_resolve_supported_features_becomes_local_component(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    param = resolved.document["paths"]["/shared-data"]["get"]["parameters"][1]
    assert param["schema"]["$ref"] == "#/components/schemas/SupportedFeatures"
    merged = _deref_local(resolved.document, param["schema"]["$ref"])
    assert merged == {"type": "string", "pattern": "^[A-Fa-f0-9]*$"}
    assert resolved.component_index["schemas/SupportedFeatures"] == merged


def test_resolve_pulls_transitive_refs(spec_dir):
    # Tai lives in the common file and itself refs PlmnId there
    resolved = resolve_refs(load_document(spec_dir / "TS29531_Nnssf_NSSAIAvailability.yaml"))
    tai = resolved.component_index["schemas/Tai"]
    assert tai["properties"]["plmnId"]["$ref"] == "#/components/schemas/PlmnId"
    assert "schemas/PlmnId" in resolved.component_index


def test_resolve_is_idempotent(corpus_paths):
    for path in corpus_paths:
        once = resolve_refs(load_document(path))
        again = resolve_refs(
            specload.RawSpecDocument(path, copy.deepcopy(once.document), "3.0.0"),
            resolver=lambda name: (_ for _ in ()).throw(AssertionError("resolver used")),
        )
        assert again.document == once.document


def test_resolve_preserves_cycles_as_local_refs(tmp_path):
    a = _minimal_doc(
        paths={"/x": {"get": {"responses": {"200": {"description": "ok"}}}}},
        components={
            "schemas": {
                "ANode": {
                    "type": "object",
                    "properties": {"next": {"$ref": "b.yaml#/components/schemas/BNode"}},
                }
            }
        },
    )
    b = _minimal_doc(
        components={
            "schemas": {
                "BNode": {
                    "type": "object",
                    "properties": {"prev": {"$ref": "a.yaml#/components/schemas/ANode"}},
                }
            }
        },
    )
    path_a = _write(tmp_path, "a.yaml", a)
    _write(tmp_path, "b.yaml", b)
    resolved = resolve_refs(load_document(path_a))
    assert _collect_file_refs(resolved.document) == []
    bnode = resolved.component_index["schemas/BNode"]
    # the cycle closes back on the root's own ANode, not an infinite inline
    assert bnode["properties"]["prev"]["$ref"] == "#/components/schemas/ANode"
    assert "schemas/ANode_from_a" not in resolved.component_index
    _deref_local(resolved.document, bnode["properties"]["prev"]["$ref"])


def test_resolve_collision_renames_with_filestem(tmp_path):
    main = _minimal_doc(
        paths={},
        components={
            "schemas": {
                "Holder": {
                    "type": "object",
                    "properties": {
                        "x": {"$ref": "one.yaml#/components/schemas/Thing"},
                        "y": {"$ref": "two.yaml#/components/schemas/Thing"},
                    },
                }
            }
        },
    )
    _write(tmp_path, "one.yaml", _minimal_doc(components={"schemas": {"Thing": {"type": "string"}}}))
    _write(tmp_path, "two.yaml", _minimal_doc(components={"schemas": {"Thing": {"type": "integer"}}}))
    resolved = resolve_refs(load_document(_write(tmp_path, "main.yaml", main)))
    holder = resolved.component_index["schemas/Holder"]
    assert holder["properties"]["x"]["$ref"] == "#/components/schemas/Thing"
    assert holder["properties"]["y"]["$ref"] == "#/components/schemas/Thing_from_two"
    assert resolved.component_index["schemas/Thing"] == {"type": "string"}
    assert resolved.component_index["schemas/Thing_from_two"] == {"type": "integer"}


def test_resolve_content_equal_components_deduplicate(tmp_path):
    main = _minimal_doc(
        components={
            "schemas": {
                "Holder": {
                    "type": "object",
                    "properties": {
                        "x": {"$ref": "one.yaml#/components/schemas/Same"},
                        "y": {"$ref": "two.yaml#/components/schemas/Same"},
                    },
                }
            }
        },
    )
    shared = {"type": "string", "maxLength": 4}
    _write(tmp_path, "one.yaml", _minimal_doc(components={"schemas": {"Same": dict(shared)}}))
    _write(tmp_path, "two.yaml", _minimal_doc(components={"schemas": {"Same": dict(shared)}}))
    resolved = resolve_refs(load_document(_write(tmp_path, "main.yaml", main)))
    holder = resolved.component_index["schemas/Holder"]
    assert holder["properties"]["x"]["$ref"] == "#/components/schemas/Same"
    assert holder["properties"]["y"]["$ref"] == "#/components/schemas/Same"
    assert "schemas/Same_from_two" not in resolved.component_index


def test_resolve_same_origin_same_name_conflict(tmp_path):
    main = _minimal_doc(
        components={
            "schemas": {
                "Holder": {
                    "type": "object",
                    "properties": {
                        "x": {"$ref": "one.yaml#/components/schemas/Thing"},
                        "y": {"$ref": "one.yaml#/defs/Thing"},
                    },
                }
            }
        },
    )
    other = _minimal_doc(components={"schemas": {"Thing": {"type": "string"}}})
    other["defs"] = {"Thing": {"type": "integer"}}
    _write(tmp_path, "one.yaml", other)
    with pytest.raises(CollisionUnresolvable):
        resolve_refs(load_document(_write(tmp_path, "main.yaml", main)))


def test_resolve_dangling_pointer(tmp_path):
    main = _minimal_doc(
        components={"schemas": {"H": {"$ref": "one.yaml#/components/schemas/Missing"}}}
    )
    _write(tmp_path, "one.yaml", _minimal_doc())
    with pytest.raises(DanglingRef):
        resolve_refs(load_document(_write(tmp_path, "main.yaml", main)))


def test_resolve_unreadable_target_file(tmp_path):
    main = _minimal_doc(
        components={"schemas": {"H": {"$ref": "gone.yaml#/components/schemas/X"}}}
    )
    with pytest.raises(ResolverIO):
        resolve_refs(load_document(_write(tmp_path, "main.yaml", main)))


# ===== rewrite_servers =====


def test_rewrite_substitutes_api_root(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    rewritten = rewrite_servers(resolved, HostMap(entries={"udm": "udm:8000"}))
    server = rewritten.document["servers"][0]
    assert server["url"] == "http://udm:8000/nudm-sdm/v2"
    assert "variables" not in server
    assert rewritten.server_urls == ["http://udm:8000/nudm-sdm/v2"]


def test_rewrite_touches_only_servers(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    rewritten = rewrite_servers(resolved, HostMap(entries={"udm": "udm:8000"}))
    pruned_before = copy.deepcopy(resolved.document)
    pruned_before.pop("servers")
    pruned_after = copy.deepcopy(rewritten.document)
    pruned_after.pop("servers")
    assert pruned_before == pruned_after


def test_rewrite_handles_path_level_servers(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29510_Nnrf_Token_Disc.yaml"))
    rewritten = rewrite_servers(resolved, HostMap(entries={"nrf": "127.0.0.1:8100"}))
    assert rewritten.document["servers"][0]["url"] == "http://127.0.0.1:8100/nnrf-disc/v1"
    token_servers = rewritten.document["paths"]["/oauth2/token"]["servers"]
    assert token_servers[0]["url"] == "http://127.0.0.1:8100"


def test_rewrite_leaves_absolute_urls_untouched(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    once = rewrite_servers(resolved, HostMap(entries={"udm": "udm:8000"}))
    twice = rewrite_servers(once, HostMap(entries={}))
    assert twice.document == once.document


def test_rewrite_unknown_service(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    with pytest.raises(UnknownService):
        rewrite_servers(resolved, HostMap(entries={"pcf": "x:1"}))


def test_rewrite_wildcard_default_entry(spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    rewritten = rewrite_servers(resolved, HostMap(entries={"*": "any:9"}))
    assert rewritten.document["servers"][0]["url"] == "http://any:9/nudm-sdm/v2"


def test_server_urls_absolute_after_rewrite(corpus_paths):
    hosts = HostMap(entries={"*": "127.0.0.1:9000"})
    for path in corpus_paths:
        rewritten = rewrite_servers(resolve_refs(load_document(path)), hosts)
        assert rewritten.server_urls, path.name
        for url in rewritten.server_urls:
            assert url.startswith("http://127.0.0.1:9000"), url


def test_derive_service_names():
    assert specload.derive_service("/nudm-sdm/v2") == "udm"
    assert specload.derive_service("/nnssf-nssaiavailability/v1") == "nssf"
    assert specload.derive_service("/npcf-bdtpolicycontrol/v1") == "pcf"
    assert specload.derive_service("/nnrf-disc/v1") == "nrf"
    assert specload.derive_service("") is None


# ===== validate_spec =====


def test_validate_corpus_clean_of_errors(corpus_paths):
    hosts = HostMap(entries={"*": "127.0.0.1:9000"})
    for path in corpus_paths:
        rewritten = rewrite_servers(resolve_refs(load_document(path)), hosts)
        diags = validate_spec(rewritten)
        assert all(d.level == "warning" for d in diags)
        # corpus keeps params schema'd and responses declared
        assert not [d for d in diags if "lacks" in d.message], path.name


def test_validate_flags_param_without_schema(tmp_path):
    doc = _minimal_doc(
        paths={
            "/x": {
                "get": {
                    "parameters": [{"name": "q", "in": "query"}],
                    "responses": {"200": {"description": "ok"}},
                }
            }
        }
    )
    resolved = resolve_refs(load_document(_write(tmp_path, "s.yaml", doc)))
    diags = validate_spec(resolved)
    assert any("'q' lacks a schema" in d.message for d in diags)


def test_validate_flags_missing_responses(tmp_path):
    doc = _minimal_doc(paths={"/x": {"get": {}}})
    resolved = resolve_refs(load_document(_write(tmp_path, "s.yaml", doc)))
    diags = validate_spec(resolved)
    assert any("lacks responses" in d.message for d in diags)


def test_validate_flags_unreachable_component(tmp_path):
    doc = _minimal_doc(
        paths={"/x": {"get": {"responses": {"200": {"description": "ok"}}}}},
        components={"schemas": {"Orphan": {"type": "string"}}},
    )
    resolved = resolve_refs(load_document(_write(tmp_path, "s.yaml", doc)))
    diags = validate_spec(resolved)
    assert any("unreachable" in d.message and "Orphan" in d.location for d in diags)


def test_dump_yaml_round_trips(tmp_path, spec_dir):
    resolved = resolve_refs(load_document(spec_dir / "TS29503_Nudm_SDM.yaml"))
    out = tmp_path / "bundled.yaml"
    specload.dump_yaml(resolved.document, out)
    text = out.read_text(encoding="utf-8")
    assert yaml.safe_load(text) == resolved.document
    assert "\t" not in text
