"""Shared fixtures: corpus paths, bundled grammar, live testbed factory."""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from urllib.parse import urlsplit

import pytest

CORPUS_FILES = [
    "TS29503_Nudm_SDM.yaml",
    "TS29531_Nnssf_NSSAIAvailability.yaml",
    "TS29554_Npcf_BDTPolicyControl.yaml",
    "TS29510_Nnrf_Token_Disc.yaml",
]

COMMON_FILE = "TS29571_CommonData.yaml"

SPEC_DIR = Path(str(resources.files("sbifuzz"))) / "fixtures" / "specs"


@pytest.fixture(scope="session")
def spec_dir() -> Path:
    return SPEC_DIR


@pytest.fixture(scope="session")
def corpus_paths(spec_dir) -> list[Path]:
    return [spec_dir / name for name in CORPUS_FILES]


def build_corpus_grammar(hosts: dict, overlay: dict | None = None):
    """Compile the fixture corpus with servers pointed at the given hosts."""
    from sbifuzz.grammar import compile_corpus
    from sbifuzz.specload import HostMap, file_resolver, load_document, resolve_refs, rewrite_servers

    specs = []
    for name in CORPUS_FILES:
        raw = load_document(SPEC_DIR / name)
        resolved = resolve_refs(raw, file_resolver(SPEC_DIR))
        resolved = rewrite_servers(resolved, HostMap(entries=hosts))
        specs.append(resolved)
    return compile_corpus(specs, overlay=overlay)


def grammar_for_testbed(testbed, overlay: dict | None = None):
    """Corpus grammar whose server URLs target a live testbed's ports."""
    hosts = {service: urlsplit(base).netloc for service, base in testbed.base_urls.items()}
    return build_corpus_grammar(hosts, overlay=overlay)
