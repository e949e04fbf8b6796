"""Command line front end: bundle, compile, testbed, fuzz, report, replay."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

import yaml

from .campaign import (
    CampaignError,
    ConfigError,
    load_campaign_config,
    run_campaign,
)
from .detect import load_report_documents
from .engine import EngineError, HttpTransport
from .grammar import Grammar, GrammarError, compile_corpus, grammar_from_json, grammar_to_json
from .replay import load_replay_document, replay_bug, scope_provider_factory
from .specload import (
    HostMap,
    SpecError,
    dump_yaml,
    file_resolver,
    iter_external_refs,
    load_document,
    resolve_refs,
    rewrite_servers,
    validate_spec,
)
from .testbed import BUG_FLAGS, DEFAULT_KEY, TestbedConfig, TestbedError, start_testbed
from .tokens import TokenError, VerifierMode

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FINDINGS = 2
EXIT_INTERNAL = 3

KEY_ENV = "SBIFUZZ_KEY"


class UsageFailure(Exception):
    """Bad arguments discovered after argparse accepted them."""


def _parse_host_entry(raw: str) -> tuple[str, str]:
    name, sep, host = raw.partition("=")
    if not sep or not name or not host:
        raise UsageFailure(f"expected service=host:port, got {raw!r}")
    return name, host


def _parse_bind_entry(raw: str) -> tuple[str, tuple[str, int]]:
    name, host = _parse_host_entry(raw)
    addr, sep, port = host.rpartition(":")
    if not sep:
        raise UsageFailure(f"expected service=host:port, got {raw!r}")
    try:
        return name, (addr, int(port))
    except ValueError:
        raise UsageFailure(f"port must be an integer in {raw!r}") from None


def _load_grammar(path) -> Grammar:
    return grammar_from_json(Path(path).read_text(encoding="utf-8"))


def _resolved_specs(paths: list[str]):
    specs = []
    for path in paths:
        raw = load_document(path)
        specs.append(resolve_refs(raw, file_resolver(Path(path).parent)))
    return specs


def _cmd_bundle(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path, spec in zip(args.specs, _resolved_specs(args.specs)):
        leftovers = sorted(set(iter_external_refs(spec.document)))
        if leftovers:
            raise SpecError(f"{path}: unresolved external refs remain: {leftovers}")
        for diag in validate_spec(spec):
            print(f"warning: {path}: {diag.message}", file=sys.stderr)
        target = out / (Path(path).stem + ".yaml")
        dump_yaml(spec.document, target)
        print(f"bundled {path} -> {target}")
    return EXIT_OK


def _cmd_compile(args) -> int:
    specs = _resolved_specs(args.specs)
    if args.host:
        hosts = dict(_parse_host_entry(raw) for raw in args.host)
        specs = [rewrite_servers(spec, HostMap(entries=hosts)) for spec in specs]
    overlay = None
    if args.overlay:
        overlay = yaml.safe_load(Path(args.overlay).read_text(encoding="utf-8"))
        if overlay is not None and not isinstance(overlay, dict):
            raise UsageFailure("overlay file must hold a mapping of name -> values")
    grammar = compile_corpus(specs, overlay=overlay)
    text = grammar_to_json(
        grammar.templates, grammar.graph, grammar.dictionary, grammar.seed_hash
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"compiled {len(grammar.templates)} operations, {len(grammar.graph.edges)} dependency edges -> {out}")
    return EXIT_OK


def _parse_flags(raw: str | None) -> frozenset:
    if not raw:
        return frozenset()
    if raw.lower() == "all":
        return BUG_FLAGS
    flags = frozenset(part.strip().upper() for part in raw.split(",") if part.strip())
    unknown = flags - BUG_FLAGS
    if unknown:
        raise UsageFailure(f"unknown bug flags: {sorted(unknown)}")
    return flags


def _cmd_testbed(args) -> int:
    flags = _parse_flags(args.flags)
    if args.mode:
        try:
            mode = VerifierMode(args.mode)
        except ValueError:
            raise UsageFailure(f"unknown verifier mode {args.mode!r}") from None
    elif "B8" in flags:
        # B8 only manifests under the shadow verifier; keep --flags all usable.
        mode = VerifierMode.SEEDED_SCOPE_SHADOW
        print("note: B8 enabled, defaulting verifier mode to seeded_scope_shadow", file=sys.stderr)
    else:
        mode = VerifierMode.CORRECT
    key = os.environ.get(KEY_ENV, "").encode("utf-8") or DEFAULT_KEY
    kwargs: dict = {
        "key": key,
        "bug_flags": flags,
        "verifier_mode": mode,
        "deterministic": args.deterministic,
    }
    if args.bind:
        kwargs["binds"] = dict(_parse_bind_entry(raw) for raw in args.bind)
    testbed = start_testbed(TestbedConfig(**kwargs))
    try:
        # one line so a wrapper script can readline() the addresses
        print(
            json.dumps(
                {"base_urls": testbed.base_urls, "token_url": testbed.token_url},
                sort_keys=True,
            ),
            flush=True,
        )
        if args.run_for > 0:
            time.sleep(args.run_for)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        testbed.shutdown()
    return EXIT_OK


def _cmd_fuzz(args) -> int:
    config = load_campaign_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.budget is not None:
        overrides["budget"] = args.budget
    if overrides:
        config = dataclasses.replace(config, **overrides)
    grammar_path = args.grammar or config.grammar_path
    if not grammar_path:
        raise UsageFailure("no grammar: pass --grammar or set 'grammar' in the campaign file")
    grammar = _load_grammar(grammar_path)
    result = run_campaign(grammar, config, Path(args.out))
    summary = result.summary
    print(f"requests sent: {summary.requests_sent}")
    print(f"sequences executed: {summary.sequences_executed}")
    print(f"wall time: {summary.wall_time:.1f}s")
    if summary.bug_count_by_class:
        for name in sorted(summary.bug_count_by_class):
            print(f"  {name}: {summary.bug_count_by_class[name]}")
        print(f"reports: {result.reports_dir}")
        return EXIT_FINDINGS
    print("no findings")
    return EXIT_OK


def _report_base(path: Path) -> tuple[Path, Path]:
    """Accept a campaign out dir or its reports/ subdir; outputs go to the base."""
    if (path / "reports").is_dir():
        return path, path / "reports"
    return path, path


def _cmd_report(args) -> int:
    # imported here so the other subcommands skip the matplotlib start-up cost
    from .reportview import render_figures, render_table, summarize, write_tsv

    base = Path(args.reports)
    if not base.is_dir():
        raise UsageFailure(f"{base} is not a directory")
    base, reports_dir = _report_base(base)
    documents = load_report_documents(reports_dir)
    rows = summarize(documents)
    sys.stdout.write(render_table(rows))
    tsv = write_tsv(rows, base / "summary.tsv")
    figures = render_figures(rows, base)
    print(f"wrote {tsv}")
    for figure in figures:
        print(f"wrote {figure}")
    return EXIT_OK


def _cmd_replay(args) -> int:
    document = load_replay_document(args.replay)
    config = load_campaign_config(args.config) if args.config else None
    grammar_path = args.grammar or (config.grammar_path if config else None)
    if not grammar_path:
        raise UsageFailure("no grammar: pass --grammar or -c with a campaign file")
    targets = list(args.target or (config.targets if config else []))
    if not targets:
        raise UsageFailure("no targets: pass --target or -c with a campaign file")
    token_url = args.token_url or (config.token_endpoint if config else None)
    factory = None
    if token_url:
        consumer_id = config.consumer_instance_id if config else None
        consumer_nf = config.consumer_nf_type if config else "AMF"
        if not consumer_id:
            from .campaign import DEFAULT_CONSUMER_ID

            consumer_id = DEFAULT_CONSUMER_ID
        allowlist = targets + [token_url]
        factory = scope_provider_factory(token_url, consumer_id, consumer_nf)
    else:
        allowlist = targets
    grammar = _load_grammar(grammar_path)
    transport = HttpTransport(allowlist=allowlist)
    try:
        result = replay_bug(document, grammar, transport, token_provider_factory=factory)
    finally:
        transport.close()
    print(result.detail)
    return EXIT_FINDINGS if result.reproduced else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sbifuzz",
        description="Grammar-based stateful fuzzer for service-based REST cores.",
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="store_true",
        help="show per-phase progress on stderr",
    )
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("bundle", help="inline external refs, write self-contained specs")
    p.add_argument("specs", nargs="+", help="input OpenAPI documents")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_bundle)

    p = sub.add_parser("compile", help="compile bundled specs into one grammar")
    p.add_argument("specs", nargs="+", help="bundled OpenAPI documents")
    p.add_argument("-o", "--out", required=True, help="grammar.json path")
    p.add_argument(
        "--host",
        action="append",
        metavar="service=host:port",
        help="rewrite a service's server URL (repeatable)",
    )
    p.add_argument("--overlay", help="YAML/JSON mapping of value-pool names to entries")
    p.set_defaults(func=_cmd_compile)

    p = sub.add_parser("testbed", help="run the seeded mock core")
    p.add_argument("--flags", help="comma-separated bug flags (B1..B8) or 'all'")
    p.add_argument(
        "--mode",
        choices=[m.value for m in VerifierMode],
        help="token verifier behaviour on every producer",
    )
    p.add_argument(
        "--bind",
        action="append",
        metavar="service=host:port",
        help="fix a service's listen address (repeatable; default: loopback, ephemeral)",
    )
    p.add_argument(
        "--deterministic",
        action="store_true",
        help="frozen clock and sequential resource ids",
    )
    p.add_argument(
        "--run-for",
        type=float,
        default=0.0,
        metavar="SECONDS",
        help="serve for a fixed time then exit (default: until interrupted)",
    )
    p.set_defaults(func=_cmd_testbed)

    p = sub.add_parser("fuzz", help="run a campaign from a config file")
    p.add_argument("-c", "--config", required=True, help="campaign YAML/JSON file")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.add_argument("--grammar", help="grammar.json (overrides the config)")
    p.add_argument("--seed", type=int, help="override the campaign seed")
    p.add_argument("--budget", type=int, help="override the request budget")
    p.set_defaults(func=_cmd_fuzz)

    p = sub.add_parser("report", help="summarize written bug reports")
    p.add_argument("reports", help="campaign output directory (or its reports/ subdir)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("replay", help="re-execute one report's minimal sequence")
    p.add_argument("replay", help="path to a bucket's replay.json")
    p.add_argument("-c", "--config", help="campaign file supplying grammar/targets/token")
    p.add_argument("--grammar", help="grammar.json (overrides the config)")
    p.add_argument(
        "--target",
        action="append",
        metavar="URL",
        help="allowed base URL (repeatable; overrides the config)",
    )
    p.add_argument("--token-url", help="token endpoint for scoped replays")
    p.set_defaults(func=_cmd_replay)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return EXIT_OK if code == 0 else EXIT_USAGE
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_USAGE
    except (
        UsageFailure,
        ConfigError,
        CampaignError,
        SpecError,
        GrammarError,
        TestbedError,
        TokenError,
        EngineError,
        OSError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # pragma: no cover - last resort
        traceback.print_exc()
        return EXIT_INTERNAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
