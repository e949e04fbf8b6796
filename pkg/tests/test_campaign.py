"""Campaign tests: config validation, accounting, phases, determinism."""

from __future__ import annotations

import json

import pytest

from sbifuzz.campaign import (
    CampaignConfig,
    ConfigError,
    campaign_config_from_dict,
    load_campaign_config,
    run_campaign,
)
from sbifuzz.checkers import CHECKER_NAMES
from sbifuzz.testbed import SERVICES, TestbedConfig, start_testbed
from sbifuzz.tokens import VerifierMode

from conftest import grammar_for_testbed
from test_checkers import OVERLAY


@pytest.fixture
def bed():
    beds = []

    def factory(**kwargs):
        tb = start_testbed(TestbedConfig(**kwargs))
        beds.append(tb)
        return tb

    yield factory
    for tb in beds:
        tb.shutdown()


def _config_for(tb, **overrides) -> CampaignConfig:
    kwargs = dict(
        targets=list(tb.base_urls.values()),
        token_mode="fetch",
        token_endpoint=tb.token_url,
        budget=250,
        seed=11,
    )
    kwargs.update(overrides)
    return CampaignConfig(**kwargs)


# ===== configuration =====


def test_defaults_fill_in():
    config = CampaignConfig(targets=["http://127.0.0.1:9999"])
    assert config.budget == 2000
    assert config.max_sequence_length == 4
    assert config.instantiations_per_sequence == 4
    assert config.optional_probability == 0.75
    assert config.workers == 1
    assert config.checkers == {name: True for name in CHECKER_NAMES}
    assert config.token_mode is None


def test_partial_checker_flags_keep_the_rest_on():
    config = CampaignConfig(
        targets=["http://127.0.0.1:9999"], checkers={"payload_body": False}
    )
    assert config.checkers["payload_body"] is False
    assert all(config.checkers[name] for name in CHECKER_NAMES if name != "payload_body")


@pytest.mark.parametrize(
    "overrides",
    [
        {"targets": []},
        {"budget": 0},
        {"budget": -5},
        {"max_sequence_length": 0},
        {"instantiations_per_sequence": 0},
        {"optional_probability": 1.5},
        {"workers": 0},
        {"checkers": {"no_such_checker": True}},
        {"token_mode": "steal"},
        {"token_mode": "fetch"},
        {"token_mode": "file"},
    ],
)
def test_invalid_configs_are_rejected(overrides):
    kwargs = dict(targets=["http://127.0.0.1:9999"])
    kwargs.update(overrides)
    with pytest.raises(ConfigError):
        CampaignConfig(**kwargs)


def test_unknown_file_keys_are_rejected():
    with pytest.raises(ConfigError):
        campaign_config_from_dict({"targets": ["http://x"], "budgett": 5})


def test_yaml_and_json_files_load_identically(tmp_path):
    yaml_text = """
targets: [http://127.0.0.1:9999]
budget: 77
seed: 5
checkers:
  malformed_value: false
token:
  mode: fetch
  endpoint: http://127.0.0.1:9999/oauth2/token
  consumer_nf_type: SMF
grammar: g.json
overlay:
  supi: [imsi-208930000000003]
"""
    yaml_path = tmp_path / "c.yaml"
    yaml_path.write_text(yaml_text)
    from_yaml = load_campaign_config(yaml_path)
    json_path = tmp_path / "c.json"
    json_path.write_text(
        json.dumps(
            {
                "targets": ["http://127.0.0.1:9999"],
                "budget": 77,
                "seed": 5,
                "checkers": {"malformed_value": False},
                "token": {
                    "mode": "fetch",
                    "endpoint": "http://127.0.0.1:9999/oauth2/token",
                    "consumer_nf_type": "SMF",
                },
                "grammar": "g.json",
                "overlay": {"supi": ["imsi-208930000000003"]},
            }
        )
    )
    from_json = load_campaign_config(json_path)
    assert from_yaml == from_json
    assert from_yaml.budget == 77
    assert from_yaml.checkers["malformed_value"] is False
    assert from_yaml.consumer_nf_type == "SMF"
    assert from_yaml.grammar_path == "g.json"


def test_missing_config_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_campaign_config(tmp_path / "absent.yaml")


def test_targets_must_cover_the_grammar(bed, tmp_path):
    tb = bed()
    grammar = grammar_for_testbed(tb, overlay=OVERLAY)
    config = CampaignConfig(targets=["http://127.0.0.1:1"], budget=10)
    with pytest.raises(ConfigError):
        run_campaign(grammar, config, tmp_path / "out")


# ===== accounting and intake =====


def _read_log(out_dir):
    path = out_dir / "exchanges.ndjson"
    return [json.loads(line) for line in path.read_text().splitlines()]


def test_clean_campaign_accounts_exactly_and_finds_nothing(bed, tmp_path):
    tb = bed()
    grammar = grammar_for_testbed(tb, overlay=OVERLAY)
    out = tmp_path / "out"
    result = run_campaign(grammar, _config_for(tb), out)

    records = _read_log(out)
    assert result.summary.requests_sent == len(records)
    assert result.summary.requests_sent <= 250
    assert result.summary.sequences_executed > 0
    allowed = {u.split("//")[1] for u in tb.base_urls.values()}
    for record in records:
        assert record["url"].split("//")[1].split("/")[0] in allowed
    # a clean target yields no reports of any class
    assert result.reports == {}
    assert result.reports_dir.exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["requests_sent"] == result.summary.requests_sent
    assert summary["bug_count_by_class"] == {}


def test_budget_is_a_hard_stop(bed, tmp_path):
    tb = bed()
    grammar = grammar_for_testbed(tb, overlay=OVERLAY)
    out = tmp_path / "out"
    result = run_campaign(grammar, _config_for(tb, budget=40), out)
    assert result.summary.requests_sent == 40
    assert len(_read_log(out)) == 40


def test_seeded_bugs_surface_through_their_phases(bed, tmp_path):
    tb = bed(bug_flags=frozenset({"B1", "B5", "B6"}))
    grammar = grammar_for_testbed(tb, overlay=OVERLAY)
    out = tmp_path / "out"
    result = run_campaign(grammar, _config_for(tb, budget=320, seed=3), out)

    crash_keys = [k for k in result.reports if k[0] == "UnhandledError500"]
    sites = set()
    for key in crash_keys:
        body = result.reports[key].evidence["response_body"]
        for site in ("index-oob", "nil-deref", "type-assert"):
            if site in body:
                sites.add((site, key[2]))
    assert ("index-oob", "optional_param_omission") in sites
    assert ("nil-deref", "payload_body") in sites
    assert any(site == "type-assert" for site, _ in sites)
    assert result.summary.bug_count_by_class.get("UnhandledError500", 0) >= 3


def test_checkers_off_leaves_only_exploration(bed, tmp_path):
    tb = bed()
    grammar = grammar_for_testbed(tb, overlay=OVERLAY)
    flags = {name: False for name in CHECKER_NAMES}
    out = tmp_path / "out"
    run_campaign(grammar, _config_for(tb, budget=60, checkers=flags), out)
    prefixes = {r["mutation"].split(":")[0] for r in _read_log(out)}
    assert prefixes == {"explore"}


def test_shadow_verifier_campaign_finds_the_scope_bypass(bed, tmp_path):
    tb = bed(bug_flags=frozenset({"B8"}), verifier_mode=VerifierMode.SEEDED_SCOPE_SHADOW)
    grammar = grammar_for_testbed(tb, overlay=OVERLAY)
    out = tmp_path / "out"
    result = run_campaign(grammar, _config_for(tb, budget=120, seed=2), out)
    bypass = [k for k in result.reports if k[0] == "AuthzScopeBypass"]
    assert bypass, sorted(result.reports)
    report = result.reports[bypass[0]]
    assert report.token_scope is not None
    assert report.expectation and "403" in report.expectation


# ===== determinism =====


def _fixed_binds(base_port: int) -> dict:
    return {service: ("127.0.0.1", base_port + i) for i, service in enumerate(SERVICES)}


def test_two_runs_with_one_seed_are_byte_identical(tmp_path):
    logs = []
    report_sets = []
    for run in ("a", "b"):
        tb = start_testbed(
            TestbedConfig(binds=_fixed_binds(18431), deterministic=True)
        )
        try:
            grammar = grammar_for_testbed(tb, overlay=OVERLAY)
            out = tmp_path / run
            result = run_campaign(grammar, _config_for(tb, budget=220, seed=9), out)
            logs.append((out / "exchanges.ndjson").read_bytes())
            report_sets.append(set(result.reports))
        finally:
            tb.shutdown()
    assert logs[0] == logs[1]
    assert report_sets[0] == report_sets[1]
