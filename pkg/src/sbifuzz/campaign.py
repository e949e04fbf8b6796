"""Campaign orchestration: checker phases, a budgeted frontier walk, reports.

A run drives five phases against the allowlisted targets: wrong-scope
probes, optional-parameter omission, malformed formatted values, body
variants off a stable baseline, then breadth-first sequence exploration.
Every exchange lands in exchanges.ndjson; classified findings are
bucketed and written under reports/.
"""

from __future__ import annotations

import json
import logging
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from urllib.parse import urlsplit

import yaml

from .checkers import (
    CHECKER_NAMES,
    cross_service_token_checker,
    malformed_value_checker,
    optional_param_omission_checker,
    payload_body_checker,
    stable_request,
    status_mapping_checker,
)
from .detect import BugReport, bucket, classify, write_reports
from .engine import (
    DEFAULT_OPTIONAL_PROBABILITY,
    HttpTransport,
    RateLimiter,
    SequencePlanner,
    execute_sequence,
    send_request,
)
from .grammar import Grammar
from .tokens import TokenProviderConfig, TokenRequest, token_provider

logger = logging.getLogger(__name__)

DEFAULT_CONSUMER_ID = "5c1d0e9f-3a2b-4c5d-8e7f-6a5b4c3d2e1f"

_WRITE_METHODS = ("POST", "PUT", "PATCH")


class CampaignError(Exception):
    pass


class ConfigError(CampaignError):
    pass


class BudgetExhausted(CampaignError):
    """Raised by the budgeted transport once the request allowance is spent."""


@dataclass
class CampaignConfig:
    targets: list[str] = field(default_factory=list)
    budget: int = 2000
    seed: int = 0
    max_sequence_length: int = 4
    instantiations_per_sequence: int = 4
    optional_probability: float = DEFAULT_OPTIONAL_PROBABILITY
    rate_limit: float | None = None
    workers: int = 1
    checkers: dict = field(default_factory=lambda: {name: True for name in CHECKER_NAMES})
    token_mode: str | None = None  # "fetch" | "file" | None for bare requests
    token_endpoint: str | None = None
    token_path: str | None = None
    consumer_instance_id: str = DEFAULT_CONSUMER_ID
    consumer_nf_type: str = "AMF"
    grammar_path: str | None = None
    overlay: dict = field(default_factory=dict)  # compile-time input, kept for provenance

    def __post_init__(self):
        if not self.targets:
            raise ConfigError("at least one target base URL is required")
        if self.budget <= 0:
            raise ConfigError("budget must be positive")
        if self.max_sequence_length < 1:
            raise ConfigError("max_sequence_length must be at least 1")
        if self.instantiations_per_sequence < 1:
            raise ConfigError("instantiations_per_sequence must be at least 1")
        if not 0.0 <= self.optional_probability <= 1.0:
            raise ConfigError("optional_probability must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        unknown = set(self.checkers) - set(CHECKER_NAMES)
        if unknown:
            raise ConfigError(f"unknown checkers: {sorted(unknown)}")
        for name in CHECKER_NAMES:
            self.checkers.setdefault(name, True)
        if self.token_mode not in (None, "fetch", "file"):
            raise ConfigError("token mode must be 'fetch' or 'file' when given")
        if self.token_mode == "fetch" and not self.token_endpoint:
            raise ConfigError("fetch token mode requires an endpoint")
        if self.token_mode == "file" and not self.token_path:
            raise ConfigError("file token mode requires a path")


def campaign_config_from_dict(data: dict) -> CampaignConfig:
    if not isinstance(data, dict):
        raise ConfigError("campaign config must be a mapping")
    known = {
        "targets",
        "budget",
        "seed",
        "max_sequence_length",
        "instantiations_per_sequence",
        "optional_probability",
        "rate_limit",
        "workers",
        "checkers",
        "token",
        "grammar",
        "overlay",
    }
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict = {}
    for name in (
        "targets",
        "budget",
        "seed",
        "max_sequence_length",
        "instantiations_per_sequence",
        "optional_probability",
        "rate_limit",
        "workers",
        "overlay",
    ):
        if name in data:
            kwargs[name] = data[name]
    if "checkers" in data:
        flags = data["checkers"]
        if not isinstance(flags, dict):
            raise ConfigError("checkers must map checker names to booleans")
        kwargs["checkers"] = dict(flags)
    if "grammar" in data:
        kwargs["grammar_path"] = data["grammar"]
    token = data.get("token")
    if token is not None:
        if not isinstance(token, dict):
            raise ConfigError("token must be a mapping")
        kwargs["token_mode"] = token.get("mode")
        kwargs["token_endpoint"] = token.get("endpoint")
        kwargs["token_path"] = token.get("path")
        if "consumer_instance_id" in token:
            kwargs["consumer_instance_id"] = token["consumer_instance_id"]
        if "consumer_nf_type" in token:
            kwargs["consumer_nf_type"] = token["consumer_nf_type"]
    try:
        return CampaignConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_campaign_config(path) -> CampaignConfig:
    """Read a campaign config file; JSON parses as YAML, so both work."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} does not parse: {exc}") from exc
    return campaign_config_from_dict(data)


@dataclass
class CampaignSummary:
    requests_sent: int
    sequences_executed: int
    bug_count_by_class: dict
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "requests_sent": self.requests_sent,
            "sequences_executed": self.sequences_executed,
            "bug_count_by_class": dict(self.bug_count_by_class),
            "wall_time": self.wall_time,
        }


@dataclass
class CampaignResult:
    summary: CampaignSummary
    reports: dict
    out_dir: Path

    @property
    def log_path(self) -> Path:
        return self.out_dir / "exchanges.ndjson"

    @property
    def reports_dir(self) -> Path:
        return self.out_dir / "reports"


class _Budget:
    def __init__(self, limit: int):
        self.limit = limit
        self.used = 0
        self._lock = threading.Lock()

    def take(self) -> bool:
        with self._lock:
            if self.used >= self.limit:
                return False
            self.used += 1
            return True


class _BudgetedTransport:
    """Counts every send against the campaign budget before passing it on.

    Each thread gets its own underlying session; the budget and limiter
    are shared, so the cap holds across workers.
    """

    def __init__(self, allowlist, budget: _Budget, rate_limit: float | None):
        self._allowlist = list(allowlist)
        self._budget = budget
        self._limiter = RateLimiter(rate_limit)
        self._local = threading.local()
        self._all: list[HttpTransport] = []
        self._lock = threading.Lock()

    def _inner(self) -> HttpTransport:
        transport = getattr(self._local, "transport", None)
        if transport is None:
            transport = HttpTransport(allowlist=self._allowlist, rate_limiter=self._limiter)
            self._local.transport = transport
            with self._lock:
                self._all.append(transport)
        return transport

    def send(self, request):
        if not self._budget.take():
            raise BudgetExhausted(f"budget of {self._budget.limit} requests is spent")
        return self._inner().send(request)

    def close(self) -> None:
        with self._lock:
            for transport in self._all:
                transport.close()
            self._all.clear()


def _scope_by_service(grammar: Grammar) -> dict:
    scopes: dict = {}
    for template in grammar.templates:  # already sorted by template_id
        scopes.setdefault(template.service, template.scope)
    return scopes


def _build_providers(grammar: Grammar, config: CampaignConfig) -> dict:
    """One token source per service, minting that service's own scope."""
    if config.token_mode is None:
        return {}
    if config.token_mode == "file":
        provider = token_provider(TokenProviderConfig(mode="file", path=config.token_path))
        return {service: provider for service in grammar.services}
    providers = {}
    for service, scope in _scope_by_service(grammar).items():
        request = TokenRequest(
            consumer_instance_id=config.consumer_instance_id,
            consumer_nf_type=config.consumer_nf_type,
            target_nf_type=service.upper(),
            requested_scope=scope,
        )
        providers[service] = token_provider(
            TokenProviderConfig(mode="fetch", endpoint=config.token_endpoint, request=request)
        )
    return providers


def _cross_scope_factory(grammar: Grammar, config: CampaignConfig):
    """Token factory for wrong-scope probes: mints the holder's scope."""
    scopes = _scope_by_service(grammar)

    def factory(holder: str):
        request = TokenRequest(
            consumer_instance_id=config.consumer_instance_id,
            consumer_nf_type=config.consumer_nf_type,
            target_nf_type=holder.upper(),
            requested_scope=scopes[holder],
        )
        return token_provider(
            TokenProviderConfig(mode="fetch", endpoint=config.token_endpoint, request=request)
        )

    return factory


def _check_targets_cover_grammar(grammar: Grammar, config: CampaignConfig) -> None:
    allowed = {urlsplit(u).netloc for u in config.targets}
    for template in grammar.templates:
        host = urlsplit(template.server_url).netloc
        if host not in allowed:
            raise ConfigError(
                f"{template.template_id} is served by {host}, which is not in targets"
            )


class _Runner:
    def __init__(self, grammar: Grammar, config: CampaignConfig, out_dir):
        self.grammar = grammar
        self.config = config
        self.out = Path(out_dir)
        self.budget = _Budget(config.budget)
        self.transport = _BudgetedTransport(config.targets, self.budget, config.rate_limit)
        self.providers = _build_providers(grammar, config)
        self.reports: dict[tuple, BugReport] = {}
        self.sequences_executed = 0
        self._sequence_counter = 0
        self._log_lock = threading.Lock()
        self._intake_lock = threading.Lock()
        self._log_file = None

    # --- intake ---

    def _sink(self, exchange) -> None:
        record = json.dumps(
            exchange.to_log_record(), sort_keys=True, separators=(",", ":")
        )
        with self._log_lock:
            self._log_file.write(record + "\n")

    def _take_in(self, exchange, template, finding=None, sequence=None) -> None:
        if finding is None and self.config.checkers.get("status_mapping", True):
            finding = status_mapping_checker(exchange, template)
        candidate = classify(exchange, template, finding=finding, sequence_exchanges=sequence)
        if candidate is None:
            return
        with self._intake_lock:
            bucket([candidate], reports=self.reports)

    # --- phases ---

    def _phase_cross_service(self) -> None:
        if not self.config.checkers.get("cross_service_token", True):
            return
        if self.config.token_mode != "fetch":
            logger.info("cross-service probes need a token endpoint; phase skipped")
            return
        factory = _cross_scope_factory(self.grammar, self.config)
        for finding in cross_service_token_checker(
            self.grammar, factory, self.transport, sink=self._sink
        ):
            template = self.grammar.template(finding.mutated_request.template_id)
            self._take_in(finding.observed, template, finding=finding)

    def _send_variants(self, variants, service) -> None:
        provider = self.providers.get(service)
        for request in variants:
            template = self.grammar.template(request.template_id)
            exchange = send_request(request, self.transport, provider=provider, sink=self._sink)
            self._take_in(exchange, template)

    def _phase_omission(self) -> None:
        if not self.config.checkers.get("optional_param_omission", True):
            return
        for template in self.grammar.templates:
            variants = optional_param_omission_checker(template, self.grammar.dictionary)
            self._send_variants(variants, template.service)

    def _phase_malformed(self) -> None:
        if not self.config.checkers.get("malformed_value", True):
            return
        for template in self.grammar.templates:
            variants = malformed_value_checker(template, self.grammar.dictionary)
            self._send_variants(variants, template.service)

    def _phase_body(self) -> None:
        if not self.config.checkers.get("payload_body", True):
            return
        for template in self.grammar.templates:
            if template.method not in _WRITE_METHODS or template.body_schema is None:
                continue
            baseline = stable_request(template, self.grammar.dictionary, "stable")
            provider = self.providers.get(template.service)
            exchange = send_request(
                baseline, self.transport, provider=provider, sink=self._sink
            )
            self._take_in(exchange, template)
            rng = random.Random(f"{self.config.seed}:body:{template.template_id}")
            variants = payload_body_checker(baseline, template.body_schema, rng)
            self._send_variants(variants, template.service)

    def _run_one_sequence(self, sequence, sequence_index: int):
        rng = random.Random(f"{self.config.seed}:explore:{sequence_index}")
        return execute_sequence(
            sequence,
            self.grammar,
            self.transport,
            provider_for=self.providers or None,
            rng=rng,
            optional_probability=self.config.optional_probability,
            sink=self._sink,
            sequence_index=sequence_index,
        )

    def _finish_sequence(self, sequence, exchanges) -> bool:
        self.sequences_executed += 1
        for exchange in exchanges:
            template = self.grammar.template(exchange.request.template_id)
            self._take_in(exchange, template, sequence=exchanges)
        complete = len(exchanges) == len(sequence.steps)
        return complete and all(e.succeeded for e in exchanges)

    def _phase_explore(self) -> None:
        planner = SequencePlanner(self.grammar, self.config.max_sequence_length)
        pool = None
        if self.config.workers > 1:
            pool = ThreadPoolExecutor(max_workers=self.config.workers)
        try:
            while planner.has_pending():
                sequence = planner.next()
                runs = []
                for _ in range(self.config.instantiations_per_sequence):
                    index = self._sequence_counter
                    self._sequence_counter += 1
                    runs.append((sequence, index))
                if pool is None:
                    executions = [self._run_one_sequence(s, i) for s, i in runs]
                else:
                    futures = [pool.submit(self._run_one_sequence, s, i) for s, i in runs]
                    executions = [f.result() for f in futures]
                retained = False
                for exchanges in executions:
                    if self._finish_sequence(sequence, exchanges):
                        retained = True
                planner.record(sequence, retained)
        finally:
            if pool is not None:
                pool.shutdown(wait=False, cancel_futures=True)

    # --- driver ---

    def run(self) -> CampaignResult:
        started = time.monotonic()
        self.out.mkdir(parents=True, exist_ok=True)
        log_path = self.out / "exchanges.ndjson"
        reports_dir = self.out / "reports"
        with log_path.open("w", encoding="utf-8") as self._log_file:
            try:
                self._phase_cross_service()
                self._phase_omission()
                self._phase_malformed()
                self._phase_body()
                self._phase_explore()
            except BudgetExhausted:
                logger.info("request budget exhausted; stopping")
        reports_dir.mkdir(parents=True, exist_ok=True)
        write_reports(self.reports, reports_dir)
        counts: dict = {}
        for key in self.reports:
            counts[key[0]] = counts.get(key[0], 0) + 1
        summary = CampaignSummary(
            requests_sent=self.budget.used,
            sequences_executed=self.sequences_executed,
            bug_count_by_class=dict(sorted(counts.items())),
            wall_time=time.monotonic() - started,
        )
        (self.out / "summary.json").write_text(
            json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        return CampaignResult(summary=summary, reports=self.reports, out_dir=self.out)


def run_campaign(grammar: Grammar, config: CampaignConfig, out_dir) -> CampaignResult:
    """Drive all phases until done or out of budget; persist log and reports."""
    if not grammar.templates:
        raise ConfigError("grammar has no templates")
    _check_targets_cover_grammar(grammar, config)
    runner = _Runner(grammar, config, out_dir)
    try:
        return runner.run()
    finally:
        runner.transport.close()
