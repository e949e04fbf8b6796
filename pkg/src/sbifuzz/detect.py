"""Turn executed traffic into deduplicated, replayable bug reports.

An exchange becomes a candidate when its status betrays a broken
contract; candidates land in buckets keyed by class, operation, checker,
status, and a fingerprint of the normalized response body.  Each bucket
is written out as a report plus a self-sufficient replay file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator

from .checkers import (
    AUTH_LAYER_STATUSES,
    CHECKER_NAMES,
    CheckerFinding,
    status_mapping_checker,
)
from .engine import ExecutedExchange, Provenance, canonical_request
from .grammar import Grammar, RequestTemplate


class BugClass(str, Enum):
    UNHANDLED_ERROR_500 = "UnhandledError500"
    STATUS_MAPPING_VIOLATION = "StatusMappingViolation"
    AUTHZ_SCOPE_BYPASS = "AuthzScopeBypass"
    UNDECLARED_STATUS = "UndeclaredStatus"


# ===== fingerprinting =====

# order matters: uuids contain digit runs, timestamps contain both
_UUID_PAT = re.compile(
    r"[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}"
)
_TIMESTAMP_PAT = re.compile(
    r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}(?:\.\d+)?(?:Z|[+-]\d{2}:\d{2})?"
)
_DIGIT_RUN_PAT = re.compile(r"\d{4,}")


def normalize_volatile(text: str) -> str:
    """Collapse ids, timestamps, and long digit runs to placeholders."""
    text = _UUID_PAT.sub("<uuid>", text)
    text = _TIMESTAMP_PAT.sub("<timestamp>", text)
    return _DIGIT_RUN_PAT.sub("<num>", text)


def body_fingerprint(body_text: str) -> str:
    digest = hashlib.sha256(normalize_volatile(body_text).encode("utf-8"))
    return digest.hexdigest()[:16]


# ===== candidates =====


@dataclass
class BugCandidate:
    bug_class: BugClass
    exchange: ExecutedExchange
    template: RequestTemplate
    finding: CheckerFinding | None = None
    replay_steps: list[dict] = field(default_factory=list)
    token_scope: str | None = None
    token_audience: str | None = None
    record: dict | None = None  # original log record, when re-ingested


def minimal_replay_steps(
    sequence_exchanges: list[ExecutedExchange], final_index: int
) -> list[dict]:
    """Provenance of the handle-closure ending at the offending step.

    Step references inside handle slots are renumbered to positions in
    the trimmed list, so the result stands alone.
    """
    needed = {final_index}
    frontier = [final_index]
    while frontier:
        here = frontier.pop()
        for ref in sequence_exchanges[here].request.provenance.handle_slots.values():
            step = int(ref["step"])
            if step not in needed:
                needed.add(step)
                frontier.append(step)
    kept = sorted(needed)
    position = {original: new for new, original in enumerate(kept)}
    steps = []
    for original in kept:
        prov = copy.deepcopy(sequence_exchanges[original].request.provenance.to_dict())
        prov["handle_slots"] = {
            slot: {"step": position[int(ref["step"])], "handle": ref["handle"]}
            for slot, ref in prov["handle_slots"].items()
        }
        steps.append({"template_id": prov["template_id"], "provenance": prov})
    return steps


def classify(
    exchange: ExecutedExchange,
    template: RequestTemplate,
    finding: CheckerFinding | None = None,
    sequence_exchanges: list[ExecutedExchange] | None = None,
) -> BugCandidate | None:
    """Decide whether one exchange evidences a bug, and which class.

    Checker findings win.  A bare 500 counts only when the operation does
    not declare one; other undeclared statuses are reported except the
    token layer's 401/403, which no operation declares.
    """
    status = exchange.status
    if finding is not None and finding.checker_name == "cross_service_token":
        bug_class = BugClass.AUTHZ_SCOPE_BYPASS
    elif finding is not None and finding.checker_name == "status_mapping":
        bug_class = BugClass.STATUS_MAPPING_VIOLATION
    elif status == 500:
        bug_class = None if template.declares_explicit_5xx() else BugClass.UNHANDLED_ERROR_500
    elif status <= 0 or status in AUTH_LAYER_STATUSES:
        bug_class = None
    elif not template.declares_status(status):
        bug_class = BugClass.UNDECLARED_STATUS
    else:
        bug_class = None
    if bug_class is None:
        return None
    if sequence_exchanges:
        index = next(
            (i for i, e in enumerate(sequence_exchanges) if e is exchange), None
        )
        if index is None:
            index = min(max(exchange.step_index, 0), len(sequence_exchanges) - 1)
        steps = minimal_replay_steps(sequence_exchanges, index)
    else:
        steps = minimal_replay_steps([exchange], 0)
    claims = exchange.token_claims
    return BugCandidate(
        bug_class=bug_class,
        exchange=exchange,
        template=template,
        finding=finding,
        replay_steps=steps,
        token_scope=claims.scope if claims else None,
        token_audience=claims.audience if claims else None,
    )


# ===== bucketing =====


def _checker_label(candidate: BugCandidate) -> str:
    if candidate.finding is not None:
        return candidate.finding.checker_name
    prefix = candidate.exchange.request.provenance.mutation.split(":", 1)[0]
    return prefix if prefix in CHECKER_NAMES else "explore"


def bucket_key(candidate: BugCandidate) -> tuple:
    body_text = candidate.exchange.response_body.decode("utf-8", errors="replace")
    return (
        candidate.bug_class.value,
        candidate.template.template_id,
        _checker_label(candidate),
        candidate.exchange.status,
        body_fingerprint(body_text),
    )


@dataclass
class BugReport:
    bucket: tuple
    first_seen: float
    occurrence_count: int
    evidence: dict
    expectation: str | None
    replay_steps: list[dict]
    token_scope: str | None
    token_audience: str | None
    service: str

    def report_document(self) -> dict:
        bug_class, operation, checker, status, fingerprint = self.bucket
        return {
            "bug_class": bug_class,
            "operation": operation,
            "checker": checker,
            "status": status,
            "body_fingerprint": fingerprint,
            "first_seen": datetime.fromtimestamp(self.first_seen, tz=timezone.utc).isoformat(),
            "occurrence_count": self.occurrence_count,
            "expectation": self.expectation,
            "service": self.service,
            "token_scope": self.token_scope,
            "token_audience": self.token_audience,
            "evidence": self.evidence,
        }

    def replay_document(self) -> dict:
        bug_class, operation, checker, status, fingerprint = self.bucket
        return {
            "bug_class": bug_class,
            "operation": operation,
            "checker": checker,
            "status": status,
            "body_fingerprint": fingerprint,
            "service": self.service,
            "token_scope": self.token_scope,
            "token_audience": self.token_audience,
            "steps": self.replay_steps,
        }


def bucket(
    candidates: Iterable[BugCandidate],
    reports: dict[tuple, BugReport] | None = None,
    clock=time.time,
) -> dict[tuple, BugReport]:
    """Fold candidates into one report per bucket key, first evidence kept."""
    reports = {} if reports is None else reports
    for candidate in candidates:
        key = bucket_key(candidate)
        existing = reports.get(key)
        if existing is not None:
            existing.occurrence_count += 1
            continue
        record = candidate.record or candidate.exchange.to_log_record()
        reports[key] = BugReport(
            bucket=key,
            first_seen=clock(),
            occurrence_count=1,
            evidence=record,
            expectation=candidate.finding.expectation if candidate.finding else None,
            replay_steps=[copy.deepcopy(step) for step in candidate.replay_steps],
            token_scope=candidate.token_scope,
            token_audience=candidate.token_audience,
            service=candidate.template.service,
        )
    return reports


# ===== report files =====


def bucket_slug(key: tuple) -> str:
    bug_class, operation, checker, status, fingerprint = key
    text = f"{bug_class}-{operation}-{checker}-{status}"
    slug = re.sub(r"[^A-Za-z0-9]+", "-", text).strip("-").lower()
    return f"{slug}-{fingerprint[:8]}"


def write_report(report: BugReport, out_dir) -> Path:
    directory = Path(out_dir) / bucket_slug(report.bucket)
    directory.mkdir(parents=True, exist_ok=True)
    report_path = directory / "report.json"
    report_path.write_text(
        json.dumps(report.report_document(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    replay_path = directory / "replay.json"
    replay_path.write_text(
        json.dumps(report.replay_document(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return directory


def write_reports(reports: dict[tuple, BugReport], out_dir) -> list[Path]:
    return [write_report(reports[key], out_dir) for key in sorted(reports)]


def load_report_documents(out_dir) -> list[dict]:
    """All report.json documents under a reports directory, sorted by path."""
    root = Path(out_dir)
    documents = []
    for path in sorted(root.glob("*/report.json")):
        documents.append(json.loads(path.read_text(encoding="utf-8")))
    return documents


# ===== re-ingestion from the exchange log =====


def exchange_from_record(record: dict, grammar: Grammar) -> ExecutedExchange:
    """Rebuild an exchange, request bytes included, from one log record."""
    template = grammar.template(record["template_id"])
    provenance = Provenance.from_dict(record["provenance"])
    request = canonical_request(template, provenance)
    return ExecutedExchange(
        request=request,
        status=record["status"],
        response_headers=dict(record.get("response_headers", {})),
        response_body=record.get("response_body", "").encode("utf-8"),
        latency_ms=0.0,
        transport_error=record.get("transport_error"),
        sequence_index=record.get("sequence_index", -1),
        step_index=record.get("step_index", 0),
    )


def _rederive_finding(
    exchange: ExecutedExchange, template: RequestTemplate
) -> CheckerFinding | None:
    mutation = exchange.request.provenance.mutation
    prefix, _, rest = mutation.partition(":")
    if prefix == "cross_service_token" and exchange.succeeded:
        holder = rest or "?"
        return CheckerFinding(
            checker_name="cross_service_token",
            mutated_request=exchange.request,
            expectation=(
                f"a token scoped to {holder!r} must not authorize "
                f"{template.template_id}; expected 403, observed {exchange.status}"
            ),
            observed=exchange,
        )
    return status_mapping_checker(exchange, template)


def candidates_from_log(
    records: Iterable[dict], grammar: Grammar
) -> Iterator[BugCandidate]:
    """Re-run classification over saved log records.

    Records sharing a sequence index are regrouped so handle closures
    can be rebuilt; the stored record rides along as the evidence, which
    makes re-ingestion reproduce the original report set exactly.
    """
    by_sequence: dict[int, list[dict]] = {}
    for record in records:
        by_sequence.setdefault(record.get("sequence_index", -1), []).append(record)
    for sequence_records in by_sequence.values():
        sequence_records.sort(key=lambda r: r.get("step_index", 0))
        exchanges = [exchange_from_record(r, grammar) for r in sequence_records]
        for index, (record, exchange) in enumerate(zip(sequence_records, exchanges)):
            template = grammar.template(record["template_id"])
            finding = _rederive_finding(exchange, template)
            candidate = classify(
                exchange, template, finding=finding, sequence_exchanges=exchanges
            )
            if candidate is None:
                continue
            candidate.token_scope = record.get("token_scope")
            candidate.token_audience = record.get("token_audience")
            candidate.record = record
            yield candidate
