"""Mock service-based core that serves as the fuzzer's ground-truth target.

Four stub network functions (NRF, UDM, NSSF, PCF) serve the fixture
routes over plain HTTP.  Eight independently toggleable defects
reproduce realistic failure shapes: unchecked array indexing,
unconditional unmarshalling, weak parameter validation, a nil
dereference on an absent optional field, a bad type assertion, a
swallowed 404, and a scope check whose failure is silently ignored.
Simulated panics surface as fingerprinted 500 bodies so campaigns keep
running and every finding stays attributable to its seeded site.
"""

from __future__ import annotations

import json
import logging
import re
import threading
import time
import uuid
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from importlib import resources
from urllib.parse import parse_qs, urlsplit

from .tokens import (
    ClaimCompleteness,
    EmptyScope,
    FailureCause,
    NfIdentity,
    TokenRequest,
    VerifierMode,
    mint_token,
    verify_token,
)

logger = logging.getLogger(__name__)

BUG_FLAGS = frozenset({"B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8"})

# frozen epoch for deterministic runs: mint, verify, and expiry all share it
DETERMINISTIC_EPOCH = 1_700_000_000

DEFAULT_KEY = b"sbifuzz-deterministic-testbed-key32"

SERVICES = ("nrf", "udm", "nssf", "pcf")

NF_TYPE_BY_SERVICE = {"nrf": "NRF", "udm": "UDM", "nssf": "NSSF", "pcf": "PCF"}

EXPECTED_SCOPE = {
    "nrf": "nnrf-disc",
    "udm": "nudm-sdm",
    "nssf": "nnssf-nssaiavailability",
    "pcf": "npcf-bdtpolicycontrol",
}

INSTANCE_IDS = {
    "nrf": "aa0e8b36-0d11-4d44-9f6b-0c1f6a3d5e21",
    "udm": "bb1f9c47-1e22-4e55-8a7c-1d2f7b4e6f32",
    "nssf": "cc2fad58-2f33-4f66-9b8d-2e3f8c5f7a43",
    "pcf": "dd3fbe69-3a44-4a77-8c9e-3f4f9d6a8b54",
}

SERVED_SNSSAIS = [{"sst": 1, "sd": "010203"}]

NF_TYPES = ("AMF", "SMF", "UDM", "UDR", "NSSF", "PCF", "NRF", "AUSF", "NEF", "CHF")

_UUID_RE = re.compile(
    r"^[0-9a-fA-F]{8}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{4}-[0-9a-fA-F]{12}$"
)
_SD_RE = re.compile(r"^[0-9A-Fa-f]{6}$")

_AUTH_STATUS_401 = {FailureCause.MALFORMED, FailureCause.BAD_SIGNATURE, FailureCause.EXPIRED}

_MAX_BODY = 5_000_000


class TestbedError(Exception):
    pass


class ConfigError(TestbedError):
    pass


class BindError(TestbedError):
    pass


def load_seed_data() -> dict:
    path = resources.files("sbifuzz") / "fixtures" / "seed_data.json"
    return json.loads(path.read_text(encoding="utf-8"))


def _default_binds() -> dict:
    return {service: ("127.0.0.1", 0) for service in SERVICES}


@dataclass
class TestbedConfig:
    __test__ = False  # not a pytest collection target

    binds: dict = field(default_factory=_default_binds)
    key: bytes = DEFAULT_KEY
    verifier_mode: VerifierMode = VerifierMode.CORRECT
    mint_completeness: ClaimCompleteness = ClaimCompleteness.FULL
    bug_flags: frozenset = frozenset()
    deterministic: bool = False
    crash_hard: bool = False
    token_ttl: int = 3600
    seed_data: dict | None = None

    def __post_init__(self):
        self.bug_flags = frozenset(self.bug_flags)
        unknown = self.bug_flags - BUG_FLAGS
        if unknown:
            raise ConfigError(f"unknown bug flags: {sorted(unknown)}")
        if "B8" in self.bug_flags and self.verifier_mode is not VerifierMode.SEEDED_SCOPE_SHADOW:
            raise ConfigError("B8 presumes the scope-shadow verifier on every producer")
        missing = set(SERVICES) - set(self.binds)
        if missing:
            raise ConfigError(f"bind addresses missing for: {sorted(missing)}")


class _NfState:
    """Mutable per-NF store behind one lock."""

    def __init__(self):
        self.lock = threading.Lock()
        self.counter = 0
        self.subscriptions = {}
        self.policies = {}
        self.disabled = set()

    def next_id(self, prefix: str, deterministic: bool) -> str:
        with self.lock:
            self.counter += 1
            if deterministic:
                return f"{prefix}-{self.counter:06d}"
            return str(uuid.uuid4())


@dataclass
class _Request:
    method: str
    path: str
    path_params: tuple
    query: dict
    headers: dict
    body: bytes
    route_key: str = ""


class _NfContext:
    def __init__(self, service, config, seed, clock):
        self.service = service
        self.config = config
        self.seed = seed
        self.clock = clock
        self.state = _NfState()
        self.base_url = ""  # filled in once the port is bound
        self.identity = NfIdentity(
            nf_type=NF_TYPE_BY_SERVICE[service],
            instance_id=INSTANCE_IDS[service],
            snssai_list=SERVED_SNSSAIS,
        )
        self.expected_scope = EXPECTED_SCOPE[service]
        self.routes = _ROUTES[service]

    def flag(self, name: str) -> bool:
        return name in self.config.bug_flags

    def panic(self, req: _Request, site: str):
        if self.config.crash_hard:
            with self.state.lock:
                self.state.disabled.add(req.route_key)
        return 500, {"cause": f"RUNTIME_PANIC:{site}", "status": 500}, None


def _problem(status: int, cause: str):
    return status, {"cause": cause, "status": status}, None


# ===== UDM routes =====


def _udm_shared_data(ctx: _NfContext, req: _Request):
    if ctx.flag("B1") and "supported-features" not in req.query:
        # indexes the feature array without a length check
        return ctx.panic(req, "index-oob")
    records = ctx.seed["shared_data"]
    if "shared-data-ids" in req.query:
        wanted = set(req.query["shared-data-ids"][0].split(","))
        records = [r for r in records if r.get("sharedDataId") in wanted]
    return 200, records, None


def _udm_create_subscription(ctx: _NfContext, req: _Request):
    body = _parse_json_object(req)
    if body is None:
        return _problem(400, "MALFORMED_BODY")
    for name in ("nfInstanceId", "callbackReference", "monitoredResourceUris"):
        if name not in body:
            return _problem(400, "MANDATORY_IE_MISSING")
    if not isinstance(body["nfInstanceId"], str) or not isinstance(body["callbackReference"], str):
        return _problem(400, "MALFORMED_BODY")
    if not isinstance(body["monitoredResourceUris"], list):
        return _problem(400, "MALFORMED_BODY")
    if "expires" in body and not isinstance(body["expires"], str):
        return _problem(400, "MALFORMED_BODY")
    if not _UUID_RE.match(body["nfInstanceId"]) or not _is_absolute_uri(body["callbackReference"]):
        if ctx.flag("B4"):
            # skips the validity check and uses the raw values
            return ctx.panic(req, "invalid-param")
        return _problem(400, "INVALID_PARAM")
    sub_id = ctx.state.next_id("SUB", ctx.config.deterministic)
    with ctx.state.lock:
        ctx.state.subscriptions[sub_id] = body
    location = f"{ctx.base_url}/nudm-sdm/v2/shared-data-subscriptions/{sub_id}"
    return 201, {"subscriptionId": sub_id}, {"Location": location}


def _udm_delete_subscription(ctx: _NfContext, req: _Request):
    sub_id = req.path_params[0]
    with ctx.state.lock:
        known = ctx.state.subscriptions.pop(sub_id, None)
    if known is None:
        return _problem(404, "SUBSCRIPTION_NOT_FOUND")
    return 204, None, None


def _udm_sm_data(ctx: _NfContext, req: _Request):
    supi = req.path_params[0]
    records = ctx.seed["sm_data"].get(supi, [])
    if "single-nssai" not in req.query:
        if ctx.flag("B2"):
            # unmarshals the query value without checking it exists
            return ctx.panic(req, "unmarshal-nil")
        return 200, records, None
    parsed = _parse_snssai(req.query["single-nssai"][0])
    if parsed is None:
        if ctx.flag("B3"):
            # unmarshal error ignored, garbage value used downstream
            return ctx.panic(req, "unmarshal-bad")
        return _problem(400, "INVALID_QUERY_PARAM")
    wanted = (parsed.get("sst"), parsed.get("sd"))
    matched = [
        r
        for r in records
        if (r.get("singleNssai", {}).get("sst"), r.get("singleNssai", {}).get("sd")) == wanted
    ]
    return 200, matched, None


def _udm_id_translation(ctx: _NfContext, req: _Request):
    ue_id = req.path_params[0]
    hit = ctx.seed["id_translation"].get(ue_id)
    if hit is not None:
        return 200, hit, None
    if ctx.flag("B7"):
        # backend 404 swallowed and remapped to a generic failure
        return 500, {"cause": "SYSTEM_FAILURE", "status": 500}, None
    return _problem(404, "USER_NOT_FOUND")


# ===== NSSF routes =====


def _nssf_create_subscription(ctx: _NfContext, req: _Request):
    body = _parse_json_object(req)
    if body is None:
        return _problem(400, "MALFORMED_BODY")
    for name in ("nfNssaiAvailabilityUri", "taiList", "event"):
        if name not in body:
            return _problem(400, "MANDATORY_IE_MISSING")
    if not isinstance(body["nfNssaiAvailabilityUri"], str) or not isinstance(body["taiList"], list):
        return _problem(400, "MALFORMED_BODY")
    if "expiry" not in body:
        if ctx.flag("B5"):
            # dereferences the optional expiry without a nil check
            return ctx.panic(req, "nil-deref")
    elif not isinstance(body["expiry"], str):
        return _problem(400, "MALFORMED_BODY")
    sub_id = ctx.state.next_id("NSSUB", ctx.config.deterministic)
    with ctx.state.lock:
        ctx.state.subscriptions[sub_id] = body
    location = (
        f"{ctx.base_url}/nnssf-nssaiavailability/v1/nssai-availability/subscriptions/{sub_id}"
    )
    return 201, {"subscriptionId": sub_id}, {"Location": location}


def _nssf_delete_subscription(ctx: _NfContext, req: _Request):
    sub_id = req.path_params[0]
    with ctx.state.lock:
        known = ctx.state.subscriptions.pop(sub_id, None)
    if known is None:
        return _problem(404, "SUBSCRIPTION_NOT_FOUND")
    return 204, None, None


# ===== PCF routes =====


def _pcf_create_policy(ctx: _NfContext, req: _Request):
    body = _parse_json_object(req)
    if body is None:
        return _problem(400, "MALFORMED_BODY")
    for name in ("aspId", "desTimeInt", "numOfUes"):
        if name not in body:
            return _problem(400, "MANDATORY_IE_MISSING")
    if not isinstance(body["aspId"], str) or not isinstance(body["desTimeInt"], dict):
        return _problem(400, "MALFORMED_BODY")
    if not isinstance(body["numOfUes"], int) or isinstance(body["numOfUes"], bool):
        return _problem(400, "MALFORMED_BODY")
    if ctx.flag("B6"):
        # asserts a concrete type on a decoded interface value
        return ctx.panic(req, "type-assert")
    policy_id = ctx.state.next_id("BDT", ctx.config.deterministic)
    policy = {"bdtPolicyId": policy_id, "bdtReqData": body}
    with ctx.state.lock:
        ctx.state.policies[policy_id] = policy
    location = f"{ctx.base_url}/npcf-bdtpolicycontrol/v1/bdtpolicies/{policy_id}"
    return 201, policy, {"Location": location}


def _pcf_get_policy(ctx: _NfContext, req: _Request):
    policy_id = req.path_params[0]
    with ctx.state.lock:
        policy = ctx.state.policies.get(policy_id)
    if policy is None:
        return _problem(404, "POLICY_NOT_FOUND")
    return 200, policy, None


# ===== NRF routes =====


def _nrf_discover(ctx: _NfContext, req: _Request):
    if "target-nf-type" not in req.query:
        return 200, {"validityPeriod": 3600, "nfInstances": []}, None
    target = req.query["target-nf-type"][0]
    if target not in NF_TYPES:
        return _problem(400, "INVALID_QUERY_PARAM")
    requester = req.query.get("requester-nf-type", [None])[0]
    if requester is not None and requester not in NF_TYPES:
        return _problem(400, "INVALID_QUERY_PARAM")
    instances = [ctx.seed["smf_profile"]] if target == "SMF" else []
    return 200, {"validityPeriod": 3600, "nfInstances": instances}, None


def _nrf_token(ctx: _NfContext, req: _Request):
    form = parse_qs(req.body.decode("utf-8", errors="replace"), keep_blank_values=True)
    fields = {}
    for name in ("grant_type", "nfInstanceId", "nfType", "targetNfType", "scope"):
        if name not in form:
            return 400, {"error": "invalid_request"}, None
        fields[name] = form[name][0]
    if fields["grant_type"] != "client_credentials":
        return 400, {"error": "unsupported_grant_type"}, None
    request = TokenRequest(
        consumer_instance_id=fields["nfInstanceId"],
        consumer_nf_type=fields["nfType"],
        target_nf_type=fields["targetNfType"],
        requested_scope=fields["scope"],
    )
    try:
        # no cross-checking of the requester's attributes on purpose
        token = mint_token(
            request,
            issuer_id=ctx.identity.instance_id,
            key=ctx.config.key,
            ttl=ctx.config.token_ttl,
            mode=ctx.config.mint_completeness,
            now=int(ctx.clock()),
        )
    except EmptyScope:
        return 400, {"error": "invalid_request"}, None
    body = {
        "access_token": token.compact,
        "token_type": "Bearer",
        "expires_in": ctx.config.token_ttl,
        "scope": fields["scope"],
    }
    return 200, body, None


# ===== shared helpers =====


def _parse_json_object(req: _Request):
    try:
        body = json.loads(req.body.decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        return None
    return body if isinstance(body, dict) else None


def _parse_snssai(raw: str):
    try:
        value = json.loads(raw)
    except ValueError:
        return None
    if not isinstance(value, dict):
        return None
    sst = value.get("sst")
    if not isinstance(sst, int) or isinstance(sst, bool) or not 0 <= sst <= 255:
        return None
    sd = value.get("sd")
    if sd is not None and (not isinstance(sd, str) or not _SD_RE.match(sd)):
        return None
    return value


def _is_absolute_uri(value: str) -> bool:
    parts = urlsplit(value)
    return bool(parts.scheme) and bool(parts.netloc)


# (method, pattern, handler, needs_auth) rows; first match wins
_ROUTES = {
    "udm": [
        ("GET", re.compile(r"^/nudm-sdm/v2/shared-data$"), _udm_shared_data, True),
        (
            "POST",
            re.compile(r"^/nudm-sdm/v2/shared-data-subscriptions$"),
            _udm_create_subscription,
            True,
        ),
        (
            "DELETE",
            re.compile(r"^/nudm-sdm/v2/shared-data-subscriptions/([^/]+)$"),
            _udm_delete_subscription,
            True,
        ),
        ("GET", re.compile(r"^/nudm-sdm/v2/([^/]+)/sm-data$"), _udm_sm_data, True),
        (
            "GET",
            re.compile(r"^/nudm-sdm/v2/([^/]+)/id-translation-result$"),
            _udm_id_translation,
            True,
        ),
    ],
    "nssf": [
        (
            "POST",
            re.compile(r"^/nnssf-nssaiavailability/v1/nssai-availability/subscriptions$"),
            _nssf_create_subscription,
            True,
        ),
        (
            "DELETE",
            re.compile(r"^/nnssf-nssaiavailability/v1/nssai-availability/subscriptions/([^/]+)$"),
            _nssf_delete_subscription,
            True,
        ),
    ],
    "pcf": [
        ("POST", re.compile(r"^/npcf-bdtpolicycontrol/v1/bdtpolicies$"), _pcf_create_policy, True),
        (
            "GET",
            re.compile(r"^/npcf-bdtpolicycontrol/v1/bdtpolicies/([^/]+)$"),
            _pcf_get_policy,
            True,
        ),
    ],
    "nrf": [
        ("GET", re.compile(r"^/nnrf-disc/v1/nf-instances$"), _nrf_discover, True),
        ("POST", re.compile(r"^/oauth2/token$"), _nrf_token, False),
    ],
}


class _StubServer(ThreadingHTTPServer):
    daemon_threads = True
    disable_nagle_algorithm = True
    ctx: _NfContext


class _StubHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    # one buffered write per response: keeps loopback latency out of campaigns
    wbufsize = -1

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def _dispatch(self, method: str):
        ctx: _NfContext = self.server.ctx
        split = urlsplit(self.path)
        path = split.path
        query = parse_qs(split.query, keep_blank_values=True)
        if method == "GET" and path == "/healthz":
            self._send_json(200, {"status": "ok"})
            return
        for row_method, pattern, handler, needs_auth in ctx.routes:
            if row_method != method:
                continue
            match = pattern.match(path)
            if not match:
                continue
            route_key = f"{row_method} {pattern.pattern}"
            with ctx.state.lock:
                disabled = route_key in ctx.state.disabled
            if disabled:
                self._send_json(503, {"cause": "NF_CONGESTION", "status": 503})
                return
            if needs_auth and not self._authorize(ctx):
                return
            request = _Request(
                method=method,
                path=path,
                path_params=match.groups(),
                query=query,
                headers=dict(self.headers.items()),
                body=self._read_body(),
                route_key=route_key,
            )
            try:
                status, body, extra = handler(ctx, request)
            except Exception:
                logger.exception("stub handler crashed on %s %s", method, path)
                status, body, extra = 500, {"cause": "STUB_INTERNAL", "status": 500}, None
            self._send_json(status, body, extra)
            return
        self._send_json(404, {"cause": "UNKNOWN_ROUTE", "status": 404})

    def _authorize(self, ctx: _NfContext) -> bool:
        header = self.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            self._send_json(401, {"cause": "TOKEN_MISSING", "status": 401})
            return False
        result = verify_token(
            header[len("Bearer ") :],
            ctx.expected_scope,
            ctx.identity,
            ctx.config.key,
            now=int(ctx.clock()),
            mode=ctx.config.verifier_mode,
        )
        if result.accepted:
            return True
        status = 401 if result.failure_cause in _AUTH_STATUS_401 else 403
        self._send_json(status, {"cause": result.failure_cause.value, "status": status})
        return False

    def _read_body(self) -> bytes:
        try:
            length = int(self.headers.get("Content-Length", 0))
        except ValueError:
            length = 0
        if length <= 0:
            return b""
        return self.rfile.read(min(length, _MAX_BODY))

    def _send_json(self, status: int, body, extra_headers: dict | None = None):
        # send_response_only: no Server/Date headers, responses stay byte-stable
        self.send_response_only(status)
        if extra_headers:
            for name, value in extra_headers.items():
                self.send_header(name, value)
        payload = b""
        if body is not None:
            payload = json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")
            self.send_header("Content-Type", "application/json")
        if status != 204:
            self.send_header("Content-Length", str(len(payload)))
        self.send_header("Connection", "close")
        self.end_headers()
        if payload:
            self.wfile.write(payload)
        self.close_connection = True

    def log_message(self, fmt, *args):
        logger.debug("%s %s", self.address_string(), fmt % args)


class Testbed:
    """Running mock core: four HTTP stubs plus their base addresses."""

    __test__ = False  # not a pytest collection target

    def __init__(self, config: TestbedConfig, servers: dict, threads: list):
        self.config = config
        self._servers = servers
        self._threads = threads
        self.base_urls = {name: server.ctx.base_url for name, server in servers.items()}

    @property
    def token_url(self) -> str:
        return f"{self.base_urls['nrf']}/oauth2/token"

    def url(self, service: str) -> str:
        return self.base_urls[service]

    def shutdown(self):
        for server in self._servers.values():
            server.shutdown()
            server.server_close()
        for thread in self._threads:
            thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()
        return False


def start_testbed(config: TestbedConfig) -> Testbed:
    seed = config.seed_data if config.seed_data is not None else load_seed_data()
    if config.deterministic:
        clock = lambda: DETERMINISTIC_EPOCH  # noqa: E731
    else:
        clock = time.time
    servers = {}
    threads = []
    try:
        for service in SERVICES:
            host, port = config.binds[service]
            try:
                server = _StubServer((host, port), _StubHandler)
            except OSError as exc:
                raise BindError(f"cannot bind {service} to {host}:{port}: {exc}") from exc
            ctx = _NfContext(service, config, seed, clock)
            ctx.base_url = f"http://{host}:{server.server_address[1]}"
            server.ctx = ctx
            servers[service] = server
    except BindError:
        for server in servers.values():
            server.server_close()
        raise
    for service, server in servers.items():
        thread = threading.Thread(
            # short poll so shutdown() returns promptly
            target=lambda srv=server: srv.serve_forever(poll_interval=0.02),
            name=f"sbifuzz-testbed-{service}",
            daemon=True,
        )
        thread.start()
        threads.append(thread)
    return Testbed(config, servers, threads)
