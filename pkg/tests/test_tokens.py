"""Token subsystem tests: mint/verify matrix, tamper, providers."""

from __future__ import annotations

import base64
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sbifuzz.tokens import (
    AccessTokenClaims,
    ClaimCompleteness,
    EmptyScope,
    FailureCause,
    FileUnreadable,
    MalformedTokenResponse,
    NfIdentity,
    SignedToken,
    TokenDenied,
    TokenProviderConfig,
    TokenRequest,
    TransportError,
    VerifierMode,
    WeakKey,
    acquire_token,
    attach_token,
    decode_unverified,
    mint_token,
    token_provider,
    verify_token,
)

KEY = b"0123456789abcdef0123456789abcdef"
NOW = 1_700_000_000
ISSUER = "9b3c1a52-0d2f-4f6a-9e5c-7d8e6f5a4b3c"

UDM_SELF = NfIdentity(
    nf_type="UDM",
    instance_id="1a52b9c3-2f0d-4a6f-8c5e-0d7e6f5a4b3c",
    snssai_list=[{"sst": 1, "sd": "010203"}],
)


def _request(scope="nudm-sdm", target="UDM"):
    return TokenRequest(
        consumer_instance_id="5c1d0e9f-3a2b-4c5d-8e7f-6a5b4c3d2e1f",
        consumer_nf_type="AMF",
        target_nf_type=target,
        requested_scope=scope,
    )


def _mint(scope="nudm-sdm", target="UDM", ttl=600, mode=ClaimCompleteness.FULL, now=NOW):
    return mint_token(_request(scope, target), ISSUER, KEY, ttl, mode=mode, now=now)


def _verify(token, service="nudm-sdm", mode=VerifierMode.CORRECT, now=NOW + 1, self_id=UDM_SELF):
    return verify_token(token.compact, service, self_id, KEY, now=now, mode=mode)


# ===== mint =====


def test_mint_full_claims_on_wire():
    token = _mint()
    head, body, sig = token.compact.split(".")
    payload = json.loads(base64.urlsafe_b64decode(body + "=="))
    assert payload["iss"] == ISSUER
    assert payload["sub"] == _request().consumer_instance_id
    assert payload["aud"] == "UDM"
    assert payload["scope"] == "nudm-sdm"
    assert payload["exp"] == NOW + 600
    assert payload["iat"] == NOW
    assert sig


def test_mint_partial_omits_issuer_and_audience():
    token = _mint(mode=ClaimCompleteness.FREE5GC_PARTIAL)
    payload = json.loads(base64.urlsafe_b64decode(token.compact.split(".")[1] + "=="))
    assert "iss" not in payload
    assert "aud" not in payload
    assert payload["scope"] == "nudm-sdm"


def test_mint_weak_key_rejected():
    with pytest.raises(WeakKey):
        mint_token(_request(), ISSUER, b"short", 600)


def test_mint_empty_scope_rejected():
    with pytest.raises(EmptyScope):
        mint_token(_request(scope="   "), ISSUER, KEY, 600)


def test_mint_round_trip_accepted_in_correct_mode():
    result = _verify(_mint())
    assert result.accepted and result.failure_cause is None


def test_mint_zero_ttl_is_expired_at_once():
    token = _mint(ttl=0)
    result = _verify(token, now=NOW)
    assert result.failure_cause is FailureCause.EXPIRED


# ===== verify: check order and causes =====


def test_verify_malformed_segment_count():
    result = verify_token("onlyone.segment", "nudm-sdm", UDM_SELF, KEY, now=NOW)
    assert result.failure_cause is FailureCause.MALFORMED


def test_verify_malformed_payload_bytes():
    token = _mint()
    head, _, sig = token.compact.split(".")
    broken = f"{head}.!!!notb64!!!.{sig}"
    result = verify_token(broken, "nudm-sdm", UDM_SELF, KEY, now=NOW)
    assert result.failure_cause is FailureCause.MALFORMED


def test_verify_bad_signature_on_payload_swap():
    a = _mint(scope="nudm-sdm")
    b = _mint(scope="nnrf-disc")
    head_a, _, sig_a = a.compact.split(".")
    _, body_b, _ = b.compact.split(".")
    result = verify_token(f"{head_a}.{body_b}.{sig_a}", "nnrf-disc", UDM_SELF, KEY, now=NOW)
    assert result.failure_cause is FailureCause.BAD_SIGNATURE


def test_verify_expired_before_scope():
    # expired AND wrong scope: first failing check names the cause
    token = _mint(scope="nnrf-disc", ttl=0)
    result = _verify(token, service="nudm-sdm", now=NOW + 10)
    assert result.failure_cause is FailureCause.EXPIRED


def test_verify_scope_mismatch_correct():
    token = _mint(scope="nudr-dr")
    result = _verify(token)
    assert result.failure_cause is FailureCause.SCOPE_MISMATCH


def test_verify_scope_mismatch_accepted_under_shadow():
    token = _mint(scope="nudr-dr")
    result = _verify(token, mode=VerifierMode.SEEDED_SCOPE_SHADOW)
    assert result.accepted


def test_verify_scope_membership_multi_service():
    token = _mint(scope="nudr-dr nudm-sdm nnrf-disc")
    assert _verify(token).accepted


def test_verify_audience_mismatch():
    token = _mint(target="NSSF")
    result = _verify(token)
    assert result.failure_cause is FailureCause.AUDIENCE_MISMATCH


def test_verify_audience_accepts_instance_id():
    token = _mint(target=UDM_SELF.instance_id)
    assert _verify(token).accepted


def test_verify_partial_token_skips_audience():
    token = _mint(target="NSSF", mode=ClaimCompleteness.FREE5GC_PARTIAL)
    assert _verify(token).accepted


def test_verify_slice_mismatch():
    req = _request()
    req.target_snssai_list = [{"sst": 9, "sd": "ffffff"}]
    token = mint_token(req, ISSUER, KEY, 600, now=NOW)
    result = _verify(token)
    assert result.failure_cause is FailureCause.SLICE_MISMATCH


def test_verify_slice_overlap_accepted():
    req = _request()
    req.target_snssai_list = [{"sst": 1, "sd": "010203"}, {"sst": 9}]
    token = mint_token(req, ISSUER, KEY, 600, now=NOW)
    assert _verify(token).accepted


def test_verify_minimal_checks_scope_only():
    expired_wrong_audience = _mint(target="NSSF", ttl=0)
    result = _verify(expired_wrong_audience, mode=VerifierMode.FREE5GC_MINIMAL, now=NOW + 10)
    assert result.accepted  # no lifetime or audience check in minimal mode


def test_verify_minimal_rejects_missing_scope():
    token = _mint(scope="nudr-dr")
    result = _verify(token, mode=VerifierMode.FREE5GC_MINIMAL)
    assert result.failure_cause is FailureCause.SCOPE_MISMATCH


# ===== tamper and monotonicity properties =====


def _retamper(compact: str, segment: int, byte_index: int, bit: int) -> str:
    """Flip one bit inside the decoded segment and re-encode it."""
    parts = compact.split(".")
    raw = bytearray(base64.urlsafe_b64decode(parts[segment] + "=="))
    raw[byte_index % len(raw)] ^= 1 << bit
    parts[segment] = base64.urlsafe_b64encode(bytes(raw)).rstrip(b"=").decode()
    return ".".join(parts)


@settings(max_examples=200, deadline=None)
@given(
    scope=st.sampled_from(["nudm-sdm", "nnrf-disc", "nudr-dr nudm-sdm"]),
    segment=st.integers(min_value=0, max_value=2),
    byte_index=st.integers(min_value=0, max_value=500),
    bit=st.integers(min_value=0, max_value=7),
)
def test_any_single_bit_tamper_rejected_everywhere(scope, segment, byte_index, bit):
    token = _mint(scope=scope)
    tampered = _retamper(token.compact, segment, byte_index, bit)
    for mode in VerifierMode:
        result = verify_token(tampered, "nudm-sdm", UDM_SELF, KEY, now=NOW + 1, mode=mode)
        assert not result.accepted, (mode, segment, byte_index, bit)


@settings(max_examples=300, deadline=None)
@given(
    scope=st.sampled_from(["nudm-sdm", "nudr-dr", "nnrf-disc nudm-sdm", "nothing-here"]),
    target=st.sampled_from(["UDM", "NSSF", "NRF"]),
    ttl=st.sampled_from([-10, 0, 600]),
    completeness=st.sampled_from(list(ClaimCompleteness)),
)
def test_strictness_monotonicity(scope, target, ttl, completeness):
    token = _mint(scope=scope, target=target, ttl=ttl, mode=completeness)
    outcomes = {
        mode: _verify(token, mode=mode, now=NOW + 1) for mode in VerifierMode
    }
    # minimal's rejections are a subset of correct's
    if not outcomes[VerifierMode.FREE5GC_MINIMAL].accepted:
        assert not outcomes[VerifierMode.CORRECT].accepted
    # the shadowed verifier never rejects on scope
    assert outcomes[VerifierMode.SEEDED_SCOPE_SHADOW].failure_cause is not FailureCause.SCOPE_MISMATCH


# ===== acquisition and providers =====


class _TokenEndpoint(BaseHTTPRequestHandler):
    behavior = "ok"
    hits = 0

    def do_POST(self):
        cls = type(self)
        cls.hits += 1
        length = int(self.headers.get("Content-Length", 0))
        self.rfile.read(length)
        if cls.behavior == "deny":
            body = json.dumps({"error": "invalid_client"}).encode()
            self.send_response(400)
        elif cls.behavior == "junk":
            body = b"not json"
            self.send_response(200)
        elif cls.behavior == "missing":
            body = json.dumps({"token_type": "Bearer"}).encode()
            self.send_response(200)
        else:
            token = _mint(ttl=3600)
            body = json.dumps(
                {
                    "access_token": token.compact,
                    "token_type": "Bearer",
                    "expires_in": 3600,
                    "scope": token.claims.scope,
                }
            ).encode()
            self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


@pytest.fixture()
def token_endpoint():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _TokenEndpoint)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _TokenEndpoint.behavior = "ok"
    _TokenEndpoint.hits = 0
    yield f"http://127.0.0.1:{server.server_address[1]}/oauth2/token"
    server.shutdown()
    server.server_close()


def test_acquire_token_happy_path(token_endpoint):
    token = acquire_token(token_endpoint, _request())
    assert token.claims.scope == "nudm-sdm"
    assert token.compact.count(".") == 2


def test_acquire_token_denied(token_endpoint):
    _TokenEndpoint.behavior = "deny"
    with pytest.raises(TokenDenied):
        acquire_token(token_endpoint, _request())


def test_acquire_token_malformed_body(token_endpoint):
    _TokenEndpoint.behavior = "junk"
    with pytest.raises(MalformedTokenResponse):
        acquire_token(token_endpoint, _request())


def test_acquire_token_missing_access_token(token_endpoint):
    _TokenEndpoint.behavior = "missing"
    with pytest.raises(MalformedTokenResponse):
        acquire_token(token_endpoint, _request())


def test_acquire_token_transport_error():
    with pytest.raises(TransportError):
        acquire_token("http://127.0.0.1:9/oauth2/token", _request(), timeout=0.5)


def test_provider_file_mode(tmp_path):
    token = _mint()
    path = tmp_path / "token.jwt"
    path.write_text(token.compact + "\n", encoding="utf-8")
    provider = token_provider(TokenProviderConfig(mode="file", path=str(path)))
    got = provider()
    assert got.compact == token.compact
    assert got.claims.scope == "nudm-sdm"


def test_provider_file_unreadable(tmp_path):
    provider = token_provider(TokenProviderConfig(mode="file", path=str(tmp_path / "gone")))
    with pytest.raises(FileUnreadable):
        provider()


def test_provider_fetch_caches_until_near_expiry(token_endpoint):
    clock = [NOW]
    provider = token_provider(
        TokenProviderConfig(
            mode="fetch", endpoint=token_endpoint, request=_request(), clock=lambda: clock[0]
        )
    )
    first = provider()
    second = provider()
    assert first.compact == second.compact
    assert _TokenEndpoint.hits == 1
    clock[0] = first.claims.expiry - 10  # inside the refresh margin
    provider()
    assert _TokenEndpoint.hits == 2


# ===== attach =====


class _Req:
    def __init__(self, headers=None, pinned=None):
        self.headers = headers or {}
        self.pinned_header_values = pinned or {}


def test_attach_sets_bearer_header():
    token = _mint()
    req = _Req()
    attach_token(req, token)
    assert req.headers["Authorization"] == f"Bearer {token.compact}"


def test_attach_replaces_not_appends():
    req = _Req(headers={"Authorization": "Bearer old"})
    token = _mint()
    attach_token(req, token)
    assert list(req.headers) == ["Authorization"]
    assert req.headers["Authorization"] == f"Bearer {token.compact}"


def test_attach_respects_pinned_overlay(caplog):
    req = _Req(
        headers={"Authorization": "Bearer pinned-value"},
        pinned={"Authorization": "Bearer pinned-value"},
    )
    with caplog.at_level(logging.WARNING):
        attach_token(req, _mint())
    assert req.headers["Authorization"] == "Bearer pinned-value"
    assert any("pinned" in rec.message for rec in caplog.records)


def test_decode_unverified_rejects_garbage():
    with pytest.raises(MalformedTokenResponse):
        decode_unverified("a.b")


def test_signed_token_shape():
    token = _mint()
    assert isinstance(token, SignedToken)
    assert isinstance(token.claims, AccessTokenClaims)
    assert token.claims.scope_list == ["nudm-sdm"]
