"""OAuth2 client-credentials token subsystem for SBI requests.

Tokens are JWS compact serializations signed with HMAC-SHA256 over a
shared secret.  Verification runs in one of three modes: CORRECT applies
the full check order (structure, signature, lifetime, scope, audience,
slice); FREE5GC_MINIMAL checks only signature plus non-empty scope
membership; SEEDED_SCOPE_SHADOW mirrors a verifier whose scope-check
error value is silently discarded, so a wrong scope still passes.  The
signature check itself is identical in every mode.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable

import requests

logger = logging.getLogger(__name__)

NF_TYPES = ("AMF", "SMF", "UDM", "UDR", "NSSF", "PCF", "NRF", "AUSF", "NEF", "CHF")

MIN_KEY_BYTES = 32

# re-acquire fetched tokens this close to expiry (seconds)
REFRESH_MARGIN = 30


class TokenError(Exception):
    pass


class WeakKey(TokenError):
    """Signing key shorter than 32 bytes."""


class EmptyScope(TokenError):
    """Token request carries a vacant scope."""


class TransportError(TokenError):
    """Token endpoint unreachable."""


class TokenDenied(TokenError):
    """Token endpoint answered with a non-2xx status."""


class MalformedTokenResponse(TokenError):
    """Token endpoint 2xx body is not a usable token response."""


class FileUnreadable(TokenError):
    """File-mode token source cannot be read."""


class VerifierMode(str, Enum):
    CORRECT = "CORRECT"
    SEEDED_SCOPE_SHADOW = "SEEDED_SCOPE_SHADOW"
    FREE5GC_MINIMAL = "FREE5GC_MINIMAL"


class ClaimCompleteness(str, Enum):
    FULL = "FULL"
    FREE5GC_PARTIAL = "FREE5GC_PARTIAL"


class FailureCause(str, Enum):
    BAD_SIGNATURE = "BadSignature"
    EXPIRED = "Expired"
    SCOPE_MISMATCH = "ScopeMismatch"
    AUDIENCE_MISMATCH = "AudienceMismatch"
    SLICE_MISMATCH = "SliceMismatch"
    MALFORMED = "Malformed"


@dataclass
class AccessTokenClaims:
    """Claim set carried by an SBI access token.

    Wire names follow the JWT registered set plus producer slice claims:
    iss, sub, aud, exp, iat, scope, producerSnssaiList, producerNsiList.
    """

    subject: str
    scope: str
    expiry: int
    issued_at: int
    issuer: str | None = None
    audience: str | None = None
    producer_snssai_list: list[dict] | None = None
    producer_nsi_list: list[str] | None = None

    def to_payload(self) -> dict:
        payload: dict[str, Any] = {
            "sub": self.subject,
            "scope": self.scope,
            "exp": self.expiry,
            "iat": self.issued_at,
        }
        if self.issuer is not None:
            payload["iss"] = self.issuer
        if self.audience is not None:
            payload["aud"] = self.audience
        if self.producer_snssai_list is not None:
            payload["producerSnssaiList"] = self.producer_snssai_list
        if self.producer_nsi_list is not None:
            payload["producerNsiList"] = self.producer_nsi_list
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "AccessTokenClaims":
        return cls(
            subject=payload.get("sub", ""),
            scope=payload.get("scope", ""),
            expiry=int(payload.get("exp", 0)),
            issued_at=int(payload.get("iat", 0)),
            issuer=payload.get("iss"),
            audience=payload.get("aud"),
            producer_snssai_list=payload.get("producerSnssaiList"),
            producer_nsi_list=payload.get("producerNsiList"),
        )

    @property
    def scope_list(self) -> list[str]:
        return self.scope.split()


@dataclass
class SignedToken:
    compact: str
    claims: AccessTokenClaims
    alg: str = "HS256"


@dataclass
class TokenRequest:
    """Client-credentials grant request fields."""

    consumer_instance_id: str
    consumer_nf_type: str
    target_nf_type: str
    requested_scope: str
    target_snssai_list: list[dict] | None = None
    target_nsi_list: list[str] | None = None


@dataclass
class NfIdentity:
    """The verifying producer's own identity and served slices."""

    nf_type: str
    instance_id: str
    snssai_list: list[dict] | None = None
    nsi_list: list[str] | None = None


@dataclass
class VerificationResult:
    accepted: bool
    failure_cause: FailureCause | None = None

    def __post_init__(self):
        # accepted and failure_cause are mutually exclusive by construction
        assert self.accepted == (self.failure_cause is None)


def _b64url(data: bytes) -> str:
    return base64.urlsafe_b64encode(data).rstrip(b"=").decode("ascii")


def _b64url_decode(text: str) -> bytes:
    padding = "=" * (-len(text) % 4)
    raw = base64.urlsafe_b64decode(text + padding)
    # only the canonical encoding round-trips; stray padding bits must not
    if _b64url(raw) != text:
        raise ValueError("non-canonical base64url segment")
    return raw


def _signature(signing_input: bytes, key: bytes) -> bytes:
    return hmac.new(key, signing_input, hashlib.sha256).digest()


def mint_token(
    request: TokenRequest,
    issuer_id: str,
    key: bytes,
    ttl: int,
    mode: ClaimCompleteness = ClaimCompleteness.FULL,
    now: int | None = None,
) -> SignedToken:
    """Sign an access token for a client-credentials grant.

    FULL records every mandatory claim; FREE5GC_PARTIAL omits issuer and
    audience, recording only what that implementation persists.
    """
    if len(key) < MIN_KEY_BYTES:
        raise WeakKey(f"signing key must be at least {MIN_KEY_BYTES} bytes, got {len(key)}")
    if not request.requested_scope.strip():
        raise EmptyScope("requested scope is vacant")
    if now is None:
        now = int(time.time())
    claims = AccessTokenClaims(
        subject=request.consumer_instance_id,
        scope=request.requested_scope,
        expiry=now + ttl,
        issued_at=now,
        issuer=issuer_id if mode is ClaimCompleteness.FULL else None,
        audience=request.target_nf_type if mode is ClaimCompleteness.FULL else None,
        producer_snssai_list=request.target_snssai_list,
        producer_nsi_list=request.target_nsi_list,
    )
    header = {"alg": "HS256", "typ": "JWT"}
    head_b64 = _b64url(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    body_b64 = _b64url(json.dumps(claims.to_payload(), sort_keys=True, separators=(",", ":")).encode())
    signing_input = f"{head_b64}.{body_b64}".encode("ascii")
    sig_b64 = _b64url(_signature(signing_input, key))
    return SignedToken(compact=f"{head_b64}.{body_b64}.{sig_b64}", claims=claims)


def decode_unverified(compact: str) -> AccessTokenClaims:
    """Parse claims without checking the signature (client-side view)."""
    parts = compact.split(".")
    if len(parts) != 3:
        raise MalformedTokenResponse("compact token does not have three segments")
    try:
        payload = json.loads(_b64url_decode(parts[1]))
    except (ValueError, binascii.Error) as exc:
        raise MalformedTokenResponse(f"token payload undecodable: {exc}") from exc
    if not isinstance(payload, dict):
        raise MalformedTokenResponse("token payload is not an object")
    return AccessTokenClaims.from_payload(payload)


def _snssai_key(entry: dict) -> tuple:
    return (entry.get("sst"), entry.get("sd"))


def verify_token(
    compact: str,
    expected_service: str,
    self_identity: NfIdentity,
    key: bytes,
    now: int | None = None,
    mode: VerifierMode = VerifierMode.CORRECT,
) -> VerificationResult:
    """Producer-side token verification.

    Check order in CORRECT mode: Malformed, BadSignature, Expired,
    ScopeMismatch, AudienceMismatch, SliceMismatch; the first failing
    check names the cause.  SEEDED_SCOPE_SHADOW runs the same parse and
    signature steps but a failed scope check falls through to accept.
    FREE5GC_MINIMAL stops after signature plus scope membership.
    """
    if now is None:
        now = int(time.time())

    parts = compact.split(".")
    if len(parts) != 3:
        return VerificationResult(False, FailureCause.MALFORMED)
    try:
        header = json.loads(_b64url_decode(parts[0]))
        payload = json.loads(_b64url_decode(parts[1]))
        given_sig = _b64url_decode(parts[2])
    except (ValueError, binascii.Error):
        return VerificationResult(False, FailureCause.MALFORMED)
    if not isinstance(header, dict) or not isinstance(payload, dict):
        return VerificationResult(False, FailureCause.MALFORMED)

    signing_input = f"{parts[0]}.{parts[1]}".encode("ascii")
    if not hmac.compare_digest(given_sig, _signature(signing_input, key)):
        return VerificationResult(False, FailureCause.BAD_SIGNATURE)

    claims = AccessTokenClaims.from_payload(payload)

    if mode is VerifierMode.FREE5GC_MINIMAL:
        # signature valid; only membership in a non-vacant scope matters
        if not claims.scope_list or expected_service not in claims.scope_list:
            return VerificationResult(False, FailureCause.SCOPE_MISMATCH)
        return VerificationResult(True)

    # lifetime is validated during parsing in both remaining modes
    if claims.expiry <= now:
        return VerificationResult(False, FailureCause.EXPIRED)

    scope_ok = expected_service in claims.scope_list
    if not scope_ok:
        if mode is VerifierMode.SEEDED_SCOPE_SHADOW:
            # the scope-check error value is dropped on the floor: accept
            return VerificationResult(True)
        return VerificationResult(False, FailureCause.SCOPE_MISMATCH)

    if mode is VerifierMode.SEEDED_SCOPE_SHADOW:
        return VerificationResult(True)

    if claims.audience is not None and claims.audience not in (
        self_identity.nf_type,
        self_identity.instance_id,
    ):
        return VerificationResult(False, FailureCause.AUDIENCE_MISMATCH)

    if claims.producer_snssai_list is not None:
        served = {_snssai_key(s) for s in (self_identity.snssai_list or [])}
        offered = {_snssai_key(s) for s in claims.producer_snssai_list}
        if not served & offered:
            return VerificationResult(False, FailureCause.SLICE_MISMATCH)

    return VerificationResult(True)


# ===== Acquisition client =====


def acquire_token(
    endpoint: str,
    request: TokenRequest,
    session: requests.Session | None = None,
    timeout: float = 10.0,
) -> SignedToken:
    """POST a client-credentials grant and parse the response.

    The client trusts the endpoint: the returned signature is not
    verified here, only decoded.
    """
    form = {
        "grant_type": "client_credentials",
        "nfInstanceId": request.consumer_instance_id,
        "nfType": request.consumer_nf_type,
        "targetNfType": request.target_nf_type,
        "scope": request.requested_scope,
    }
    http = session or requests
    try:
        resp = http.post(endpoint, data=form, timeout=timeout)
    except requests.RequestException as exc:
        raise TransportError(f"token endpoint unreachable: {exc}") from exc
    if not 200 <= resp.status_code < 300:
        raise TokenDenied(f"token endpoint answered {resp.status_code}: {resp.text[:200]}")
    try:
        body = resp.json()
    except ValueError as exc:
        raise MalformedTokenResponse(f"token response is not JSON: {exc}") from exc
    compact = body.get("access_token")
    if not isinstance(compact, str) or not compact:
        raise MalformedTokenResponse("token response lacks access_token")
    if body.get("token_type", "Bearer").lower() != "bearer":
        raise MalformedTokenResponse(f"unexpected token_type {body.get('token_type')!r}")
    return SignedToken(compact=compact, claims=decode_unverified(compact))


@dataclass
class TokenProviderConfig:
    """Where request tokens come from: a file, or the token endpoint."""

    mode: str  # "file" | "fetch"
    path: str | None = None
    endpoint: str | None = None
    request: TokenRequest | None = None
    clock: Callable[[], float] = time.time


def token_provider(config: TokenProviderConfig) -> Callable[[], SignedToken]:
    """Build a () -> SignedToken source with caching for fetch mode."""
    if config.mode == "file":
        if not config.path:
            raise FileUnreadable("file mode requires a path")

        def from_file() -> SignedToken:
            try:
                compact = Path(config.path).read_text(encoding="utf-8").strip()
            except OSError as exc:
                raise FileUnreadable(f"cannot read token file {config.path}: {exc}") from exc
            if not compact:
                raise FileUnreadable(f"token file {config.path} is empty")
            return SignedToken(compact=compact, claims=decode_unverified(compact))

        return from_file

    if config.mode == "fetch":
        if not config.endpoint or config.request is None:
            raise TokenError("fetch mode requires endpoint and request")
        lock = threading.Lock()
        session = requests.Session()
        cached: list[SignedToken | None] = [None]

        def fetch() -> SignedToken:
            with lock:
                current = cached[0]
                now = config.clock()
                if current is None or now >= current.claims.expiry - REFRESH_MARGIN:
                    cached[0] = acquire_token(config.endpoint, config.request, session=session)
                return cached[0]

        return fetch

    raise TokenError(f"unknown token provider mode {config.mode!r}")


def attach_token(request, token: SignedToken):
    """Set the Bearer header on a request; a pinned value wins.

    Replaces any prior Authorization value rather than appending.  When
    the header was pinned by a user overlay, the pinned value stays and
    a diagnostic is logged.
    """
    headers = request.headers
    existing = next((k for k in headers if k.lower() == "authorization"), None)
    pinned = getattr(request, "pinned_header_values", None) or {}
    if existing is not None and any(k.lower() == "authorization" for k in pinned):
        logger.warning("Authorization pinned by overlay; leaving the pinned value in place")
        return request
    if existing is not None:
        del headers[existing]
    headers["Authorization"] = f"Bearer {token.compact}"
    return request
