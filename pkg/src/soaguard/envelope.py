"""Wire envelope shared by the gateway, the IMS and the attack harness.

Requests travel as canonical JSON: fixed field order, no whitespace, ASCII
escapes only. Exactly one byte string is valid for a given request, so
``decode`` can reject anything that would not re-encode identically.
"""

from __future__ import annotations

import enum
import ipaddress
import json
import re
import struct
from dataclasses import dataclass
from typing import Any, Optional

__all__ = [
    "AuthCertificate",
    "Decision",
    "MalformedEnvelope",
    "ServiceRequest",
    "ServiceResponse",
    "Status",
    "ThreatClass",
    "Verdict",
    "canonical_auth_string",
    "decode",
    "encode",
]

_HEX32 = re.compile(r"[0-9a-f]{32}\Z")
_HEX64 = re.compile(r"[0-9a-f]{64}\Z")
_MAX_NAME_BYTES = 128
_MAX_INT = 2**63 - 1

REQUEST_FIELDS = (
    "client_id",
    "source_ip",
    "service",
    "action",
    "payload",
    "certificate",
    "nonce",
    "timestamp",
)
CERT_FIELDS = ("subject", "issued_at", "expires_at", "cert_id", "tag")


class MalformedEnvelope(ValueError):
    """Raised by :func:`decode` for any byte string that is not a canonical request."""

    def __init__(self, position: int, reason: str):
        super().__init__(f"malformed envelope at byte {position}: {reason}")
        self.position = position
        self.reason = reason


class ThreatClass(str, enum.Enum):
    FORGERY = "Forgery"
    REPLAY = "Replay"
    EXPIRED = "Expired"
    XSS = "XSS"
    RFI = "RFI"
    LFI = "LFI"
    INJECTION = "Injection"
    UNKNOWN_SERVICE = "UnknownService"
    RATE_FLOOD = "RateFlood"


class Decision(str, enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    threat_class: Optional[ThreatClass] = None
    detail: str = ""

    def __post_init__(self) -> None:
        if self.decision is Decision.DENY and self.threat_class is None:
            raise ValueError("a Deny verdict needs a threat class")

    @classmethod
    def allow(cls, detail: str = "") -> Verdict:
        return cls(Decision.ALLOW, None, detail)

    @classmethod
    def deny(cls, threat_class: ThreatClass, detail: str = "") -> Verdict:
        return cls(Decision.DENY, threat_class, detail)

    @property
    def allowed(self) -> bool:
        return self.decision is Decision.ALLOW


def _check_int(name: str, value: Any) -> None:
    if type(value) is not int or not 0 <= value <= _MAX_INT:
        raise ValueError(f"{name} must be a non-negative integer")


def _check_name(name: str, value: Any) -> None:
    if not isinstance(value, str) or not value:
        raise ValueError(f"{name} must be a non-empty string")
    if len(value.encode("utf-8")) > _MAX_NAME_BYTES:
        raise ValueError(f"{name} exceeds {_MAX_NAME_BYTES} bytes")


@dataclass(frozen=True)
class AuthCertificate:
    """IMS-issued credential. ``tag`` is an HMAC over :func:`canonical_auth_string`."""

    subject: str
    issued_at: int
    expires_at: int
    cert_id: str
    tag: str

    def __post_init__(self) -> None:
        if not isinstance(self.subject, str) or not self.subject:
            raise ValueError("subject must be a non-empty string")
        _check_int("issued_at", self.issued_at)
        _check_int("expires_at", self.expires_at)
        if self.expires_at <= self.issued_at:
            raise ValueError("expires_at must be after issued_at")
        if not isinstance(self.cert_id, str) or not _HEX32.match(self.cert_id):
            raise ValueError("cert_id must be 32 lowercase hex characters")
        if not isinstance(self.tag, str) or not _HEX64.match(self.tag):
            raise ValueError("tag must be 64 lowercase hex characters")

    def to_dict(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in CERT_FIELDS}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AuthCertificate:
        if list(data) != list(CERT_FIELDS):
            raise ValueError("certificate fields missing, unknown or out of order")
        return cls(**data)


@dataclass(frozen=True)
class ServiceRequest:
    client_id: str
    source_ip: str
    service: str
    action: str
    payload: str
    certificate: Optional[AuthCertificate]
    nonce: str
    timestamp: int

    def __post_init__(self) -> None:
        if not isinstance(self.client_id, str):
            raise ValueError("client_id must be a string")
        if not isinstance(self.source_ip, str):
            raise ValueError("source_ip must be a string")
        try:
            parsed = ipaddress.IPv4Address(self.source_ip)
        except ValueError:
            raise ValueError(f"source_ip {self.source_ip!r} is not a dotted-quad IPv4 address") from None
        if str(parsed) != self.source_ip:
            raise ValueError("source_ip is not in canonical dotted-quad form")
        _check_name("service", self.service)
        _check_name("action", self.action)
        if not isinstance(self.payload, str):
            raise ValueError("payload must be a string")
        if self.certificate is not None and not isinstance(self.certificate, AuthCertificate):
            raise ValueError("certificate must be an AuthCertificate or None")
        if not isinstance(self.nonce, str) or not _HEX32.match(self.nonce):
            raise ValueError("nonce must be 32 lowercase hex characters")
        _check_int("timestamp", self.timestamp)


class Status(str, enum.Enum):
    OK = "Ok"
    DENIED = "Denied"
    ERROR = "Error"


@dataclass(frozen=True)
class ServiceResponse:
    status: Status
    stage: str = ""
    reason: str = ""
    body: str = ""
    threat_class: Optional[ThreatClass] = None

    def __post_init__(self) -> None:
        if self.status is Status.DENIED and not (self.stage and self.reason):
            raise ValueError("a Denied response needs a stage and a reason")

    def to_json(self) -> bytes:
        doc = {
            "status": self.status.value,
            "stage": self.stage,
            "reason": self.reason,
            "body": self.body,
            "threat_class": self.threat_class.value if self.threat_class else None,
        }
        return json.dumps(doc, separators=(",", ":")).encode("ascii")

    @classmethod
    def from_json(cls, raw: bytes) -> ServiceResponse:
        doc = json.loads(raw)
        threat = doc.get("threat_class")
        return cls(
            status=Status(doc["status"]),
            stage=doc.get("stage", ""),
            reason=doc.get("reason", ""),
            body=doc.get("body", ""),
            threat_class=ThreatClass(threat) if threat else None,
        )


def encode(request: ServiceRequest) -> bytes:
    doc = {
        "client_id": request.client_id,
        "source_ip": request.source_ip,
        "service": request.service,
        "action": request.action,
        "payload": request.payload,
        "certificate": request.certificate.to_dict() if request.certificate else None,
        "nonce": request.nonce,
        "timestamp": request.timestamp,
    }
    return json.dumps(doc, ensure_ascii=True, separators=(",", ":"), allow_nan=False).encode("ascii")


class _FieldError(Exception):
    def __init__(self, key: str, reason: str):
        self.key = key
        self.reason = reason


def _pairs_hook(pairs: list[tuple[str, Any]]) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key in out:
            raise _FieldError(key, f"duplicate field {key!r}")
        out[key] = value
    return out


def _locate(text: str, key: str, occurrence: int) -> int:
    needle = json.dumps(key) + ":"
    pos = -1
    for _ in range(occurrence):
        pos = text.find(needle, pos + 1)
        if pos < 0:
            return 0
    return pos


def decode(data: bytes) -> ServiceRequest:
    """Parse canonical envelope bytes; raise :class:`MalformedEnvelope` otherwise."""
    if not isinstance(data, (bytes, bytearray, memoryview)):
        raise MalformedEnvelope(0, "envelope must be bytes")
    data = bytes(data)
    if not data:
        raise MalformedEnvelope(0, "empty envelope")
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedEnvelope(exc.start, "non-ASCII byte in envelope") from None
    try:
        doc = json.loads(text, object_pairs_hook=_pairs_hook, parse_constant=_reject_constant)
    except _FieldError as exc:
        raise MalformedEnvelope(_locate(text, exc.key, 2), exc.reason) from None
    except json.JSONDecodeError as exc:
        raise MalformedEnvelope(exc.pos, exc.msg) from None
    except (RecursionError, ValueError) as exc:
        raise MalformedEnvelope(0, str(exc) or type(exc).__name__) from None

    if not isinstance(doc, dict):
        raise MalformedEnvelope(0, "envelope must be a JSON object")
    for key in doc:
        if key not in REQUEST_FIELDS:
            raise MalformedEnvelope(_locate(text, key, 1), f"unknown field {key!r}")
    for key in REQUEST_FIELDS:
        if key not in doc:
            raise MalformedEnvelope(len(data), f"missing field {key!r}")

    cert_doc = doc["certificate"]
    try:
        if cert_doc is None:
            cert = None
        elif isinstance(cert_doc, dict):
            cert = AuthCertificate.from_dict(cert_doc)
        else:
            raise ValueError("certificate must be an object or null")
        request = ServiceRequest(
            client_id=doc["client_id"],
            source_ip=doc["source_ip"],
            service=doc["service"],
            action=doc["action"],
            payload=doc["payload"],
            certificate=cert,
            nonce=doc["nonce"],
            timestamp=doc["timestamp"],
        )
    except (TypeError, ValueError) as exc:
        raise MalformedEnvelope(0, str(exc)) from None

    canonical = encode(request)
    if canonical != data:
        pos = next(
            (i for i, (a, b) in enumerate(zip(canonical, data)) if a != b),
            min(len(canonical), len(data)),
        )
        raise MalformedEnvelope(pos, "non-canonical encoding")
    return request


def _reject_constant(name: str) -> Any:
    raise ValueError(f"{name} is not allowed")


def _lp(field: bytes) -> bytes:
    return struct.pack(">I", len(field)) + field


def canonical_auth_string(subject: str, issued_at: int, expires_at: int, cert_id: str) -> bytes:
    """Length-prefixed byte string the IMS tag is computed over."""
    return b"IMS-CERT\x01" + b"".join(
        (
            _lp(subject.encode("utf-8")),
            _lp(str(issued_at).encode("ascii")),
            _lp(str(expires_at).encode("ascii")),
            _lp(bytes.fromhex(cert_id)),
        )
    )
