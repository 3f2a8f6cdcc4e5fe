"""Security gateway for SOA e-commerce services.

Pipeline: IMS certificate check, replay cache, rate-based IDS/IPS, input
sanitization, business service components, and an encrypted store behind a
quarantine link that is severed when an attack is detected.
"""

from .envelope import (
    AuthCertificate,
    MalformedEnvelope,
    ServiceRequest,
    ServiceResponse,
    Status,
    ThreatClass,
    Verdict,
    canonical_auth_string,
    decode,
    encode,
)
from .gateway import Gateway
from .ims import BadCredentials, IdentityService
from .quarantine import LinkSevered, QuarantineLink

__version__ = "0.1.0"

__all__ = [
    "AuthCertificate",
    "BadCredentials",
    "Gateway",
    "IdentityService",
    "LinkSevered",
    "MalformedEnvelope",
    "QuarantineLink",
    "ServiceRequest",
    "ServiceResponse",
    "Status",
    "ThreatClass",
    "Verdict",
    "canonical_auth_string",
    "decode",
    "encode",
]
