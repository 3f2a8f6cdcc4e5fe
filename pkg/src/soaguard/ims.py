"""Identity Management Service: credential check, certificate issue/verify, replay cache."""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import threading
from collections import deque
from pathlib import Path
from typing import Callable, Optional, Union

from .envelope import AuthCertificate, ThreatClass, Verdict, canonical_auth_string

__all__ = [
    "BadCredentials",
    "CredentialTable",
    "IdentityService",
    "ReplayCache",
    "hash_password",
    "load_key_file",
]

logger = logging.getLogger(__name__)

KEY_BYTES = 32
SALT_BYTES = 16
PBKDF2_ITERATIONS = 100_000
DEFAULT_TTL_S = 300

PathLike = Union[str, "os.PathLike[str]"]


class BadCredentials(Exception):
    """Unknown user or wrong password. The message never says which."""

    def __init__(self) -> None:
        super().__init__("authentication failed")


def load_key_file(path: PathLike) -> bytes:
    key = Path(path).read_bytes()
    if len(key) != KEY_BYTES:
        raise ValueError(f"key file {path} must hold exactly {KEY_BYTES} raw bytes, found {len(key)}")
    return key


def hash_password(password: str, salt: bytes, iterations: int = PBKDF2_ITERATIONS) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)


class CredentialTable:
    """Salted password digests keyed by client id. Plaintext passwords are never kept."""

    def __init__(self, entries: Optional[dict[str, tuple[bytes, bytes]]] = None, iterations: int = PBKDF2_ITERATIONS):
        self.entries: dict[str, tuple[bytes, bytes]] = dict(entries or {})
        self.iterations = iterations
        # verified against for unknown users so both failure paths cost one KDF run
        self._dummy = (os.urandom(SALT_BYTES), os.urandom(32))

    def add_user(self, client_id: str, password: str, salt: Optional[bytes] = None) -> None:
        if ":" in client_id or not client_id:
            raise ValueError("client_id must be non-empty and must not contain ':'")
        salt = salt if salt is not None else os.urandom(SALT_BYTES)
        self.entries[client_id] = (salt, hash_password(password, salt, self.iterations))

    def check(self, client_id: str, password: str) -> bool:
        salt, digest = self.entries.get(client_id, self._dummy)
        candidate = hash_password(password, salt, self.iterations)
        return hmac.compare_digest(candidate, digest) and client_id in self.entries

    @classmethod
    def load(cls, path: PathLike, iterations: int = PBKDF2_ITERATIONS) -> CredentialTable:
        table = cls(iterations=iterations)
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(":")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected client_id:hex(salt):hex(digest)")
            client_id, salt_hex, digest_hex = parts
            try:
                table.entries[client_id] = (bytes.fromhex(salt_hex), bytes.fromhex(digest_hex))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: salt and digest must be hex") from None
        return table

    def save(self, path: PathLike) -> None:
        lines = [f"{cid}:{salt.hex()}:{digest.hex()}" for cid, (salt, digest) in sorted(self.entries.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class ReplayCache:
    """Remembers (cert_id, nonce) pairs for ``horizon`` seconds.

    A pair is evicted once it is strictly older than the horizon, after
    which it would be accepted again. Certificates outlive no more than one
    ttl, so with ``horizon = 2 * ttl`` such a late replay fails as Expired.
    """

    def __init__(self, horizon: float):
        if horizon <= 0:
            raise ValueError("horizon must be positive")
        self.horizon = horizon
        self._seen: dict[tuple[str, str], float] = {}
        self._order: deque[tuple[float, tuple[str, str]]] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._seen)

    def _evict(self, now: float) -> None:
        while self._order and now - self._order[0][0] > self.horizon:
            ts, pair = self._order.popleft()
            if self._seen.get(pair) == ts:
                del self._seen[pair]

    def check_and_record(self, cert_id: str, nonce: str, now: float) -> Verdict:
        pair = (cert_id, nonce)
        with self._lock:
            self._evict(now)
            if pair in self._seen:
                return Verdict.deny(ThreatClass.REPLAY, f"nonce {nonce} already used with certificate {cert_id}")
            self._seen[pair] = now
            self._order.append((now, pair))
        return Verdict.allow()


class IdentityService:
    """Issues and verifies HMAC-SHA256 authentication certificates."""

    def __init__(
        self,
        key: bytes,
        credentials: CredentialTable,
        ttl: int = DEFAULT_TTL_S,
        replay_horizon: Optional[float] = None,
        id_source: Callable[[int], bytes] = os.urandom,
    ):
        if len(key) != KEY_BYTES:
            raise ValueError(f"IMS key must be {KEY_BYTES} bytes")
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        self._key = key
        self.credentials = credentials
        self.ttl = ttl
        self.replay = ReplayCache(replay_horizon if replay_horizon is not None else 2 * ttl)
        self._revoked: set[str] = set()
        self._revoked_lock = threading.Lock()
        self._id_source = id_source

    def __repr__(self) -> str:
        return f"IdentityService(ttl={self.ttl}, users={len(self.credentials.entries)})"

    def _tag(self, subject: str, issued_at: int, expires_at: int, cert_id: str) -> str:
        msg = canonical_auth_string(subject, issued_at, expires_at, cert_id)
        return hmac.new(self._key, msg, hashlib.sha256).hexdigest()

    def authenticate(self, client_id: str, password: str, now: float) -> AuthCertificate:
        if not self.credentials.check(client_id, password):
            logger.info("authentication failed")
            raise BadCredentials()
        issued = int(now)
        expires = issued + self.ttl
        cert_id = self._id_source(16).hex()
        return AuthCertificate(
            subject=client_id,
            issued_at=issued,
            expires_at=expires,
            cert_id=cert_id,
            tag=self._tag(client_id, issued, expires, cert_id),
        )

    def verify_certificate(self, cert: AuthCertificate, now: float) -> Verdict:
        expected = self._tag(cert.subject, cert.issued_at, cert.expires_at, cert.cert_id)
        # compare_digest runs over the full length regardless of where bytes differ
        if not hmac.compare_digest(expected.encode("ascii"), cert.tag.encode("ascii")):
            return Verdict.deny(ThreatClass.FORGERY, "certificate tag does not verify")
        if cert.cert_id in self._revoked:
            return Verdict.deny(ThreatClass.FORGERY, f"certificate {cert.cert_id} revoked")
        if not cert.issued_at <= now < cert.expires_at:
            return Verdict.deny(ThreatClass.EXPIRED, "certificate outside its validity window")
        return Verdict.allow()

    def check_replay(self, cert_id: str, nonce: str, now: float) -> Verdict:
        return self.replay.check_and_record(cert_id, nonce, now)

    def revoke(self, cert_id: str) -> None:
        with self._revoked_lock:
            self._revoked.add(cert_id)

    def is_revoked(self, cert_id: str) -> bool:
        return cert_id in self._revoked
