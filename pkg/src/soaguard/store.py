"""Encrypted key-value store (Server 2) and the Server-1 data service that holds its key.

Each record is sealed with AES-256-GCM under a random 96-bit nonce. The record
key and the key id are bound as associated data, so moving, renaming or
re-labelling a record breaks its tag. The store file never contains key
material; record keys are stored in the clear.

File layout (little-endian)::

    b"ESTORE1\\n"
    record*   = u32 klen | key | nonce[12] | u32 clen | ciphertext | key_id[8]
    index     = u64 offset * count | u32 count
    checksum  = blake2b-64 over every preceding byte
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Union

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

__all__ = [
    "DataKey",
    "DataService",
    "DecryptionFailure",
    "EncryptedRecord",
    "NotFound",
    "RecordFile",
    "SecureStore",
    "StoreError",
    "StoreIOError",
    "open_record",
    "scan_plaintext",
    "seal",
]

logger = logging.getLogger(__name__)

MAGIC = b"ESTORE1\n"
NONCE_BYTES = 12
TAG_BYTES = 16
KEY_ID_BYTES = 8
MAX_RECORD_KEY_BYTES = 256
_CHECKSUM_BYTES = 8


class StoreError(Exception):
    pass


class NotFound(StoreError, KeyError):
    def __str__(self) -> str:
        return f"no record {self.args[0]!r}" if self.args else "record not found"


class DecryptionFailure(StoreError):
    """Wrong key or tampered record. The two causes are deliberately indistinguishable."""

    def __init__(self) -> None:
        super().__init__("record could not be decrypted")


class StoreIOError(StoreError, OSError):
    pass


@dataclass(frozen=True)
class DataKey:
    key_id: str
    key_bytes: bytes

    def __post_init__(self) -> None:
        raw = self.key_id.encode("ascii") if self.key_id.isascii() else b""
        if not raw or len(raw) > KEY_ID_BYTES or b"\0" in raw:
            raise ValueError(f"key_id must be 1..{KEY_ID_BYTES} ASCII characters")
        if len(self.key_bytes) != 32:
            raise ValueError("data key must be 32 bytes")

    def __repr__(self) -> str:
        return f"DataKey(key_id={self.key_id!r})"

    @property
    def key_id_bytes(self) -> bytes:
        return self.key_id.encode("ascii").ljust(KEY_ID_BYTES, b"\0")

    @classmethod
    def generate(cls, key_id: str = "dk1") -> DataKey:
        return cls(key_id, AESGCM.generate_key(bit_length=256))

    @classmethod
    def from_file(cls, path: Union[str, Path], key_id: str = "dk1") -> DataKey:
        raw = Path(path).read_bytes()
        if len(raw) != 32:
            raise ValueError(f"data key file {path} must hold exactly 32 raw bytes")
        return cls(key_id, raw)


@dataclass(frozen=True)
class EncryptedRecord:
    record_key: str
    nonce: bytes
    ciphertext: bytes
    key_id: bytes

    def encode(self) -> bytes:
        key = self.record_key.encode("utf-8")
        return b"".join(
            (
                struct.pack("<I", len(key)),
                key,
                self.nonce,
                struct.pack("<I", len(self.ciphertext)),
                self.ciphertext,
                self.key_id,
            )
        )


def _aad(record_key: str, key_id: bytes) -> bytes:
    key = record_key.encode("utf-8")
    return MAGIC + struct.pack("<I", len(key)) + key + key_id


def _check_record_key(record_key: str) -> None:
    if not isinstance(record_key, str) or not record_key:
        raise ValueError("record key must be a non-empty string")
    if len(record_key.encode("utf-8")) > MAX_RECORD_KEY_BYTES:
        raise ValueError(f"record key exceeds {MAX_RECORD_KEY_BYTES} bytes")


def seal(record_key: str, plaintext: bytes, key: DataKey) -> EncryptedRecord:
    _check_record_key(record_key)
    nonce = os.urandom(NONCE_BYTES)
    ct = AESGCM(key.key_bytes).encrypt(nonce, bytes(plaintext), _aad(record_key, key.key_id_bytes))
    return EncryptedRecord(record_key, nonce, ct, key.key_id_bytes)


def open_record(record: EncryptedRecord, key: DataKey) -> bytes:
    if record.key_id != key.key_id_bytes or len(record.nonce) != NONCE_BYTES:
        raise DecryptionFailure()
    try:
        return AESGCM(key.key_bytes).decrypt(record.nonce, record.ciphertext, _aad(record.record_key, record.key_id))
    except InvalidTag:
        raise DecryptionFailure() from None


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECKSUM_BYTES).digest()


def serialize(records: Iterable[EncryptedRecord]) -> bytes:
    out = bytearray(MAGIC)
    offsets = []
    for rec in records:
        offsets.append(len(out))
        out += rec.encode()
    for off in offsets:
        out += struct.pack("<Q", off)
    out += struct.pack("<I", len(offsets))
    out += _checksum(bytes(out))
    return bytes(out)


def parse(data: bytes) -> tuple[dict[str, EncryptedRecord], bool]:
    """Return ``(records, checksum_ok)``; structural damage raises StoreIOError.

    A checksum mismatch alone is not fatal: per-record authentication decides
    which records are still readable.
    """
    if len(data) < len(MAGIC) + 4 + _CHECKSUM_BYTES or not data.startswith(MAGIC):
        raise StoreIOError("not a store file (bad magic or truncated)")
    body, checksum = data[:-_CHECKSUM_BYTES], data[-_CHECKSUM_BYTES:]
    checksum_ok = _checksum(body) == checksum
    (count,) = struct.unpack_from("<I", body, len(body) - 4)
    index_start = len(body) - 4 - 8 * count
    if index_start < len(MAGIC):
        raise StoreIOError("corrupt store index")
    records: dict[str, EncryptedRecord] = {}
    for i in range(count):
        (off,) = struct.unpack_from("<Q", body, index_start + 8 * i)
        try:
            rec, end = _parse_record(body, off, index_start)
        except (struct.error, UnicodeDecodeError, ValueError) as exc:
            raise StoreIOError(f"corrupt record at offset {off}: {exc}") from None
        if rec.record_key in records:
            raise StoreIOError(f"duplicate record key at offset {off}")
        records[rec.record_key] = rec
    return records, checksum_ok


def _parse_record(body: bytes, off: int, limit: int) -> tuple[EncryptedRecord, int]:
    if off < len(MAGIC) or off + 4 > limit:
        raise ValueError("offset out of range")
    (klen,) = struct.unpack_from("<I", body, off)
    pos = off + 4
    key = body[pos : pos + klen].decode("utf-8")
    pos += klen
    nonce = body[pos : pos + NONCE_BYTES]
    pos += NONCE_BYTES
    (clen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    ct = body[pos : pos + clen]
    pos += clen
    key_id = body[pos : pos + KEY_ID_BYTES]
    pos += KEY_ID_BYTES
    if pos > limit:
        raise ValueError("record runs into the index")
    return EncryptedRecord(key, nonce, ct, key_id), pos


class RecordBackend(Protocol):
    def put_record(self, record: EncryptedRecord) -> None: ...
    def get_record(self, record_key: str) -> EncryptedRecord: ...
    def delete(self, record_key: str) -> None: ...
    def keys(self) -> list[str]: ...


class RecordFile:
    """Server-2 persistence: holds ciphertext only, never a key.

    Every commit rewrites the compacted file to a temporary sibling, fsyncs it
    and renames it over the old one, so a crash leaves either version intact.
    """

    def __init__(self, path: Union[str, Path], durable: bool = True):
        self.path = Path(path)
        self.durable = durable
        self._commit_lock = threading.Lock()
        self._records: dict[str, EncryptedRecord] = {}
        self.checksum_ok = True
        self.reload()

    def reload(self) -> None:
        try:
            data = self.path.read_bytes()
        except FileNotFoundError:
            self._records = {}
            self.checksum_ok = True
            return
        except OSError as exc:
            raise StoreIOError(f"cannot read {self.path}: {exc}") from exc
        self._records, self.checksum_ok = parse(data)
        if not self.checksum_ok:
            logger.warning("store file %s fails its checksum; records will be authenticated individually", self.path)

    def __len__(self) -> int:
        return len(self._records)

    def keys(self) -> list[str]:
        return list(self._records)

    def records(self) -> list[EncryptedRecord]:
        return list(self._records.values())

    def get_record(self, record_key: str) -> EncryptedRecord:
        try:
            return self._records[record_key]
        except KeyError:
            raise NotFound(record_key) from None

    def put_record(self, record: EncryptedRecord) -> None:
        _check_record_key(record.record_key)
        with self._commit_lock:
            updated = dict(self._records)
            updated[record.record_key] = record
            self._commit(updated)

    def delete(self, record_key: str) -> None:
        with self._commit_lock:
            if record_key not in self._records:
                return
            updated = dict(self._records)
            del updated[record_key]
            self._commit(updated)

    def _commit(self, records: dict[str, EncryptedRecord]) -> None:
        data = serialize(records.values())
        tmp = self.path.with_name(f".{self.path.name}.{os.getpid()}.tmp")
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, "wb") as fh:
                fh.write(data)
                if self.durable:
                    fh.flush()
                    os.fsync(fh.fileno())
            os.replace(tmp, self.path)
            if self.durable:
                _fsync_dir(self.path.parent)
        except OSError as exc:
            try:
                tmp.unlink()
            except OSError:
                pass
            raise StoreIOError(f"commit to {self.path} failed: {exc}") from exc
        self._records = records


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


class SecureStore:
    """Encrypting front end over a record backend (local file or remote Server 2)."""

    def __init__(self, backend: RecordBackend):
        self.backend = backend

    def put(self, record_key: str, plaintext: bytes, key: DataKey) -> None:
        self.backend.put_record(seal(record_key, plaintext, key))

    def get(self, record_key: str, key: DataKey) -> bytes:
        return open_record(self.backend.get_record(record_key), key)

    def delete(self, record_key: str) -> None:
        self.backend.delete(record_key)

    def keys(self) -> list[str]:
        return self.backend.keys()


class DataService:
    """Server-1 data service component: the only holder of the data key."""

    def __init__(self, store: SecureStore, key: DataKey):
        self.store = store
        self._key = key

    def __repr__(self) -> str:
        return f"DataService(key_id={self._key.key_id!r})"

    def put(self, record_key: str, plaintext: bytes) -> None:
        self.store.put(record_key, plaintext, self._key)

    def get(self, record_key: str) -> bytes:
        return self.store.get(record_key, self._key)

    def delete(self, record_key: str) -> None:
        self.store.delete(record_key)


def scan_plaintext(store_path: Union[str, Path], probes: Iterable[bytes]) -> list[tuple[bytes, int]]:
    """Every ``(probe, offset)`` at which a probe occurs verbatim in the store file."""
    try:
        data = Path(store_path).read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read {store_path}: {exc}") from exc
    hits = []
    for probe in probes:
        if not probe:
            continue
        pos = data.find(probe)
        while pos >= 0:
            hits.append((probe, pos))
            pos = data.find(probe, pos + 1)
    return hits
