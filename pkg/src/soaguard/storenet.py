"""Server 2 over a local socket.

Frames are ``u32 big-endian length | JSON``. Binary fields are base64. The
server only ever sees sealed records; encryption happens on Server 1.
"""

from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import struct
import threading
from typing import Any, Optional

from .store import EncryptedRecord, NotFound, RecordFile, StoreIOError

__all__ = ["RemoteRecordFile", "StoreServer", "parse_address"]

logger = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def _send(sock: socket.socket, doc: dict[str, Any]) -> None:
    raw = json.dumps(doc, separators=(",", ":")).encode("utf-8")
    sock.sendall(struct.pack(">I", len(raw)) + raw)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed connection")
        buf += chunk
    return bytes(buf)


def _recv(sock: socket.socket) -> dict[str, Any]:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ConnectionError(f"frame of {length} bytes exceeds limit")
    return json.loads(_recv_exact(sock, length))


def _record_doc(rec: EncryptedRecord) -> dict[str, str]:
    return {
        "key": rec.record_key,
        "nonce": _b64(rec.nonce),
        "ct": _b64(rec.ciphertext),
        "key_id": _b64(rec.key_id),
    }


def _record_from(doc: dict[str, str]) -> EncryptedRecord:
    return EncryptedRecord(doc["key"], _unb64(doc["nonce"]), _unb64(doc["ct"]), _unb64(doc["key_id"]))


class _Handler(socketserver.BaseRequestHandler):
    server: StoreServer

    def handle(self) -> None:
        while True:
            try:
                req = _recv(self.request)
            except (ConnectionError, OSError, ValueError):
                return
            _send(self.request, self.server.dispatch(req))


class StoreServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, records: RecordFile, address: tuple[str, int] = ("127.0.0.1", 0)):
        super().__init__(address, _Handler)
        self.records = records

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def dispatch(self, req: dict[str, Any]) -> dict[str, Any]:
        op = req.get("op")
        try:
            if op == "put":
                self.records.put_record(_record_from(req["record"]))
                return {"ok": True}
            if op == "get":
                return {"ok": True, "record": _record_doc(self.records.get_record(req["key"]))}
            if op == "delete":
                self.records.delete(req["key"])
                return {"ok": True}
            if op == "keys":
                return {"ok": True, "keys": self.records.keys()}
            if op == "ping":
                return {"ok": True}
            return {"ok": False, "error": "BadRequest", "message": f"unknown op {op!r}"}
        except NotFound as exc:
            return {"ok": False, "error": "NotFound", "message": str(exc.args[0])}
        except StoreIOError as exc:
            return {"ok": False, "error": "StoreIOError", "message": str(exc)}
        except (KeyError, TypeError, ValueError) as exc:
            return {"ok": False, "error": "BadRequest", "message": str(exc)}

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="store-server", daemon=True)
        thread.start()
        return thread


class RemoteRecordFile:
    """Record backend that talks to a :class:`StoreServer`."""

    def __init__(self, address: str, timeout: float = 5.0):
        self.address = parse_address(address)
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._lock = threading.Lock()

    def _call(self, doc: dict[str, Any]) -> dict[str, Any]:
        with self._lock:
            for attempt in (0, 1):
                try:
                    if self._sock is None:
                        self._sock = socket.create_connection(self.address, timeout=self.timeout)
                    _send(self._sock, doc)
                    resp = _recv(self._sock)
                    break
                except (ConnectionError, OSError) as exc:
                    self.close_locked()
                    if attempt:
                        raise StoreIOError(f"store server {self.address} unreachable: {exc}") from exc
        if resp.get("ok"):
            return resp
        error = resp.get("error")
        if error == "NotFound":
            raise NotFound(resp.get("message", ""))
        raise StoreIOError(f"{error}: {resp.get('message', '')}")

    def close_locked(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def close(self) -> None:
        with self._lock:
            self.close_locked()

    def put_record(self, record: EncryptedRecord) -> None:
        self._call({"op": "put", "record": _record_doc(record)})

    def get_record(self, record_key: str) -> EncryptedRecord:
        return _record_from(self._call({"op": "get", "key": record_key})["record"])

    def delete(self, record_key: str) -> None:
        self._call({"op": "delete", "key": record_key})

    def keys(self) -> list[str]:
        return list(self._call({"op": "keys"})["keys"])

    def ping(self) -> None:
        self._call({"op": "ping"})
