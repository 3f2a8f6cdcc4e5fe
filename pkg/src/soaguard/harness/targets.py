"""Where harness traffic goes: an in-process gateway or one listening on HTTP."""

from __future__ import annotations

import json
import tempfile
import time
import urllib.error
import urllib.request
from pathlib import Path
from typing import Any, Optional, Protocol, Union
from urllib.parse import urlencode

from ..config import GatewayConfig
from ..envelope import ServiceResponse

__all__ = ["HttpTarget", "InProcessTarget", "SimClock", "Target", "TargetUnreachable", "WallClock", "open_target"]


class TargetUnreachable(ConnectionError):
    pass


class SimClock:
    """Deterministic clock: time only moves when the harness says so."""

    simulated = True

    def __init__(self, start: float = 1_700_000_000.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def sleep_until(self, t: float) -> None:
        self._now = max(self._now, t)

    def advance(self, seconds: float) -> None:
        self._now += seconds


class WallClock:
    simulated = False

    def now(self) -> float:
        return time.time()

    def sleep_until(self, t: float) -> None:
        delay = t - time.time()
        if delay > 0:
            time.sleep(delay)

    def advance(self, seconds: float) -> None:
        time.sleep(seconds)


class Target(Protocol):
    store_path: Optional[Path]

    def reset(self, scenario: str, now: float) -> None: ...
    def auth(self, client_id: str, password: str, ip: str, now: float) -> tuple[int, bytes]: ...
    def invoke(self, body: bytes, ip: str, now: float) -> ServiceResponse: ...
    def admin(self, verb: str, now: float, **params: str) -> dict[str, Any]: ...
    def close(self) -> None: ...


def _read_secret(path: Optional[Path]) -> str:
    if path is None:
        raise ValueError("path not configured")
    return Path(path).read_text(encoding="utf-8").strip()


class InProcessTarget:
    """Builds a fresh gateway (and a fresh store file) for every scenario."""

    def __init__(self, config: GatewayConfig, workdir: Optional[Union[str, Path]] = None):
        from ..gateway import Gateway  # deferred: only the in-process profile needs it

        self._gateway_cls = Gateway
        self.config = config
        self._tmp = None
        if workdir is None:
            self._tmp = tempfile.TemporaryDirectory(prefix="harness-")
            workdir = self._tmp.name
        self.workdir = Path(workdir)
        self.admin_token = _read_secret(config.admin_token_file)
        self.gateway = None
        self.store_path: Optional[Path] = None

    def reset(self, scenario: str, now: float) -> None:
        if self.gateway is not None:
            self.gateway.close()
        self.store_path = self.workdir / f"{scenario}.store"
        if self.store_path.exists():
            self.store_path.unlink()
        cfg = self.config.replace(
            store_path=self.store_path,
            store_profile="single-process",
            store_durable=False,
            alert_log_path=self.workdir / f"{scenario}.alerts",
            access_log_path=self.workdir / f"{scenario}.access",
        )
        self.gateway = self._gateway_cls.from_config(cfg, now=now)

    def auth(self, client_id: str, password: str, ip: str, now: float) -> tuple[int, bytes]:
        body = urlencode({"client_id": client_id, "password": password}).encode()
        return self.gateway.dispatch("POST", "/auth", {}, body, ip, 0, now)

    def invoke(self, body: bytes, ip: str, now: float) -> ServiceResponse:
        _, raw = self.gateway.dispatch("POST", "/invoke", {}, body, ip, 0, now)
        return ServiceResponse.from_json(raw)

    def admin(self, verb: str, now: float, **params: str) -> dict[str, Any]:
        code, raw = self.gateway.dispatch(
            "POST", f"/admin/{verb}", {"x-admin-token": self.admin_token}, urlencode(params).encode(), "127.0.0.1", 0, now
        )
        doc = json.loads(raw)
        if code != 200:
            raise RuntimeError(f"admin {verb} failed: {doc}")
        return doc

    def close(self) -> None:
        if self.gateway is not None:
            self.gateway.close()
        if self._tmp is not None:
            self._tmp.cleanup()


class HttpTarget:
    """Gateway reached over HTTP. Simulated time and source addresses travel in headers,
    which the gateway honours only when started with ``sim_clock``/``trust_forwarded_for``."""

    def __init__(
        self,
        url: str,
        admin_token: str,
        store_path: Optional[Path] = None,
        simulated: bool = False,
        timeout: float = 10.0,
    ):
        self.url = url.rstrip("/")
        self.admin_token = admin_token
        self.store_path = store_path
        self.simulated = simulated
        self.timeout = timeout

    def _post(self, path: str, body: bytes, ip: str, now: float, extra: Optional[dict[str, str]] = None) -> tuple[int, bytes]:
        headers = {"Content-Type": "application/octet-stream", "X-Forwarded-For": ip}
        if self.simulated:
            headers["X-Sim-Time"] = repr(now)
        headers.update(extra or {})
        req = urllib.request.Request(self.url + path, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                return resp.status, resp.read()
        except urllib.error.HTTPError as exc:
            return exc.code, exc.read()
        except (urllib.error.URLError, OSError) as exc:
            raise TargetUnreachable(f"{self.url}: {exc}") from exc

    def reset(self, scenario: str, now: float) -> None:
        status = self.admin("status", now)
        if status["link"] != "Connected":
            self.admin("restore-link", now)

    def auth(self, client_id: str, password: str, ip: str, now: float) -> tuple[int, bytes]:
        return self._post("/auth", urlencode({"client_id": client_id, "password": password}).encode(), ip, now)

    def invoke(self, body: bytes, ip: str, now: float) -> ServiceResponse:
        code, raw = self._post("/invoke", body, ip, now)
        try:
            return ServiceResponse.from_json(raw)
        except (ValueError, KeyError) as exc:
            raise TargetUnreachable(f"unexpected reply {code}: {raw[:200]!r}") from exc

    def admin(self, verb: str, now: float, **params: str) -> dict[str, Any]:
        code, raw = self._post(
            f"/admin/{verb}", urlencode(params).encode(), "127.0.0.1", now, {"X-Admin-Token": self.admin_token}
        )
        doc = json.loads(raw)
        if code != 200:
            raise RuntimeError(f"admin {verb} failed: {doc}")
        return doc

    def close(self) -> None:
        pass


def open_target(
    target: str,
    config: Optional[GatewayConfig],
    simulated: bool,
    store_path: Optional[Path] = None,
    admin_token: Optional[str] = None,
) -> Target:
    if target == "inproc":
        if config is None:
            raise ValueError("the inproc target needs a gateway config")
        return InProcessTarget(config)
    if target.startswith(("http://", "https://")):
        token = admin_token if admin_token is not None else _read_secret(config.admin_token_file if config else None)
        path = store_path if store_path is not None else (config.store_path if config else None)
        return HttpTarget(target, token, path, simulated)
    raise ValueError(f"unsupported target {target!r}; use 'inproc' or an http:// URL")
