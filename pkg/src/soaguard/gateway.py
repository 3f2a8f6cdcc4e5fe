"""Server 1: the security pipeline in front of the business service components.

Stage order is fixed: ban-check, auth, replay, ids-observe, sanitize, service,
store. The first Deny ends the request, is reported to the IDS (which may
quarantine the store link) and is answered with ``status=Denied``.
"""

from __future__ import annotations

import hmac
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Optional, Union
from urllib.parse import parse_qsl, quote

from . import filters
from .config import GatewayConfig
from .envelope import (
    MalformedEnvelope,
    ServiceRequest,
    ServiceResponse,
    Status,
    ThreatClass,
    Verdict,
    decode,
)
from .filters import RuleParseError, RuleSet, ServiceRegistry, load_registry, load_rules
from .ids import AlertLog, IntrusionMonitor, LogWriteError
from .ims import BadCredentials, CredentialTable, IdentityService, load_key_file
from .quarantine import LinkSevered, QuarantineLink, Unauthorized
from .services import BusinessServiceComponent, CallContext, ScopedStore, ServiceError, builtin_components
from .store import DataKey, DataService, RecordFile, SecureStore, StoreError
from .storenet import RemoteRecordFile

__all__ = [
    "DuplicateService",
    "Gateway",
    "GatewayHTTPServer",
    "PipelineTrace",
    "STAGES",
    "TraceEntry",
]

logger = logging.getLogger(__name__)

STAGES = ("ban-check", "auth", "replay", "ids-observe", "sanitize", "service", "store")
DECODE_STAGE = "decode"
MAX_BODY = 1 << 20
AUTH_FAILED_BODY = b'{"error":"authentication failed"}'


class DuplicateService(ValueError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    stage: str
    outcome: str  # allow | deny | error
    threat_class: Optional[ThreatClass] = None


@dataclass
class PipelineTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def add(self, stage: str, outcome: str, threat: Optional[ThreatClass] = None) -> None:
        self.entries.append(TraceEntry(stage, outcome, threat))

    @property
    def stages(self) -> list[str]:
        return [e.stage for e in self.entries]

    def is_well_ordered(self) -> bool:
        stages = self.stages
        if stages == [DECODE_STAGE]:
            return self.entries[0].outcome == "deny"
        if stages != list(STAGES[: len(stages)]):
            return False
        # only the last entry may be a non-allow outcome
        return all(e.outcome == "allow" for e in self.entries[:-1])


class Gateway:
    def __init__(
        self,
        ims: IdentityService,
        monitor: IntrusionMonitor,
        link: QuarantineLink,
        data: DataService,
        admin_token: bytes,
        registry: Optional[ServiceRegistry] = None,
        rules: Optional[RuleSet] = None,
        access_log: Optional[Union[str, Path]] = None,
        rules_path: Optional[Path] = None,
        components: Optional[list[BusinessServiceComponent]] = None,
    ):
        self.ims = ims
        self.monitor = monitor
        self.link = link
        self.data = data
        self._admin_token = admin_token
        self.registry = registry if registry is not None else ServiceRegistry()
        self.rules = rules if rules is not None else RuleSet()
        self.rules_path = rules_path
        self.components: dict[str, BusinessServiceComponent] = {}
        self._components_lock = threading.Lock()
        self._access_log = Path(access_log) if access_log is not None else None
        self._access_lock = threading.Lock()
        self.access_count = 0
        self.closers: list[Callable[[], None]] = []
        monitor.subscribe(link.on_alert)
        for component in components if components is not None else builtin_components():
            self.register_component(component)
        if not self.rules.rules:
            logger.warning("gateway running without payload rules: registry check only")

    # construction

    @classmethod
    def from_config(cls, cfg: GatewayConfig, now: Optional[float] = None) -> Gateway:
        now = time.time() if now is None else now
        for name in ("ims_key_file", "credentials_file", "data_key_file", "admin_token_file"):
            if getattr(cfg, name) is None:
                raise ValueError(f"config is missing {name}")
        ims = IdentityService(
            load_key_file(cfg.ims_key_file),
            CredentialTable.load(cfg.credentials_file, iterations=cfg.pbkdf2_iterations),
            ttl=cfg.ims_ttl_s,
        )
        host, _, port = cfg.listen.rpartition(":")
        monitor = IntrusionMonitor(
            window=cfg.ids_window_s,
            threshold=cfg.ids_threshold,
            ban_duration=cfg.ids_ban_s,
            global_threshold=cfg.ids_global_threshold,
            alert_log=AlertLog(cfg.alert_log_path),
            sensor=(host or "127.0.0.1", int(port) if port.isdigit() else 0),
        )
        admin_token = Path(cfg.admin_token_file).read_bytes().strip()
        if not admin_token:
            raise ValueError("admin token file is empty")
        link = QuarantineLink(admin_token, cfg.escalate_k, cfg.escalate_window_s, now=now)
        if cfg.store_profile == "two-process":
            backend: Any = RemoteRecordFile(cfg.store_address)
        else:
            if cfg.store_path is None:
                raise ValueError("single-process profile needs store.path")
            backend = RecordFile(cfg.store_path, durable=cfg.store_durable)
        data = DataService(SecureStore(backend), DataKey.from_file(cfg.data_key_file, cfg.data_key_id))
        rules = load_rules(cfg.rules_path) if cfg.rules_path is not None else RuleSet()
        registry = load_registry(cfg.registry_path) if cfg.registry_path is not None else ServiceRegistry()
        gw = cls(
            ims,
            monitor,
            link,
            data,
            admin_token,
            registry=registry,
            rules=rules,
            access_log=cfg.access_log_path,
            rules_path=cfg.rules_path,
        )
        if isinstance(backend, RemoteRecordFile):
            gw.closers.append(backend.close)
        return gw

    def close(self) -> None:
        for fn in self.closers:
            fn()

    def register_component(self, component: BusinessServiceComponent) -> None:
        key = component.name.strip().lower()
        with self._components_lock:
            if key in self.components:
                raise DuplicateService(f"service {component.name!r} already registered")
            self.components[key] = component
            self.registry = self.registry.with_service(key, component.actions)

    # request pipeline

    def handle(self, data: bytes, source_ip: str, now: float, src_port: int = 0) -> ServiceResponse:
        return self.handle_traced(data, source_ip, now, src_port)[0]

    def handle_traced(
        self, data: bytes, source_ip: str, now: float, src_port: int = 0
    ) -> tuple[ServiceResponse, PipelineTrace]:
        trace = PipelineTrace()
        request: Optional[ServiceRequest] = None
        try:
            request = decode(data)
        except MalformedEnvelope as exc:
            verdict = Verdict.deny(ThreatClass.UNKNOWN_SERVICE, f"malformed envelope: {exc.reason}")
            response = self._deny(trace, DECODE_STAGE, verdict, source_ip, src_port, now)
        else:
            response = self._pipeline(request, trace, source_ip, src_port, now)
        self._log_access(now, source_ip, request, trace, response)
        return response, trace

    def _pipeline(
        self, req: ServiceRequest, trace: PipelineTrace, ip: str, port: int, now: float
    ) -> ServiceResponse:
        if self.monitor.is_banned(ip, now):
            verdict = Verdict.deny(ThreatClass.RATE_FLOOD, f"source {ip} is banned")
            return self._deny(trace, "ban-check", verdict, ip, port, now)
        trace.add("ban-check", "allow")

        verdict = self._authenticate_request(req, now)
        if not verdict.allowed:
            return self._deny(trace, "auth", verdict, ip, port, now)
        trace.add("auth", "allow")

        verdict = self.ims.check_replay(req.certificate.cert_id, req.nonce, now)
        if not verdict.allowed:
            return self._deny(trace, "replay", verdict, ip, port, now)
        trace.add("replay", "allow")

        # observe() raises its own alert on Deny
        try:
            verdict = self.monitor.observe(ip, now, port)
        except LogWriteError as exc:
            logger.error("alert lost: %s", exc)
            trace.add("ids-observe", "error")
            return ServiceResponse(Status.ERROR, "ids-observe", f"alert log failed: {exc}")
        if not verdict.allowed:
            trace.add("ids-observe", "deny", verdict.threat_class)
            return _denied("ids-observe", verdict)
        trace.add("ids-observe", "allow")

        verdict = filters.sanitize(req, self.registry, self.rules)
        if not verdict.allowed:
            return self._deny(trace, "sanitize", verdict, ip, port, now)
        trace.add("sanitize", "allow")

        return self._invoke(req, trace)

    def _authenticate_request(self, req: ServiceRequest, now: float) -> Verdict:
        cert = req.certificate
        if cert is None:
            return Verdict.deny(ThreatClass.FORGERY, "no certificate presented")
        verdict = self.ims.verify_certificate(cert, now)
        if verdict.allowed and cert.subject != req.client_id:
            return Verdict.deny(ThreatClass.FORGERY, "certificate was issued to a different subject")
        return verdict

    def _deny(
        self, trace: PipelineTrace, stage: str, verdict: Verdict, ip: str, port: int, now: float
    ) -> ServiceResponse:
        trace.add(stage, "deny", verdict.threat_class)
        try:
            self.monitor.report(verdict, ip, now, port)
        except LogWriteError as exc:
            logger.error("alert lost: %s", exc)
            return ServiceResponse(Status.ERROR, stage, f"request denied but alert log failed: {exc}", "", verdict.threat_class)
        return _denied(stage, verdict)

    def _invoke(self, req: ServiceRequest, trace: PipelineTrace) -> ServiceResponse:
        component = self.components.get(req.service.strip().lower())
        handler = component.actions.get(req.action.strip().lower()) if component else None
        if handler is None:
            trace.add("service", "error")
            return ServiceResponse(Status.ERROR, "service", f"no component serves {req.service}.{req.action}")
        ctx = CallContext(
            client_id=req.client_id,
            payload=req.payload,
            nonce=req.nonce,
            store=self._scoped(component),
            call=self._internal_call,
        )
        try:
            body = handler(ctx)
        except ServiceError as exc:
            trace.add("service", "error")
            return ServiceResponse(Status.ERROR, "service", str(exc))
        except LinkSevered as exc:
            trace.add("service", "allow")
            trace.add("store", "error")
            return ServiceResponse(Status.ERROR, "store", f"LinkSevered: {exc}")
        except StoreError as exc:
            trace.add("service", "allow")
            trace.add("store", "error")
            return ServiceResponse(Status.ERROR, "store", f"{type(exc).__name__}: {exc}")
        trace.add("service", "allow")
        trace.add("store", "allow")
        return ServiceResponse(Status.OK, "store", "", body)

    def _scoped(self, component: BusinessServiceComponent) -> ScopedStore:
        return ScopedStore(component.namespace, self.data, self.link.guarded_call)

    def _internal_call(self, service: str, op: str, **kwargs: Any) -> Any:
        component = self.components.get(service)
        if component is None or op not in component.internal:
            raise ServiceError(f"no internal operation {service}.{op}")
        return component.internal[op](self._scoped(component), **kwargs)

    def _log_access(
        self,
        now: float,
        ip: str,
        req: Optional[ServiceRequest],
        trace: PipelineTrace,
        response: ServiceResponse,
    ) -> None:
        stage = trace.entries[-1].stage if trace.entries else "-"
        fields = [
            f"{now:.6f}",
            ip,
            _field(req.client_id if req else ""),
            _field(req.service if req else ""),
            _field(req.action if req else ""),
            stage,
            response.status.value,
        ]
        line = " ".join(fields) + "\n"
        with self._access_lock:
            self.access_count += 1
            if self._access_log is not None:
                with open(self._access_log, "a", encoding="utf-8") as fh:
                    fh.write(line)

    # authentication endpoint

    def authenticate(self, client_id: str, password: str, source_ip: str, now: float) -> tuple[int, bytes]:
        if self.monitor.is_banned(source_ip, now):
            return 403, json.dumps({"error": f"source {source_ip} is banned"}).encode()
        try:
            cert = self.ims.authenticate(client_id, password, now)
        except BadCredentials:
            return 401, AUTH_FAILED_BODY
        return 200, json.dumps(cert.to_dict(), separators=(",", ":")).encode("ascii")

    # admin

    def check_admin(self, token: Union[str, bytes]) -> None:
        if isinstance(token, str):
            token = token.encode("utf-8")
        if not hmac.compare_digest(token, self._admin_token):
            raise Unauthorized("bad admin token")

    def admin(self, verb: str, token: Union[str, bytes], now: float, **params: str) -> dict[str, Any]:
        self.check_admin(token)
        if verb == "status":
            return self.status(now)
        if verb == "restore-link":
            self.link.restore(token if isinstance(token, bytes) else token.encode("utf-8"), now)
            return self.status(now)
        if verb == "reload-rules":
            path = Path(params["path"]) if params.get("path") else self.rules_path
            if path is None:
                raise ValueError("no rules path configured")
            self.reload_rules(path)
            return {"rules": len(self.rules), "version": self.rules.version}
        raise KeyError(verb)

    def reload_rules(self, path: Union[str, Path]) -> None:
        # parse fully before swapping so a bad file leaves the old snapshot active
        rules = load_rules(path)
        self.rules = rules
        self.rules_path = Path(path)
        logger.info("loaded %d rules from %s", len(rules), path)

    def status(self, now: float) -> dict[str, Any]:
        state = self.link.state
        ids = self.monitor.status(now)
        return {
            "link": state.state.value,
            "since": state.since,
            "cause": state.cause.threat_class.value if state.cause else None,
            "cause_severity": state.cause.severity if state.cause else None,
            "bans": ids["bans"],
            "alerts": ids["alerts"],
            "requests": self.access_count,
        }

    # HTTP-level dispatch shared by the socket server and in-process targets

    def dispatch(
        self,
        method: str,
        path: str,
        headers: dict[str, str],
        body: bytes,
        source_ip: str,
        src_port: int,
        now: float,
    ) -> tuple[int, bytes]:
        if method != "POST":
            return 405, b'{"error":"method not allowed"}'
        if path == "/invoke":
            response = self.handle(body, source_ip, now, src_port)
            code = {Status.OK: 200, Status.DENIED: 403, Status.ERROR: 500}[response.status]
            return code, response.to_json()
        if path == "/auth":
            try:
                form = dict(parse_qsl(body.decode("utf-8"), keep_blank_values=True, strict_parsing=True))
            except (UnicodeDecodeError, ValueError):
                return 401, AUTH_FAILED_BODY
            return self.authenticate(form.get("client_id", ""), form.get("password", ""), source_ip, now)
        if path.startswith("/admin/"):
            verb = path[len("/admin/") :]
            token = headers.get("x-admin-token", "")
            try:
                params = dict(parse_qsl(body.decode("utf-8"), keep_blank_values=True))
                result = self.admin(verb, token, now, **params)
            except Unauthorized:
                return 401, b'{"error":"unauthorized"}'
            except KeyError:
                return 404, b'{"error":"unknown admin verb"}'
            except (RuleParseError, OSError, ValueError, UnicodeDecodeError) as exc:
                return 400, json.dumps({"error": str(exc)}).encode()
            return 200, json.dumps(result).encode()
        return 404, b'{"error":"not found"}'


def _denied(stage: str, verdict: Verdict) -> ServiceResponse:
    return ServiceResponse(Status.DENIED, stage, verdict.detail or verdict.threat_class.value, "", verdict.threat_class)


def _field(value: str) -> str:
    return quote(value, safe="@._-/:") or "-"


class _HTTPHandler(BaseHTTPRequestHandler):
    server: GatewayHTTPServer
    protocol_version = "HTTP/1.1"

    def do_POST(self) -> None:
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if not 0 <= length <= MAX_BODY:
            self._reply(413, b'{"error":"bad content length"}')
            return
        body = self.rfile.read(length)
        gw = self.server.gateway
        ip, port = self.client_address[:2]
        if self.server.trust_forwarded_for and self.headers.get("X-Forwarded-For"):
            ip = self.headers["X-Forwarded-For"].split(",")[0].strip()
        now = time.time()
        if self.server.sim_clock and self.headers.get("X-Sim-Time"):
            try:
                now = float(self.headers["X-Sim-Time"])
            except ValueError:
                self._reply(400, b'{"error":"bad X-Sim-Time"}')
                return
        headers = {k.lower(): v for k, v in self.headers.items()}
        code, payload = gw.dispatch("POST", self.path, headers, body, ip, port, now)
        self._reply(code, payload)

    def do_GET(self) -> None:
        self._reply(405, b'{"error":"method not allowed"}')

    def _reply(self, code: int, payload: bytes) -> None:
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, format: str, *args: Any) -> None:
        logger.debug("%s %s", self.address_string(), format % args)


class GatewayHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(
        self,
        gateway: Gateway,
        address: tuple[str, int],
        sim_clock: bool = False,
        trust_forwarded_for: bool = False,
    ):
        super().__init__(address, _HTTPHandler)
        self.gateway = gateway
        self.sim_clock = sim_clock
        self.trust_forwarded_for = trust_forwarded_for

    @property
    def url(self) -> str:
        host, port = self.server_address[:2]
        return f"http://{host}:{port}"
