"""Rate-based intrusion detection and prevention with Snort-style alert logs."""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional, Union

from .envelope import ThreatClass, Verdict

__all__ = [
    "AlertEvent",
    "AlertLog",
    "BanList",
    "IntrusionMonitor",
    "LogWriteError",
    "WindowCounter",
    "format_alert",
    "severity_for",
]

logger = logging.getLogger(__name__)

SEPARATOR = "*****"

_SEVERITY = {
    ThreatClass.FORGERY: 3,
    ThreatClass.INJECTION: 3,
    ThreatClass.RFI: 3,
    ThreatClass.XSS: 2,
    ThreatClass.LFI: 2,
    ThreatClass.REPLAY: 2,
    ThreatClass.RATE_FLOOD: 2,
    ThreatClass.UNKNOWN_SERVICE: 1,
    ThreatClass.EXPIRED: 1,
}


def severity_for(threat: ThreatClass) -> int:
    return _SEVERITY[threat]


class LogWriteError(OSError):
    """An alert could not be persisted."""


@dataclass(frozen=True)
class AlertEvent:
    timestamp: int  # Unix microseconds
    src_ip: str
    src_port: int
    dst_ip: str
    dst_port: int
    proto: str
    threat_class: ThreatClass
    severity: int

    def __post_init__(self) -> None:
        if not 1 <= self.severity <= 3:
            raise ValueError("severity must be 1..3")
        if self.proto not in ("TCP", "UDP", "HTTP"):
            raise ValueError(f"unsupported proto {self.proto!r}")


def format_alert(event: AlertEvent) -> str:
    """Render one alert record in the Snort console layout, separator included."""
    secs, micros = divmod(event.timestamp, 1_000_000)
    ts = datetime.fromtimestamp(secs, tz=timezone.utc)
    return (
        f"{ts:%m/%d-%H:%M:%S}.{micros:06d} "
        f"{event.src_ip}:{event.src_port} -> {event.dst_ip}:{event.dst_port}\n"
        f"{event.proto} CLASS:{event.threat_class.value} SEV:{event.severity}\n"
        f"{SEPARATOR}\n"
    )


class AlertLog:
    """Append-only alert file. With ``path=None`` alerts are only counted and kept in memory."""

    def __init__(self, path: Optional[Union[str, Path]] = None, keep: int = 10_000):
        self.path = Path(path) if path is not None else None
        self._recent: deque[AlertEvent] = deque(maxlen=keep)
        self._count = 0
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def count(self) -> int:
        return self._count

    @property
    def recent(self) -> list[AlertEvent]:
        return list(self._recent)

    def append(self, event: AlertEvent) -> None:
        record = format_alert(event)
        with self._lock:
            if self.path is not None:
                try:
                    with open(self.path, "a", encoding="ascii") as fh:
                        fh.write(record)
                        fh.flush()
                except OSError as exc:
                    raise LogWriteError(f"could not write alert to {self.path}: {exc}") from exc
            self._recent.append(event)
            self._count += 1


class WindowCounter:
    """Exact sliding-window counts over explicit timestamps.

    ``count(ip, now)`` is the number of recorded timestamps in ``(now - window, now]``.
    Timestamps must be recorded in non-decreasing order.
    """

    def __init__(self, window: float):
        if window <= 0:
            raise ValueError("window must be positive")
        self.window = window
        self._per_ip: dict[str, deque[float]] = {}
        self._all: deque[float] = deque()

    def _trim(self, ring: deque[float], now: float) -> None:
        cutoff = now - self.window
        while ring and ring[0] <= cutoff:
            ring.popleft()

    def record(self, ip: str, now: float) -> tuple[int, int]:
        ring = self._per_ip.setdefault(ip, deque())
        ring.append(now)
        self._all.append(now)
        self._trim(ring, now)
        self._trim(self._all, now)
        return len(ring), len(self._all)

    def count(self, ip: str, now: float) -> int:
        ring = self._per_ip.get(ip)
        if not ring:
            return 0
        return sum(1 for ts in ring if now - self.window < ts <= now)

    def global_count(self, now: float) -> int:
        return sum(1 for ts in self._all if now - self.window < ts <= now)

    def prune(self, now: float) -> None:
        for ip in list(self._per_ip):
            ring = self._per_ip[ip]
            self._trim(ring, now)
            if not ring:
                del self._per_ip[ip]


class BanList:
    def __init__(self) -> None:
        self._until: dict[str, float] = {}

    def ban(self, ip: str, until: float) -> None:
        # an active ban is never shortened
        self._until[ip] = max(until, self._until.get(ip, until))

    def is_banned(self, ip: str, now: float) -> bool:
        until = self._until.get(ip)
        return until is not None and now < until

    def active(self, now: float) -> int:
        return sum(1 for until in self._until.values() if now < until)

    def expiry(self, ip: str) -> Optional[float]:
        return self._until.get(ip)


class IntrusionMonitor:
    """Counts requests per source, bans flooders and raises alerts for every denial."""

    def __init__(
        self,
        window: float = 10,
        threshold: int = 50,
        ban_duration: float = 60,
        global_threshold: int = 500,
        alert_log: Optional[AlertLog] = None,
        sensor: tuple[str, int] = ("127.0.0.1", 8080),
    ):
        self.window = window
        self.threshold = threshold
        self.ban_duration = ban_duration
        self.global_threshold = global_threshold
        self.alert_log = alert_log if alert_log is not None else AlertLog()
        self.sensor = sensor
        self.counter = WindowCounter(window)
        self.bans = BanList()
        self._listeners: list[Callable[[AlertEvent, float], None]] = []
        self._lock = threading.Lock()

    def subscribe(self, listener: Callable[[AlertEvent, float], None]) -> None:
        self._listeners.append(listener)

    def is_banned(self, ip: str, now: float) -> bool:
        with self._lock:
            return self.bans.is_banned(ip, now)

    def observe(self, ip: str, now: float, src_port: int = 0) -> Verdict:
        with self._lock:
            per_ip, total = self.counter.record(ip, now)
            if per_ip > self.threshold:
                self.bans.ban(ip, now + self.ban_duration)
                verdict = Verdict.deny(
                    ThreatClass.RATE_FLOOD,
                    f"{per_ip} requests from {ip} within {self.window:g}s; banned until {now + self.ban_duration:g}",
                )
                severity = 2
            elif total > self.global_threshold:
                verdict = Verdict.deny(
                    ThreatClass.RATE_FLOOD,
                    f"{total} requests from all sources within {self.window:g}s",
                )
                severity = 3
            else:
                return Verdict.allow()
        self._emit(ip, src_port, ThreatClass.RATE_FLOOD, severity, now)
        return verdict

    def report(self, verdict: Verdict, src_ip: str, now: float, src_port: int = 0, proto: str = "HTTP") -> AlertEvent:
        if verdict.threat_class is None:
            raise ValueError("only Deny verdicts are reported")
        threat = verdict.threat_class
        return self._emit(src_ip, src_port, threat, severity_for(threat), now, proto)

    def _emit(
        self, src_ip: str, src_port: int, threat: ThreatClass, severity: int, now: float, proto: str = "HTTP"
    ) -> AlertEvent:
        event = AlertEvent(
            timestamp=round(now * 1_000_000),
            src_ip=src_ip,
            src_port=src_port,
            dst_ip=self.sensor[0],
            dst_port=self.sensor[1],
            proto=proto,
            threat_class=threat,
            severity=severity,
        )
        self.alert_log.append(event)
        logger.debug("alert %s sev %d from %s", threat.value, severity, src_ip)
        for listener in self._listeners:
            listener(event, now)
        return event

    def status(self, now: float) -> dict[str, int]:
        with self._lock:
            return {"bans": self.bans.active(now), "alerts": self.alert_log.count}
