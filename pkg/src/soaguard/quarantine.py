"""Firewall between Server 1 and Server 2.

All datastore traffic goes through :meth:`QuarantineLink.guarded_call`. The
link lock is held while a store call runs, so ``sever`` waits for at most the
call already being applied and every later call fails fast.
"""

from __future__ import annotations

import enum
import hmac
import logging
import threading
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional, TypeVar

from .ids import AlertEvent

__all__ = ["LinkSevered", "LinkState", "LinkStatus", "QuarantineLink", "Unauthorized"]

logger = logging.getLogger(__name__)

T = TypeVar("T")


class LinkStatus(str, enum.Enum):
    CONNECTED = "Connected"
    QUARANTINED = "Quarantined"


@dataclass(frozen=True)
class LinkState:
    state: LinkStatus
    since: float
    cause: Optional[AlertEvent] = None

    def __post_init__(self) -> None:
        if self.state is LinkStatus.QUARANTINED and self.cause is None:
            raise ValueError("a quarantined link must record its cause")


class LinkSevered(RuntimeError):
    def __init__(self, since: float, cause: Optional[AlertEvent]):
        what = cause.threat_class.value if cause else "unknown"
        super().__init__(f"store link severed since {since:g} ({what})")
        self.since = since
        self.cause = cause


class Unauthorized(PermissionError):
    pass


class QuarantineLink:
    def __init__(
        self,
        admin_token: bytes,
        escalate_k: int = 5,
        escalate_window: float = 30,
        now: float = 0.0,
    ):
        if escalate_k < 1:
            raise ValueError("escalate_k must be at least 1")
        self._admin_token = admin_token
        self.escalate_k = escalate_k
        self.escalate_window = escalate_window
        self._state = LinkState(LinkStatus.CONNECTED, now)
        self._sev2: deque[float] = deque()
        self._lock = threading.RLock()

    @property
    def state(self) -> LinkState:
        return self._state

    @property
    def connected(self) -> bool:
        return self._state.state is LinkStatus.CONNECTED

    def on_alert(self, event: AlertEvent, now: float) -> LinkState:
        with self._lock:
            if not self.connected:
                return self._state
            if event.severity >= 3:
                self.sever(event, now)
            elif event.severity == 2:
                self._sev2.append(now)
                while self._sev2 and self._sev2[0] <= now - self.escalate_window:
                    self._sev2.popleft()
                if len(self._sev2) >= self.escalate_k:
                    self.sever(event, now)
            return self._state

    def sever(self, cause: AlertEvent, now: float) -> None:
        with self._lock:
            if not self.connected:
                return
            self._state = LinkState(LinkStatus.QUARANTINED, max(now, self._state.since), cause)
            self._sev2.clear()
        logger.warning("store link severed: %s severity %d from %s", cause.threat_class.value, cause.severity, cause.src_ip)

    def restore(self, token: bytes, now: float) -> None:
        if isinstance(token, str):
            token = token.encode("utf-8")
        if not hmac.compare_digest(token, self._admin_token):
            raise Unauthorized("bad operator token")
        with self._lock:
            if self.connected:
                return
            self._state = LinkState(LinkStatus.CONNECTED, max(now, self._state.since))
        logger.info("store link restored")

    def guarded_call(self, op: Callable[..., T], *args: Any, **kwargs: Any) -> T:
        with self._lock:
            if not self.connected:
                raise LinkSevered(self._state.since, self._state.cause)
            return op(*args, **kwargs)
