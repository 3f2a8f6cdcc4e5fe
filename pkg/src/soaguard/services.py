"""Mock e-commerce business service components reachable through the gateway."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping
from urllib.parse import parse_qsl

from .store import NotFound

__all__ = [
    "BusinessServiceComponent",
    "CallContext",
    "ScopedStore",
    "ServiceError",
    "builtin_components",
]


class ServiceError(Exception):
    """Bad parameters or a business rule violation; reported at stage ``service``."""


Handler = Callable[["CallContext"], str]


@dataclass(frozen=True)
class BusinessServiceComponent:
    name: str
    actions: Mapping[str, Handler]
    # callable by other components, never exposed through the registry
    internal: Mapping[str, Callable[..., Any]] = field(default_factory=dict)

    @property
    def namespace(self) -> str:
        return f"svc/{self.name}/"


class ScopedStore:
    """Store view confined to one component's ``svc/<name>/`` key prefix."""

    def __init__(self, namespace: str, data, guard: Callable[..., Any]):
        self.namespace = namespace
        self._data = data
        self._guard = guard
        self.touched = False

    def _key(self, suffix: str) -> str:
        key = self.namespace + suffix
        if not suffix or ".." in suffix.split("/"):
            raise ServiceError(f"bad record key {suffix!r}")
        return key

    def get(self, suffix: str) -> bytes:
        self.touched = True
        return self._guard(self._data.get, self._key(suffix))

    def put(self, suffix: str, value: bytes) -> None:
        self.touched = True
        self._guard(self._data.put, self._key(suffix), value)

    def delete(self, suffix: str) -> None:
        self.touched = True
        self._guard(self._data.delete, self._key(suffix))


@dataclass
class CallContext:
    client_id: str
    payload: str
    nonce: str
    store: ScopedStore
    call: Callable[..., Any]

    @property
    def params(self) -> dict[str, str]:
        return dict(parse_qsl(self.payload, keep_blank_values=True))

    def int_param(self, name: str, minimum: int = 0, maximum: int = 10**12) -> int:
        raw = self.params.get(name)
        if raw is None:
            raise ServiceError(f"missing parameter {name!r}")
        try:
            value = int(raw)
        except ValueError:
            raise ServiceError(f"parameter {name!r} must be an integer") from None
        if not minimum <= value <= maximum:
            raise ServiceError(f"parameter {name!r} out of range")
        return value


def _balance_key(client_id: str) -> str:
    return "balance/" + hashlib.sha256(client_id.encode("utf-8")).hexdigest()[:32]


def _read_balance(ctx: CallContext) -> int:
    try:
        return int(ctx.store.get(_balance_key(ctx.client_id)))
    except NotFound:
        return 0


def deposit(ctx: CallContext) -> str:
    amount = ctx.int_param("amount", minimum=1)
    new = _read_balance(ctx) + amount
    ctx.store.put(_balance_key(ctx.client_id), str(new).encode("ascii"))
    return str(new)


def balance(ctx: CallContext) -> str:
    return str(_read_balance(ctx))


def submit_order(ctx: CallContext) -> str:
    if not ctx.payload:
        raise ServiceError("empty order")
    order_id = hashlib.sha256(f"{ctx.client_id}|{ctx.nonce}".encode("utf-8")).hexdigest()[:16]
    record = json.dumps({"client_id": ctx.client_id, "order": ctx.payload}).encode("utf-8")
    ctx.store.put(f"orders/{order_id}", record)
    return f"order_id={order_id}"


def _lookup_order(store: ScopedStore, client_id: str, order_id: str) -> str:
    if not order_id.isalnum():
        raise ServiceError("bad order id")
    try:
        record = json.loads(store.get(f"orders/{order_id}"))
    except NotFound:
        raise ServiceError(f"no order {order_id}") from None
    if record["client_id"] != client_id:
        # other clients' orders are reported exactly like missing ones
        raise ServiceError(f"no order {order_id}")
    return record["order"]


def get_order(ctx: CallContext) -> str:
    order_id = ctx.params.get("order_id", "")
    return ctx.call("online_transaction", "lookup", client_id=ctx.client_id, order_id=order_id)


def quote(ctx: CallContext) -> str:
    value = ctx.int_param("declared_value")
    # 5 % premium, rounded half-up, in integer arithmetic
    return str((value * 5 + 50) // 100)


def builtin_components() -> list[BusinessServiceComponent]:
    return [
        BusinessServiceComponent("transaction_info", {"get": get_order}),
        BusinessServiceComponent(
            "online_transaction",
            {"submit": submit_order},
            internal={"lookup": _lookup_order},
        ),
        BusinessServiceComponent("banking", {"deposit": deposit, "balance": balance}),
        BusinessServiceComponent("insurance", {"quote": quote}),
    ]
