from __future__ import annotations

import os
import random
from pathlib import Path

import pytest

from soaguard.config import GatewayConfig
from soaguard.deploy import init_deployment
from soaguard.envelope import AuthCertificate, ServiceRequest, encode
from soaguard.gateway import Gateway

T0 = 1_700_000_000.0
FAST_KDF = 1_000


@pytest.fixture
def deployment(tmp_path: Path) -> GatewayConfig:
    conf = init_deployment(tmp_path / "deploy", users={"alice": "correct horse"}, pbkdf2_iterations=FAST_KDF)
    return GatewayConfig.load(conf)


@pytest.fixture
def gateway(deployment: GatewayConfig):
    gw = Gateway.from_config(deployment, now=T0)
    yield gw
    gw.close()


class Client:
    """Test-side helper that builds valid envelopes for one account."""

    def __init__(self, gw: Gateway, client_id: str = "alice", password: str = "correct horse", now: float = T0):
        self.gw = gw
        self.client_id = client_id
        self.cert: AuthCertificate = gw.ims.authenticate(client_id, password, now)
        self.rng = random.Random(7)

    def envelope(
        self,
        service: str,
        action: str,
        payload: str = "",
        now: float = T0,
        ip: str = "192.0.2.10",
        cert: AuthCertificate | None = None,
        client_id: str | None = None,
        nonce: str | None = None,
    ) -> bytes:
        return encode(
            ServiceRequest(
                client_id=client_id or self.client_id,
                source_ip=ip,
                service=service,
                action=action,
                payload=payload,
                certificate=cert if cert is not None else self.cert,
                nonce=nonce or os.urandom(16).hex(),
                timestamp=int(now),
            )
        )

    def call(self, service: str, action: str, payload: str = "", now: float = T0, ip: str = "192.0.2.10", **kw):
        return self.gw.handle(self.envelope(service, action, payload, now, ip, **kw), ip, now)


@pytest.fixture
def client(gateway: Gateway) -> Client:
    return Client(gateway)


def alert_records(path: Path) -> int:
    if not path.exists():
        return 0
    return path.read_text().count("*****\n")
