"""Create a self-contained deployment directory: keys, credentials, rules, config."""

from __future__ import annotations

import os
import secrets
import shutil
from pathlib import Path
from typing import Optional, Union

from .config import GatewayConfig
from .filters import default_registry_path, default_rules_path
from .ims import CredentialTable, PBKDF2_ITERATIONS

__all__ = ["init_deployment"]


def _write_secret(path: Path, data: bytes) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)


def init_deployment(
    directory: Union[str, Path],
    users: Optional[dict[str, str]] = None,
    pbkdf2_iterations: int = PBKDF2_ITERATIONS,
    sim_clock: bool = False,
    listen: str = "127.0.0.1:8080",
    store_profile: str = "single-process",
    store_address: str = "127.0.0.1:8090",
    with_rules: bool = True,
) -> Path:
    """Populate ``directory`` and return the path of its ``gateway.conf``.

    The harness account gets a random password written to ``harness.password``.
    Server-1 secrets live under ``server1/``; Server 2 only gets ``server2/store.bin``.
    """
    root = Path(directory)
    s1 = root / "server1"
    s2 = root / "server2"
    logs = root / "logs"
    for d in (s1, s2, logs):
        d.mkdir(parents=True, exist_ok=True)

    _write_secret(s1 / "ims.key", secrets.token_bytes(32))
    _write_secret(s1 / "data.key", secrets.token_bytes(32))
    _write_secret(s1 / "admin.token", secrets.token_urlsafe(24).encode("ascii") + b"\n")

    harness_password = secrets.token_urlsafe(18)
    _write_secret(root / "harness.password", harness_password.encode("ascii") + b"\n")
    table = CredentialTable(iterations=pbkdf2_iterations)
    table.add_user("harness", harness_password)
    for client_id, password in (users or {}).items():
        table.add_user(client_id, password)
    table.save(s1 / "credentials")

    shutil.copyfile(default_registry_path(), s1 / "services.registry")
    if with_rules:
        shutil.copyfile(default_rules_path(), s1 / "default.rules")

    cfg = GatewayConfig(
        listen=listen,
        registry_path=Path("server1/services.registry"),
        rules_path=Path("server1/default.rules") if with_rules else None,
        ims_key_file=Path("server1/ims.key"),
        credentials_file=Path("server1/credentials"),
        pbkdf2_iterations=pbkdf2_iterations,
        data_key_file=Path("server1/data.key"),
        store_path=Path("server2/store.bin"),
        store_profile=store_profile,
        store_address=store_address,
        admin_token_file=Path("server1/admin.token"),
        alert_log_path=Path("logs/alert.log"),
        access_log_path=Path("logs/access.log"),
        sim_clock=sim_clock,
        trust_forwarded_for=sim_clock,
        harness_client_id="harness",
        harness_password_file=Path("harness.password"),
    )
    conf = root / "gateway.conf"
    conf.write_text("# generated by soaguard init\n" + cfg.dump(), encoding="utf-8")
    return conf
