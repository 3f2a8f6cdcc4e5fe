"""``key=value`` gateway configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional, Union

__all__ = ["ConfigError", "GatewayConfig", "parse_kv"]


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


# config key -> (attribute, type)
_KEYS: dict[str, tuple[str, type]] = {
    "listen": ("listen", str),
    "registry.path": ("registry_path", Path),
    "rules.path": ("rules_path", Path),
    "ims.key_file": ("ims_key_file", Path),
    "ims.credentials_file": ("credentials_file", Path),
    "ims.ttl_s": ("ims_ttl_s", int),
    "ims.pbkdf2_iterations": ("pbkdf2_iterations", int),
    "store.key_file": ("data_key_file", Path),
    "store.key_id": ("data_key_id", str),
    "store.path": ("store_path", Path),
    "store.profile": ("store_profile", str),
    "store.address": ("store_address", str),
    "store.durable": ("store_durable", bool),
    "ids.window_s": ("ids_window_s", float),
    "ids.threshold": ("ids_threshold", int),
    "ids.ban_s": ("ids_ban_s", float),
    "ids.global_threshold": ("ids_global_threshold", int),
    "quarantine.escalate_k": ("escalate_k", int),
    "quarantine.escalate_window_s": ("escalate_window_s", float),
    "admin.token_file": ("admin_token_file", Path),
    "alert_log.path": ("alert_log_path", Path),
    "access_log.path": ("access_log_path", Path),
    "sim_clock": ("sim_clock", bool),
    "trust_forwarded_for": ("trust_forwarded_for", bool),
    "harness.client_id": ("harness_client_id", str),
    "harness.password_file": ("harness_password_file", Path),
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class GatewayConfig:
    listen: str = "127.0.0.1:8080"
    registry_path: Optional[Path] = None
    rules_path: Optional[Path] = None
    ims_key_file: Optional[Path] = None
    credentials_file: Optional[Path] = None
    ims_ttl_s: int = 300
    pbkdf2_iterations: int = 100_000
    data_key_file: Optional[Path] = None
    data_key_id: str = "dk1"
    store_path: Optional[Path] = None
    store_profile: str = "single-process"
    store_address: str = "127.0.0.1:8090"
    store_durable: bool = True
    ids_window_s: float = 10
    ids_threshold: int = 50
    ids_ban_s: float = 60
    ids_global_threshold: int = 500
    escalate_k: int = 5
    escalate_window_s: float = 30
    admin_token_file: Optional[Path] = None
    alert_log_path: Optional[Path] = None
    access_log_path: Optional[Path] = None
    sim_clock: bool = False
    trust_forwarded_for: bool = False
    harness_client_id: str = "harness"
    harness_password_file: Optional[Path] = None
    source: Optional[Path] = None

    @classmethod
    def from_mapping(cls, values: dict[str, str], base_dir: Optional[Path] = None) -> GatewayConfig:
        kwargs: dict[str, Any] = {}
        for key, text in values.items():
            if key not in _KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            attr, typ = _KEYS[key]
            kwargs[attr] = _convert(key, text, typ, base_dir)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path]) -> GatewayConfig:
        path = Path(path)
        cfg = cls.from_mapping(parse_kv(path.read_text(encoding="utf-8"), str(path)), path.parent)
        cfg.source = path
        return cfg

    def replace(self, **changes: Any) -> GatewayConfig:
        return dataclasses.replace(self, **changes)

    def validate(self) -> None:
        if self.store_profile not in ("single-process", "two-process"):
            raise ConfigError("store.profile must be single-process or two-process")
        for name in ("ids_window_s", "ids_ban_s", "escalate_window_s", "ims_ttl_s"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("ids_threshold", "ids_global_threshold", "escalate_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")

    def dump(self) -> str:
        lines = []
        for key, (attr, typ) in _KEYS.items():
            value = getattr(self, attr)
            if value is None:
                continue
            if typ is bool:
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def _convert(key: str, text: str, typ: type, base_dir: Optional[Path]) -> Any:
    if typ is Path:
        if not text:
            return None
        p = Path(text).expanduser()
        return p if p.is_absolute() or base_dir is None else base_dir / p
    if typ is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {text!r}") from None
