"""Input sanitization: service-registry check followed by the rule plug-in."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Union
from urllib.parse import unquote_plus

from .envelope import ServiceRequest, ThreatClass, Verdict

__all__ = [
    "Rule",
    "RuleParseError",
    "RuleSet",
    "ServiceRegistry",
    "check_registry",
    "default_registry_path",
    "default_rules_path",
    "load_registry",
    "load_rules",
    "match_payload",
    "sanitize",
]

logger = logging.getLogger(__name__)

_RULE_CLASSES = {
    "XSS": ThreatClass.XSS,
    "RFI": ThreatClass.RFI,
    "LFI": ThreatClass.LFI,
    "INJECTION": ThreatClass.INJECTION,
}


class RuleParseError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class Rule:
    id: str
    threat_class: ThreatClass
    severity: int
    pattern: str
    regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.threat_class not in _RULE_CLASSES.values():
            raise ValueError(f"rule threat class must be one of {sorted(_RULE_CLASSES)}")
        if type(self.severity) is not int or not 1 <= self.severity <= 3:
            raise ValueError("severity must be an integer in 1..3")
        object.__setattr__(self, "regex", re.compile(self.pattern, re.IGNORECASE))


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...] = ()
    version: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "rules", tuple(self.rules))
        seen: set[str] = set()
        for rule in self.rules:
            if rule.id in seen:
                raise ValueError(f"duplicate rule id {rule.id!r}")
            seen.add(rule.id)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)


def _norm(name: str) -> str:
    return name.strip().lower()


class ServiceRegistry:
    """Immutable service → actions snapshot. Lookups lowercase and trim both sides."""

    def __init__(self, services: Mapping[str, Iterable[str]] = ()):
        items = services.items() if isinstance(services, Mapping) else services
        self._services: dict[str, frozenset[str]] = {}
        for name, actions in items:
            key = _norm(name)
            self._services[key] = self._services.get(key, frozenset()) | frozenset(_norm(a) for a in actions)

    @property
    def services(self) -> dict[str, frozenset[str]]:
        return dict(self._services)

    def __contains__(self, name: str) -> bool:
        return _norm(name) in self._services

    def __len__(self) -> int:
        return len(self._services)

    def allows(self, service: str, action: str) -> bool:
        actions = self._services.get(_norm(service))
        return actions is not None and _norm(action) in actions

    def with_service(self, name: str, actions: Iterable[str]) -> ServiceRegistry:
        merged = {k: set(v) for k, v in self._services.items()}
        merged.setdefault(_norm(name), set()).update(_norm(a) for a in actions)
        return ServiceRegistry(merged)


def load_rules(path: Union[str, Path]) -> RuleSet:
    """Parse a rule file: ``RULE <id> <XSS|RFI|LFI|INJECTION> <severity> <pattern...>``."""
    text = Path(path).read_text(encoding="utf-8")
    rules: list[Rule] = []
    seen: dict[str, int] = {}
    version = ""
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            m = re.match(r"#\s*version\s*[:=]\s*(\S+)", line, re.IGNORECASE)
            if m and not version:
                version = m.group(1)
            continue
        parts = line.split(None, 4)
        if len(parts) < 5 or parts[0] != "RULE":
            raise RuleParseError(lineno, "expected 'RULE <id> <class> <severity> <pattern>'")
        _, rule_id, cls_name, sev_text, pattern = parts
        if rule_id in seen:
            raise RuleParseError(lineno, f"duplicate rule id {rule_id!r} (first defined on line {seen[rule_id]})")
        threat = _RULE_CLASSES.get(cls_name.upper())
        if threat is None:
            raise RuleParseError(lineno, f"unknown threat class {cls_name!r}")
        if not sev_text.isdigit() or not 1 <= int(sev_text) <= 3:
            raise RuleParseError(lineno, f"severity must be 1-3, got {sev_text!r}")
        try:
            rule = Rule(rule_id, threat, int(sev_text), pattern)
        except re.error as exc:
            raise RuleParseError(lineno, f"invalid pattern: {exc}") from None
        seen[rule_id] = lineno
        rules.append(rule)
    if not rules:
        logger.warning("rule file %s holds no rules; only the registry check will run", path)
    return RuleSet(tuple(rules), version)


def load_registry(path: Union[str, Path]) -> ServiceRegistry:
    """Parse a registry file: ``SERVICE <name> <action> [<action>...]``."""
    services: dict[str, set[str]] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] != "SERVICE" or len(parts) < 3:
            raise ValueError(f"{path}:{lineno}: expected 'SERVICE <name> <action> [<action>...]'")
        services.setdefault(parts[1], set()).update(parts[2:])
    return ServiceRegistry(services)


def default_rules_path() -> Path:
    return Path(str(resources.files("soaguard") / "data" / "default.rules"))


def default_registry_path() -> Path:
    return Path(str(resources.files("soaguard") / "data" / "default.registry"))


def check_registry(request: ServiceRequest, registry: ServiceRegistry) -> Verdict:
    if request.service not in registry:
        return Verdict.deny(ThreatClass.UNKNOWN_SERVICE, f"no service named {request.service!r}")
    if not registry.allows(request.service, request.action):
        return Verdict.deny(
            ThreatClass.UNKNOWN_SERVICE, f"service {request.service!r} has no action {request.action!r}"
        )
    return Verdict.allow()


def match_payload(request: ServiceRequest, rules: RuleSet) -> Verdict:
    """First matching rule, in file order, decides. Subjects are percent-decoded once."""
    subjects = (unquote_plus(request.payload), unquote_plus(request.action))
    for rule in rules.rules:
        for subject in subjects:
            if rule.regex.search(subject):
                return Verdict.deny(rule.threat_class, f"rule {rule.id} matched")
    return Verdict.allow()


def sanitize(request: ServiceRequest, registry: ServiceRegistry, rules: RuleSet) -> Verdict:
    verdict = check_registry(request, registry)
    if not verdict.allowed:
        return verdict
    return match_payload(request, rules)
