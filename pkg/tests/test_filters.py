from __future__ import annotations

import logging
import random
from importlib import resources
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soaguard.envelope import ServiceRequest, ThreatClass
from soaguard.filters import (
    Rule,
    RuleParseError,
    RuleSet,
    ServiceRegistry,
    check_registry,
    default_registry_path,
    default_rules_path,
    load_registry,
    load_rules,
    match_payload,
    sanitize,
)

CORPORA = {
    "xss": ThreatClass.XSS,
    "lfi": ThreatClass.LFI,
    "rfi": ThreatClass.RFI,
    "injection": ThreatClass.INJECTION,
}


def corpus(name: str) -> list[str]:
    text = (resources.files("soaguard") / "data" / "corpus" / f"{name}.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line]


def req(payload: str = "", service: str = "banking", action: str = "deposit") -> ServiceRequest:
    return ServiceRequest("alice", "10.0.0.1", service, action, payload, None, "0" * 32, 0)


@pytest.fixture(scope="module")
def rules() -> RuleSet:
    return load_rules(default_rules_path())


@pytest.fixture(scope="module")
def registry() -> ServiceRegistry:
    return load_registry(default_registry_path())


def test_three_rule_file(tmp_path):
    path = tmp_path / "r.rules"
    path.write_text(
        "# version: 7\n"
        "RULE A XSS 2 <script\n"
        "\n"
        "RULE B LFI 2 \\.\\./\n"
        "RULE C injection 3 union\\s+select\n"
    )
    rs = load_rules(path)
    assert [r.id for r in rs] == ["A", "B", "C"]
    assert rs.version == "7"
    assert rs.rules[2].threat_class is ThreatClass.INJECTION


@pytest.mark.parametrize(
    "text,line,reason",
    [
        ("RULE A XSS 2 x\nRULE A XSS 2 y\n", 2, "duplicate"),
        ("RULE A FOO 2 x\n", 1, "unknown threat class"),
        ("RULE A XSS 9 x\n", 1, "severity"),
        ("RULE A XSS 2 (\n", 1, "invalid pattern"),
        ("\nRULE A XSS\n", 2, "expected"),
    ],
)
def test_rule_parse_errors(tmp_path, text, line, reason):
    path = tmp_path / "bad.rules"
    path.write_text(text)
    with pytest.raises(RuleParseError) as exc:
        load_rules(path)
    assert exc.value.line == line
    assert reason in exc.value.reason


def test_empty_rule_file_warns(tmp_path, caplog):
    path = tmp_path / "empty.rules"
    path.write_text("# nothing here\n")
    with caplog.at_level(logging.WARNING, logger="soaguard.filters"):
        assert len(load_rules(path)) == 0
    assert "holds no rules" in caplog.text


def test_registry_lookup_is_normalized(registry):
    assert check_registry(req(service=" Banking ", action="DEPOSIT"), registry).allowed
    v = check_registry(req(service="banking", action="withdraw"), registry)
    assert v.threat_class is ThreatClass.UNKNOWN_SERVICE and "no action" in v.detail
    v = check_registry(req(service="payroll", action="run"), registry)
    assert v.threat_class is ThreatClass.UNKNOWN_SERVICE and "no service" in v.detail


def test_registry_file_errors(tmp_path):
    path = tmp_path / "reg"
    path.write_text("SERVICE lonely\n")
    with pytest.raises(ValueError, match=":1:"):
        load_registry(path)


def test_registry_is_immutable_snapshot(registry):
    grown = registry.with_service("payroll", ["run"])
    assert "payroll" in grown and "payroll" not in registry


@pytest.mark.parametrize("name", sorted(CORPORA))
def test_attack_corpus_fully_classified(rules, name):
    payloads = corpus(name)
    assert len(payloads) >= 20
    for p in payloads:
        v = match_payload(req(p), rules)
        assert v.threat_class is CORPORA[name], p


def test_benign_corpus_passes(rules):
    phrases = corpus("benign")
    assert len(phrases) == 200
    flagged = [p for p in phrases if not match_payload(req(p), rules).allowed]
    assert flagged == []


def test_action_field_is_also_scanned(rules):
    v = match_payload(req("amount=1", action="../../etc/passwd"), rules)
    assert v.threat_class is ThreatClass.LFI


def test_percent_encoding_decoded_once(rules):
    assert match_payload(req("q=%3Cscript%3Ealert(1)%3C/script%3E"), rules).threat_class is ThreatClass.XSS
    assert match_payload(req("x=UNION+SELECT+password+FROM+users"), rules).threat_class is ThreatClass.INJECTION


def test_registry_checked_before_rules(registry, rules):
    v = sanitize(req("<script>", service="nope"), registry, rules)
    assert v.threat_class is ThreatClass.UNKNOWN_SERVICE


def test_first_match_wins_in_file_order():
    a = Rule("A", ThreatClass.XSS, 2, "evil")
    b = Rule("B", ThreatClass.LFI, 2, "evil")
    assert match_payload(req("evil"), RuleSet((a, b))).threat_class is ThreatClass.XSS
    assert match_payload(req("evil"), RuleSet((b, a))).threat_class is ThreatClass.LFI


def test_duplicate_ids_rejected_in_ruleset():
    with pytest.raises(ValueError):
        RuleSet((Rule("A", ThreatClass.XSS, 2, "x"), Rule("A", ThreatClass.XSS, 2, "y")))


@settings(max_examples=60)
@given(st.randoms(use_true_random=False))
def test_allow_decision_independent_of_rule_order(rng):
    """Reordering rules may change which class is reported, never whether a payload is denied."""
    base = list(load_rules(default_rules_path()))
    shuffled = base[:]
    rng.shuffle(shuffled)
    payloads = corpus("xss")[:5] + corpus("benign")[:20] + corpus("injection")[:5]
    for p in payloads:
        assert match_payload(req(p), RuleSet(tuple(base))).allowed == match_payload(req(p), RuleSet(tuple(shuffled))).allowed


@settings(max_examples=60)
@given(st.integers(0, 15), st.text(max_size=60))
def test_adding_rules_never_allows_more(k, payload):
    base = list(load_rules(default_rules_path()))
    fewer = RuleSet(tuple(base[:k]))
    full = RuleSet(tuple(base))
    if not match_payload(req(payload), fewer).allowed:
        assert not match_payload(req(payload), full).allowed


def test_unknown_service_names_property(registry):
    rng = random.Random(5)
    alphabet = "abcdefghijklmnopqrstuvwxyz_"
    for _ in range(500):
        name = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 20)))
        if name in registry:
            continue
        assert check_registry(req(service=name, action="get"), registry).threat_class is ThreatClass.UNKNOWN_SERVICE


def test_default_files_are_packaged():
    assert Path(default_rules_path()).is_file()
    assert Path(default_registry_path()).is_file()
