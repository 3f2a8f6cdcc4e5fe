"""Acceptance suite. Each test prints one PASS/FAIL line and asserts the same outcome.

Everything runs in the single-process profile on a simulated clock.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import random
import string
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import pytest

from conftest import FAST_KDF, T0, Client, alert_records
from oracles import brute_window_count, reference_rate_trace
from soaguard.config import GatewayConfig
from soaguard.deploy import init_deployment
from soaguard.envelope import AuthCertificate, ServiceRequest, Status, ThreatClass, encode
from soaguard.filters import load_registry
from soaguard.gateway import Gateway
from soaguard.harness.cli import main as harness_main
from soaguard.ids import AlertEvent, IntrusionMonitor, WindowCounter, format_alert
from soaguard.ims import CredentialTable, IdentityService
from soaguard.quarantine import LinkStatus
from soaguard.store import DataKey, DecryptionFailure, RecordFile, SecureStore, scan_plaintext


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number:>2} {title}: {detail}")
        assert ok, detail

    return emit


def corpus(name: str) -> list[str]:
    text = (resources.files("soaguard") / "data" / "corpus" / f"{name}.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line]


def ip_for(i: int) -> str:
    return f"172.16.{i // 250}.{i % 250 + 1}"


def fresh_gateway(tmp_path: Path, name: str, **deploy) -> tuple[Gateway, GatewayConfig]:
    conf = init_deployment(tmp_path / name, users={"alice": "correct horse"}, pbkdf2_iterations=FAST_KDF, **deploy)
    cfg = GatewayConfig.load(conf)
    return Gateway.from_config(cfg, now=T0), cfg


# 1. forgery


def _tamper(rng: random.Random, genuine: list[AuthCertificate], now: int) -> AuthCertificate:
    cert = rng.choice(genuine)
    kind = rng.randrange(6)
    if kind == 0:
        return dataclasses.replace(cert, subject=rng.choice(["bob", "admin", cert.subject + "x", cert.subject.upper()]))
    if kind == 1:
        return dataclasses.replace(cert, expires_at=cert.expires_at + rng.randint(1, 10**7))
    if kind == 2:
        return dataclasses.replace(cert, issued_at=cert.issued_at - rng.randint(1, 10**4))
    if kind == 3:
        return dataclasses.replace(cert, cert_id=os.urandom(16).hex())
    if kind == 4:
        # splice: fields of one genuine certificate, tag of another
        other = rng.choice(genuine)
        if other.tag == cert.tag:
            return dataclasses.replace(cert, tag=os.urandom(32).hex())
        return dataclasses.replace(cert, tag=other.tag)
    # attacker-minted: plausible fields, guessed tag
    return AuthCertificate("alice", now - 10, now + 290, os.urandom(16).hex(), os.urandom(32).hex())


def test_c01_forgery_rejection(verdict):
    table = CredentialTable(iterations=FAST_KDF)
    table.add_user("alice", "correct horse")
    table.add_user("bob", "pw")
    ims = IdentityService(os.urandom(32), table)
    rng = random.Random(101)
    now = int(T0)
    genuine = [ims.authenticate("alice", "correct horse", now - i) for i in range(25)]
    genuine += [ims.authenticate("bob", "pw", now - i) for i in range(25)]
    assert all(ims.verify_certificate(c, now).allowed for c in genuine)

    known = set(genuine)
    accepted = 0
    for _ in range(10_000):
        forged = _tamper(rng, genuine, now)
        while forged in known:  # an edit that reproduces a genuine certificate is not a forgery
            forged = _tamper(rng, genuine, now)
        accepted += ims.verify_certificate(forged, now).allowed

    cert = genuine[0]
    mutations = 0
    accepted_mut = 0
    for pos in range(64):
        for ch in "0123456789abcdef":
            if ch != cert.tag[pos]:
                mutations += 1
                accepted_mut += ims.verify_certificate(dataclasses.replace(cert, tag=cert.tag[:pos] + ch + cert.tag[pos + 1:]), now).allowed
    ok = accepted == 0 and accepted_mut == 0
    verdict(1, "forgery", ok, f"{accepted}/10000 tamperings accepted, {accepted_mut}/{mutations} single-hex tag mutations accepted")


# 2. replay


def test_c02_replay_rejection(tmp_path, verdict):
    gw, _ = fresh_gateway(tmp_path, "replay")
    rng = random.Random(202)
    events = []
    for i in range(1000):
        t0 = T0 + i * 0.25
        cert = gw.ims.authenticate("alice", "correct horse", t0)
        raw = encode(ServiceRequest("alice", ip_for(i), "insurance", "quote", f"declared_value={i}", cert,
                                    os.urandom(16).hex(), int(t0)))
        delay = rng.uniform(0, 299)  # certificate still valid, well inside the 600 s horizon
        events.append((t0, 0, i, raw))
        events.append((t0 + delay, 1, i, raw))
    events.sort(key=lambda e: (e[0], e[1]))
    originals_ok = 0
    replays_accepted = 0
    replays_denied = 0
    for t, is_replay, i, raw in events:
        resp = gw.handle(raw, ip_for(i), t)
        if is_replay:
            if resp.status is Status.DENIED and resp.threat_class is ThreatClass.REPLAY:
                replays_denied += 1
            else:
                replays_accepted += resp.status is Status.OK
        else:
            originals_ok += resp.status is Status.OK
    gw.close()
    ok = replays_accepted == 0 and replays_denied == 1000 and originals_ok == 1000
    verdict(2, "replay", ok, f"{replays_denied}/1000 replays Denied(Replay), {replays_accepted} accepted, {originals_ok}/1000 originals Ok")


# 3. sanitization


EXPECTED_CLASS = {"xss": ThreatClass.XSS, "lfi": ThreatClass.LFI, "rfi": ThreatClass.RFI, "injection": ThreatClass.INJECTION}
MIN_SIZE = {"xss": 30, "lfi": 20, "rfi": 20, "injection": 20}


def test_c03_sanitization(tmp_path, verdict):
    gw, _ = fresh_gateway(tmp_path, "sanitize")
    client = Client(gw)
    n = 0
    misses = []
    sizes = {}
    for name, cls in EXPECTED_CLASS.items():
        payloads = corpus(name)
        sizes[name] = len(payloads)
        for p in payloads:
            now = T0 + n * 0.05
            resp = client.call("online_transaction", "submit", p, now=now, ip=ip_for(n))
            n += 1
            if (resp.status, resp.stage, resp.threat_class) != (Status.DENIED, "sanitize", cls):
                misses.append((name, p, resp.stage, resp.threat_class))
    gw.close()

    gw, _ = fresh_gateway(tmp_path, "benign")
    client = Client(gw)
    benign = corpus("benign")
    denied = [p for i, p in enumerate(benign)
              if client.call("online_transaction", "submit", p, now=T0 + i * 0.05, ip=ip_for(i)).status is Status.DENIED]
    gw.close()
    big_enough = all(sizes[k] >= MIN_SIZE[k] for k in MIN_SIZE) and len(benign) == 200
    ok = not misses and not denied and big_enough
    sizes_text = ", ".join(f"{k}={v}" for k, v in sizes.items())
    verdict(3, "sanitization", ok,
            f"{n - len(misses)}/{n} attack payloads Denied at sanitize with the right class ({sizes_text}); "
            f"{len(denied)}/{len(benign)} benign Denied")


# 4. registry


def test_c04_registry_rule(tmp_path, verdict):
    gw, _ = fresh_gateway(tmp_path, "registry")
    client = Client(gw)
    registry = gw.registry
    rng = random.Random(404)
    alphabet = string.ascii_letters + string.digits + "_-."
    trials = wrong = 0
    for i in range(2000):
        service = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 24)))
        if i % 2:
            # a registered service with an action it does not offer
            service = rng.choice(sorted(registry.services))
            action = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 24)))
            if registry.allows(service, action):
                continue
        else:
            if service in registry:
                continue
            action = rng.choice(["get", "submit", "deposit", "quote", "run"])
        trials += 1
        resp = client.call(service, action, "x=1", now=T0 + i * 0.05, ip=ip_for(i))
        wrong += (resp.status, resp.threat_class) != (Status.DENIED, ThreatClass.UNKNOWN_SERVICE)
    gw.close()
    verdict(4, "registry", wrong == 0 and trials > 1500, f"{trials - wrong}/{trials} unregistered requests Denied(UnknownService)")


# 5. DoS banning


def random_trace(rng: random.Random) -> list[tuple[str, float]]:
    ips = [f"10.9.0.{i}" for i in range(rng.randint(1, 4))]
    t = 0.0
    out = []
    for _ in range(rng.randint(1, 200)):
        t += rng.choice([0.0, 0.01, 0.05, 0.1, 0.2, 1.0, 5.0, 30.0])
        out.append((rng.choice(ips), round(t, 3)))
    return out


def test_c05_dos_banning(tmp_path, verdict):
    gw, _ = fresh_gateway(tmp_path, "dos")
    client = Client(gw)
    ip = "198.51.100.7"
    first = [client.call("insurance", "quote", "declared_value=1", now=T0 + i * 0.1, ip=ip) for i in range(50)]
    t = T0 + 5.0
    r51 = client.call("insurance", "quote", "declared_value=1", now=t, ip=ip)
    at59 = client.call("insurance", "quote", "declared_value=1", now=t + 59, ip=ip)
    at60 = client.call("insurance", "quote", "declared_value=1", now=t + 60, ip=ip)
    gw.close()
    boundary_ok = (
        all(r.status is Status.OK for r in first)
        and (r51.status, r51.threat_class) == (Status.DENIED, ThreatClass.RATE_FLOOD)
        and (at59.stage, at59.threat_class) == ("ban-check", ThreatClass.RATE_FLOOD)
        and at60.status is Status.OK
    )

    rng = random.Random(505)
    mismatches = 0
    for _ in range(1000):
        trace = random_trace(rng)
        counter = WindowCounter(10)
        history = []
        for who, ts in trace:
            per_ip, total = counter.record(who, ts)
            history.append((who, ts))
            if per_ip != brute_window_count(history, who, ts, 10) or total != sum(1 for _, s in history if ts - 10 < s <= ts):
                mismatches += 1
                break
        mon = IntrusionMonitor(window=10, threshold=50, ban_duration=60, global_threshold=500)
        got = []
        for who, ts in trace:
            if mon.is_banned(who, ts):
                got.append("banned")
            elif mon.observe(who, ts).allowed:
                got.append("allow")
            else:
                got.append("ban" if mon.alert_log.recent[-1].severity == 2 else "global")
        mismatches += got != reference_rate_trace(trace, 10, 50, 500, 60)
    ok = boundary_ok and mismatches == 0
    verdict(5, "dos-banning", ok,
            f"request 51 -> {r51.threat_class.value if r51.threat_class else r51.status.value}, "
            f"t+59 {'banned' if at59.status is Status.DENIED else 'open'}, t+60 {at60.status.value}; "
            f"{1000 - mismatches}/1000 traces match the oracle")


# 6. DDoS quarantine


def test_c06_ddos_quarantine(tmp_path, verdict):
    gw, cfg = fresh_gateway(tmp_path, "ddos")
    client = Client(gw)
    for i in range(20):
        assert client.call("banking", "deposit", "amount=5", now=T0 + i, ip=ip_for(1000 + i)).status is Status.OK
    store_file = Path(cfg.store_path)
    snapshot: dict[str, str] = {}

    def on_alert(event: AlertEvent, now: float) -> None:
        if not snapshot and gw.link.state.state is LinkStatus.QUARANTINED:
            snapshot["at_sever"] = hashlib.sha256(store_file.read_bytes()).hexdigest()
            snapshot["cause"] = f"{event.threat_class.value}/sev{event.severity}"

    gw.monitor.subscribe(on_alert)
    start = T0 + 100
    flood = [client.call("banking", "deposit", "amount=1", now=start + i * 0.005, ip=ip_for(i)) for i in range(600)]
    after = [client.call("banking", "deposit", "amount=1", now=start + 11 + i, ip=ip_for(700 + i)) for i in range(20)]
    after += [client.call("banking", "balance", now=start + 40, ip="192.0.2.200")]
    final_hash = hashlib.sha256(store_file.read_bytes()).hexdigest()
    state = gw.link.state
    gw.close()

    sev3 = state.cause is not None and state.cause.severity == 3
    first_deny = next(i for i, r in enumerate(flood) if r.status is not Status.OK)
    no_ok_after = all(r.status is not Status.OK for r in flood[first_deny:])
    severed = all(r.status is Status.ERROR and r.stage == "store" and "LinkSevered" in r.reason for r in after)
    unchanged = snapshot.get("at_sever") == final_hash
    ok = state.state is LinkStatus.QUARANTINED and sev3 and no_ok_after and severed and unchanged
    verdict(6, "ddos-quarantine", ok,
            f"link {state.state.value} after request {first_deny + 1} ({snapshot.get('cause')}); "
            f"{sum(r.status is Status.ERROR for r in after)}/{len(after)} later store calls Error(LinkSevered); "
            f"store checksum {'unchanged' if unchanged else 'CHANGED'} since sever")


# 7. at-rest encryption


def test_c07_at_rest_encryption(tmp_path, verdict):
    gw, cfg = fresh_gateway(tmp_path, "atrest")
    client = Client(gw)
    rng = random.Random(707)
    alphabet = string.ascii_letters + string.digits
    n = 0
    for phrase in corpus("benign"):
        assert client.call("online_transaction", "submit", phrase, now=T0 + n * 0.05, ip=ip_for(n)).status is Status.OK
        n += 1
    values = ["".join(rng.choice(alphabet) for _ in range(64)) for _ in range(500)]
    for v in values:
        resp = client.call("online_transaction", "submit", v, now=T0 + n * 0.05, ip=ip_for(n % 900))
        assert resp.status is Status.OK, resp
        n += 1
    gw.close()

    path = Path(cfg.store_path)
    probes = [v.encode()[j:j + 8] for v in values for j in range(0, 64, 8)]
    hits = scan_plaintext(path, probes)

    records = RecordFile(path)
    wrong_key = DataKey.generate("dk1")
    failures = 0
    for key in records.keys():
        try:
            SecureStore(records).get(key, wrong_key)
        except DecryptionFailure:
            failures += 1

    real_key = DataKey.from_file(cfg.data_key_file)
    victim = records.keys()[0]
    klen = len(victim.encode())
    ct_start = 8 + 4 + klen + 12 + 4
    data = path.read_bytes()
    clen = int.from_bytes(data[ct_start - 4:ct_start], "little")
    detected = 0
    for pos in range(ct_start, ct_start + clen):
        damaged = bytearray(data)
        damaged[pos] ^= 1 + rng.randrange(255)
        path.write_bytes(bytes(damaged))
        try:
            SecureStore(RecordFile(path)).get(victim, real_key)
        except DecryptionFailure:
            detected += 1
    path.write_bytes(data)
    intact = SecureStore(RecordFile(path)).get(victim, real_key)
    ok = not hits and failures == len(records) and detected == clen and bool(intact)
    verdict(7, "at-rest", ok,
            f"{len(hits)} plaintext hits over {len(probes)} probes; wrong key failed {failures}/{len(records)} records; "
            f"{detected}/{clen} single-byte ciphertext corruptions detected")


# 8. pipeline integrity


def _fuzz_envelope(rng: random.Random, client: Client, services: list[tuple[str, str]], sent: list[bytes], now: float, ip: str) -> bytes:
    kind = rng.randrange(8)
    if kind == 0 and sent:
        return rng.choice(sent)  # replay
    if kind == 1:
        raw = bytearray(client.envelope("banking", "balance", "", now, ip))
        for _ in range(rng.randint(1, 4)):
            raw[rng.randrange(len(raw))] = rng.randrange(256)
        return bytes(raw)
    if kind == 2:
        return os.urandom(rng.randint(0, 80))
    if kind == 3:
        forged = dataclasses.replace(client.cert, tag=os.urandom(32).hex())
        return client.envelope("banking", "deposit", "amount=1", now, ip, cert=forged)
    if kind == 4:
        name = "".join(rng.choice(string.ascii_lowercase) for _ in range(rng.randint(1, 12)))
        return client.envelope(name, "get", "", now, ip)
    if kind == 5:
        payload = rng.choice(corpus(rng.choice(["xss", "lfi", "rfi", "injection"])))
        return client.envelope("online_transaction", "submit", payload, now, ip)
    service, action = rng.choice(services)
    payload = rng.choice(["amount=3", "declared_value=250", "order_id=abc", "note=hello", ""])
    return client.envelope(service, action, payload, now, ip)


def test_c08_pipeline_integrity(tmp_path, verdict):
    gw, cfg = fresh_gateway(tmp_path, "fuzz")
    client = Client(gw)
    rng = random.Random(808)
    services = [(s, a) for s, actions in sorted(load_registry(cfg.registry_path).services.items()) for a in sorted(actions)]
    sent: list[bytes] = []
    reached: dict[str, int] = {}
    bad_traces = 0
    denies = 0
    for i in range(10_000):
        now = T0 + i * 0.02
        # renew the certificate before it expires so most traffic reaches the later stages
        if i % 5000 == 0 and i:
            client.cert = gw.ims.authenticate("alice", "correct horse", now)
        ip = ip_for(rng.randrange(40))
        raw = _fuzz_envelope(rng, client, services, sent, now, ip)
        resp, trace = gw.handle_traced(raw, ip, now)
        if not trace.is_well_ordered():
            bad_traces += 1
        denies += resp.status is Status.DENIED
        last = trace.entries[-1].stage
        reached[last] = reached.get(last, 0) + 1
        if len(sent) < 200:
            sent.append(raw)
    gw.close()
    records = alert_records(Path(cfg.alert_log_path))
    ok = bad_traces == 0 and denies == records
    ends = ", ".join(f"{k}={v}" for k, v in sorted(reached.items()))
    verdict(8, "pipeline-integrity", ok,
            f"{bad_traces} ill-ordered traces in 10000; {denies} Deny verdicts vs {records} alert records; last stage: {ends}")


# 9. alert log fidelity


def test_c09_alert_log_fidelity(verdict):
    ts = datetime(2014, 2, 17, 20, 15, 6, tzinfo=timezone.utc)
    event = AlertEvent(
        timestamp=int(ts.timestamp()) * 1_000_000 + 108591,
        src_ip="192.168.204.1",
        src_port=138,
        dst_ip="192.168.204.255",
        dst_port=138,
        proto="UDP",
        threat_class=ThreatClass.XSS,
        severity=2,
    )
    first = format_alert(event).encode("ascii").split(b"\n")[0]
    expected = b"02/17-20:15:06.108591 192.168.204.1:138 -> 192.168.204.255:138"
    verdict(9, "alert-format", first == expected, first.decode())


# 10. end to end


def test_c10_end_to_end(tmp_path, verdict, capsys):
    conf = init_deployment(tmp_path / "with", pbkdf2_iterations=FAST_KDF)
    code_with = harness_main(["run", "--scenario", "all", "--config", str(conf), "--sim-clock"])

    bare = init_deployment(tmp_path / "without", pbkdf2_iterations=FAST_KDF, with_rules=False)
    report = tmp_path / "without.json"
    code_without = harness_main(["run", "--scenario", "all", "--config", str(bare), "--sim-clock", "--report", str(report)])
    capsys.readouterr()
    failed = sorted(s["name"] for s in json.loads(report.read_text())["scenarios"] if not s["passed"])
    ok = code_with == 0 and code_without != 0 and failed == ["injection", "lfi", "rfi", "xss"]
    verdict(10, "end-to-end", ok, f"default ruleset exit {code_with}; no ruleset exit {code_without}, failing {failed}")
