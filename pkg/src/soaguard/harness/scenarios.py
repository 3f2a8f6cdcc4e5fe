"""Attack scenarios replayed against a gateway, and the predicates that grade them.

The harness is a black-box client: it knows one account's password and the
operator token, never the IMS key or the data key.
"""

from __future__ import annotations

import heapq
import json
import logging
import queue
import random
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Generator, Iterable, Optional

from ..envelope import AuthCertificate, ServiceRequest, ServiceResponse, Status, encode
from ..store import scan_plaintext
from .report import Report, ScenarioReport
from .targets import Target

__all__ = [
    "DEFAULT_SCENARIOS",
    "SCENARIO_ORDER",
    "Credentials",
    "Scenario",
    "run_all",
    "run_scenario",
]

logger = logging.getLogger(__name__)

SCENARIO_ORDER = (
    "benign",
    "forgery",
    "replay",
    "xss",
    "lfi",
    "rfi",
    "injection",
    "dos_single",
    "ddos_multi",
    "at_rest_scan",
)

_CORPUS_CLASS = {"xss": "XSS", "lfi": "LFI", "rfi": "RFI", "injection": "Injection"}


def corpus_path(name: str) -> Path:
    return Path(str(resources.files("soaguard") / "data" / "corpus" / f"{name}.txt"))


@dataclass(frozen=True)
class Scenario:
    name: str
    rate: float
    duration: float
    clients: int = 1
    corpus: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.name not in SCENARIO_ORDER:
            raise ValueError(f"unknown scenario {self.name!r}")
        if self.rate <= 0 or self.duration <= 0:
            raise ValueError("rate and duration must be positive")
        if self.clients < 1:
            raise ValueError("at least one client is needed")

    @property
    def requests(self) -> int:
        return max(1, round(self.rate * self.duration))


DEFAULT_SCENARIOS: dict[str, Scenario] = {
    "benign": Scenario("benign", rate=10, duration=20, clients=10, corpus=corpus_path("benign")),
    "forgery": Scenario("forgery", rate=20, duration=10),
    "replay": Scenario("replay", rate=10, duration=20, clients=5),
    "xss": Scenario("xss", rate=10, duration=5, clients=5, corpus=corpus_path("xss")),
    "lfi": Scenario("lfi", rate=10, duration=5, clients=5, corpus=corpus_path("lfi")),
    "rfi": Scenario("rfi", rate=10, duration=5, clients=5, corpus=corpus_path("rfi")),
    "injection": Scenario("injection", rate=10, duration=5, clients=5, corpus=corpus_path("injection")),
    "dos_single": Scenario("dos_single", rate=100, duration=10),
    "ddos_multi": Scenario("ddos_multi", rate=600, duration=1, clients=600),
    "at_rest_scan": Scenario("at_rest_scan", rate=10, duration=5, clients=5),
}


@dataclass(frozen=True)
class Credentials:
    client_id: str
    password: str


@dataclass(frozen=True)
class Step:
    at: float  # seconds after scenario start
    ip: str
    body: bytes
    kind: str = "request"


@dataclass(frozen=True)
class Outcome:
    at: float
    ip: str
    kind: str
    status: str
    stage: str
    threat: Optional[str]
    reason: str
    body: str

    @classmethod
    def of(cls, step: Step, resp: ServiceResponse) -> Outcome:
        return cls(
            step.at,
            step.ip,
            step.kind,
            resp.status.value,
            resp.stage,
            resp.threat_class.value if resp.threat_class else None,
            resp.reason,
            resp.body,
        )


Stream = Generator[Step, ServiceResponse, None]


@dataclass
class _Run:
    scenario: Scenario
    index: int
    target: Target
    clock: Any
    rng: random.Random
    creds: Credentials
    cert: AuthCertificate
    start: float
    expected_threshold: int
    window_s: float
    extras: dict[str, Any] = field(default_factory=dict)

    def ip(self, client: int) -> str:
        return f"10.{self.index % 256}.{client // 250}.{client % 250 + 1}"

    def nonce(self) -> str:
        return f"{self.rng.getrandbits(128):032x}"

    def envelope(
        self,
        ip: str,
        service: str,
        action: str,
        payload: str,
        at: float,
        cert: Optional[AuthCertificate] = None,
        client_id: Optional[str] = None,
    ) -> bytes:
        request = ServiceRequest(
            client_id=client_id if client_id is not None else self.creds.client_id,
            source_ip=ip,
            service=service,
            action=action,
            payload=payload,
            certificate=cert if cert is not None else self.cert,
            nonce=self.nonce(),
            timestamp=int(self.start + at),
        )
        return encode(request)

    def schedule(self, n: int) -> list[list[int]]:
        """Request indices per client, round-robin."""
        per_client: list[list[int]] = [[] for _ in range(self.scenario.clients)]
        for i in range(n):
            per_client[i % self.scenario.clients].append(i)
        return per_client


def _read_corpus(path: Optional[Path]) -> list[str]:
    if path is None:
        return []
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# traffic plans: one generator per client


def _plan_benign(run: _Run) -> list[Stream]:
    phrases = _read_corpus(run.scenario.corpus) or ["hello world order=42"]
    rate = run.scenario.rate

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        last_order: Optional[str] = None
        for k, i in enumerate(indices):
            op = ("submit", "deposit", "get", "quote", "balance")[k % 5]
            if op == "get" and last_order is None:
                op = "quote"
            if op == "submit":
                body = run.envelope(ip, "online_transaction", "submit", phrases[i % len(phrases)], i / rate)
            elif op == "deposit":
                body = run.envelope(ip, "banking", "deposit", f"amount={run.rng.randint(1, 500)}", i / rate)
            elif op == "get":
                body = run.envelope(ip, "transaction_info", "get", f"order_id={last_order}", i / rate)
            elif op == "quote":
                body = run.envelope(ip, "insurance", "quote", f"declared_value={run.rng.randint(1, 10_000)}", i / rate)
            else:
                body = run.envelope(ip, "banking", "balance", "", i / rate)
            resp = yield Step(i / rate, ip, body, op)
            if op == "submit" and resp.status is Status.OK and resp.body.startswith("order_id="):
                last_order = resp.body.split("=", 1)[1]

    return [client(c, idx) for c, idx in enumerate(run.schedule(run.scenario.requests))]


def _tampered(run: _Run, i: int) -> tuple[AuthCertificate, str]:
    """A certificate the IMS never issued (or one presented by the wrong subject)."""
    cert = run.cert
    rng = run.rng
    variant = i % 7
    if variant == 0:
        pos = rng.randrange(64)
        ch = rng.choice([c for c in "0123456789abcdef" if c != cert.tag[pos]])
        return replace(cert, tag=cert.tag[:pos] + ch + cert.tag[pos + 1 :]), cert.subject
    if variant == 1:
        other = f"user{rng.randrange(10_000)}"
        return replace(cert, subject=other), other
    if variant == 2:
        return replace(cert, expires_at=cert.expires_at + rng.randint(1, 86_400 * 365)), cert.subject
    if variant == 3:
        return replace(cert, cert_id=f"{rng.getrandbits(128):032x}"), cert.subject
    if variant == 4:
        minted = AuthCertificate(
            subject=cert.subject,
            issued_at=cert.issued_at,
            expires_at=cert.issued_at + 3600,
            cert_id=f"{rng.getrandbits(128):032x}",
            tag=f"{rng.getrandbits(256):064x}",
        )
        return minted, cert.subject
    if variant == 5:
        return replace(cert, issued_at=max(0, cert.issued_at - rng.randint(1, 3600))), cert.subject
    # a genuine certificate presented on behalf of somebody else
    return cert, f"victim{rng.randrange(10_000)}"


def _plan_forgery(run: _Run) -> list[Stream]:
    rate = run.scenario.rate

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        for i in indices:
            cert, client_id = _tampered(run, i)
            body = run.envelope(ip, "banking", "balance", "", i / rate, cert=cert, client_id=client_id)
            yield Step(i / rate, ip, body, "forged")

    return [client(c, idx) for c, idx in enumerate(run.schedule(run.scenario.requests))]


def _plan_replay(run: _Run) -> list[Stream]:
    rate = run.scenario.rate
    pairs = max(1, run.scenario.requests // 2)

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        for i in indices:
            at = 2 * i / rate
            body = run.envelope(ip, "insurance", "quote", f"declared_value={run.rng.randint(1, 10_000)}", at)
            yield Step(at, ip, body, "original")
            yield Step(at + 1 / rate, ip, body, "replay")

    return [client(c, idx) for c, idx in enumerate(run.schedule(pairs))]


def _plan_corpus(run: _Run) -> list[Stream]:
    payloads = _read_corpus(run.scenario.corpus)
    rate = run.scenario.rate

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        for i in indices:
            body = run.envelope(ip, "online_transaction", "submit", payloads[i], i / rate)
            yield Step(i / rate, ip, body, "attack")

    return [client(c, idx) for c, idx in enumerate(run.schedule(len(payloads)))]


def _plan_dos(run: _Run) -> list[Stream]:
    rate = run.scenario.rate

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        for i in indices:
            body = run.envelope(ip, "insurance", "quote", "declared_value=100", i / rate)
            yield Step(i / rate, ip, body, "flood")

    return [client(c, idx) for c, idx in enumerate(run.schedule(run.scenario.requests))]


def _plan_ddos(run: _Run) -> list[Stream]:
    rate = run.scenario.rate

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        for i in indices:
            body = run.envelope(ip, "banking", "deposit", "amount=1", i / rate)
            yield Step(i / rate, ip, body, "flood")

    return [client(c, idx) for c, idx in enumerate(run.schedule(run.scenario.requests))]


def _plan_at_rest(run: _Run) -> list[Stream]:
    rate = run.scenario.rate
    alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789"
    values = ["".join(run.rng.choice(alphabet) for _ in range(64)) for _ in range(run.scenario.requests)]
    run.extras["values"] = values

    def client(c: int, indices: list[int]) -> Stream:
        ip = run.ip(c)
        for i in indices:
            body = run.envelope(ip, "online_transaction", "submit", values[i], i / rate)
            yield Step(i / rate, ip, body, "store")

    return [client(c, idx) for c, idx in enumerate(run.schedule(len(values)))]


_PLANS: dict[str, Callable[[_Run], list[Stream]]] = {
    "benign": _plan_benign,
    "forgery": _plan_forgery,
    "replay": _plan_replay,
    "xss": _plan_corpus,
    "lfi": _plan_corpus,
    "rfi": _plan_corpus,
    "injection": _plan_corpus,
    "dos_single": _plan_dos,
    "ddos_multi": _plan_ddos,
    "at_rest_scan": _plan_at_rest,
}


# execution


def _drive(run: _Run, streams: list[tuple[int, Stream]], emit: Callable[[int, Outcome], None]) -> None:
    heap: list[tuple[float, int, int, Step]] = []
    live: dict[int, Stream] = {}
    for cid, gen in streams:
        try:
            step = next(gen)
        except StopIteration:
            continue
        live[cid] = gen
        heapq.heappush(heap, (step.at, cid, 0, step))
    seq = 0
    while heap:
        _, cid, _, step = heapq.heappop(heap)
        run.clock.sleep_until(run.start + step.at)
        resp = run.target.invoke(step.body, step.ip, run.start + step.at if run.clock.simulated else run.clock.now())
        emit(cid, Outcome.of(step, resp))
        try:
            nxt = live[cid].send(resp)
        except StopIteration:
            continue
        seq += 1
        heapq.heappush(heap, (nxt.at, cid, seq, nxt))


def _execute(run: _Run, streams: list[Stream], workers: int) -> list[Outcome]:
    indexed = list(enumerate(streams))
    if workers <= 1 or run.clock.simulated:
        collected: list[tuple[float, int, int, Outcome]] = []
        _drive(run, indexed, lambda cid, o: collected.append((o.at, cid, len(collected), o)))
        return [o for *_, o in sorted(collected, key=lambda t: t[:3])]

    results: queue.Queue = queue.Queue()
    errors: list[BaseException] = []

    def worker(share: list[tuple[int, Stream]]) -> None:
        try:
            _drive(run, share, lambda cid, o: results.put((o.at, cid, o)))
        except BaseException as exc:  # surfaced after join
            errors.append(exc)

    threads = [
        threading.Thread(target=worker, args=(indexed[w::workers],), daemon=True) for w in range(workers)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    # single-owner accumulator
    collected2 = []
    while not results.empty():
        collected2.append(results.get())
    collected2.sort(key=lambda t: (t[0], t[1]))
    return [o for *_, o in collected2]


# predicates: (outcomes, run) -> (passed, detail)


def _first_bad(outcomes: Iterable[Outcome], ok: Callable[[Outcome], bool]) -> Optional[Outcome]:
    return next((o for o in outcomes if not ok(o)), None)


def _describe(o: Outcome) -> str:
    return f"{o.kind} at +{o.at:.3f}s from {o.ip}: {o.status} stage={o.stage} threat={o.threat} ({o.reason})"


def _check_benign(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    bad = [o for o in outcomes if o.status != "Ok"]
    if bad:
        return False, f"{len(bad)} benign requests not served; first: {_describe(bad[0])}"
    return True, f"all {len(outcomes)} benign requests served"


def _check_forgery(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    bad = _first_bad(outcomes, lambda o: o.status == "Denied" and o.stage == "auth" and o.threat == "Forgery")
    if bad:
        return False, "forged certificate not stopped at auth: " + _describe(bad)
    return True, f"{len(outcomes)} forged certificates denied at auth"


def _check_replay(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    originals = [o for o in outcomes if o.kind == "original"]
    replays = [o for o in outcomes if o.kind == "replay"]
    bad = _first_bad(originals, lambda o: o.status == "Ok")
    if bad:
        return False, "original request refused: " + _describe(bad)
    bad = _first_bad(replays, lambda o: o.status == "Denied" and o.stage == "replay" and o.threat == "Replay")
    if bad:
        return False, "replay accepted: " + _describe(bad)
    return True, f"{len(originals)} originals served, {len(replays)} replays denied"


def _check_corpus(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    want = _CORPUS_CLASS[run.scenario.name]
    bad = _first_bad(outcomes, lambda o: o.status == "Denied" and o.stage == "sanitize" and o.threat == want)
    if bad:
        missed = sum(1 for o in outcomes if not (o.status == "Denied" and o.threat == want))
        return False, f"{missed}/{len(outcomes)} payloads not denied as {want}; first: {_describe(bad)}"
    return True, f"{len(outcomes)} payloads denied at sanitize as {want}"


def _check_dos(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    mark = run.expected_threshold
    if len(outcomes) <= mark:
        return False, f"only {len(outcomes)} requests sent; threshold {mark} never exceeded"
    bad = _first_bad(outcomes[:mark], lambda o: o.status == "Ok")
    if bad:
        return False, "request under the threshold refused: " + _describe(bad)
    first_deny = next((i for i, o in enumerate(outcomes) if o.status == "Denied"), None)
    if first_deny is None:
        return False, "flood never denied"
    lag = outcomes[first_deny].at - outcomes[mark - 1].at
    if outcomes[first_deny].threat != "RateFlood" or lag > 1.0:
        return False, f"first denial {_describe(outcomes[first_deny])} came {lag:.3f}s after the {mark}-request mark"
    bad = _first_bad(outcomes[first_deny:], lambda o: o.status == "Denied" and o.threat == "RateFlood")
    if bad:
        return False, "flooding source served after ban: " + _describe(bad)
    stages = Counter(o.stage for o in outcomes[first_deny:])
    return True, f"denied from request {first_deny + 1} ({lag:.3f}s after the mark); stages {dict(stages)}"


def _check_ddos(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    status = run.extras.get("status", {})
    probe: Optional[Outcome] = run.extras.get("probe")
    if status.get("link") != "Quarantined" or status.get("cause_severity") != 3:
        return False, f"link not quarantined by a severity-3 alert: {status}"
    first_deny = next((i for i, o in enumerate(outcomes) if o.status == "Denied"), None)
    if first_deny is not None:
        late = _first_bad(outcomes[first_deny:], lambda o: o.status != "Ok")
        if late:
            return False, "store mutation acknowledged after the flood was detected: " + _describe(late)
    if probe is None or not (probe.status == "Error" and probe.stage == "store" and "LinkSevered" in probe.reason):
        return False, "store-touching probe after the flood was not refused with LinkSevered: " + (
            _describe(probe) if probe else "no probe"
        )
    return True, f"quarantined ({status.get('cause')}, severity 3); post-flood store call refused"


def _check_at_rest(outcomes: list[Outcome], run: _Run) -> tuple[bool, str]:
    bad = _first_bad(outcomes, lambda o: o.status == "Ok")
    if bad:
        return False, "write refused: " + _describe(bad)
    if "scan_error" in run.extras:
        return False, run.extras["scan_error"]
    hits = run.extras.get("hits", [])
    if hits:
        return False, f"{len(hits)} plaintext fragments found in the store file"
    return True, f"{len(outcomes)} values stored; 0 plaintext hits over {run.extras.get('probes', 0)} probes"


_PREDICATES: dict[str, tuple[Callable[[list[Outcome], _Run], tuple[bool, str]], str]] = {
    "benign": (_check_benign, "every request served (zero false positives)"),
    "forgery": (_check_forgery, "every forged certificate denied at auth as Forgery"),
    "replay": (_check_replay, "originals served, every resubmission denied at replay"),
    "xss": (_check_corpus, "every payload denied at sanitize as XSS"),
    "lfi": (_check_corpus, "every payload denied at sanitize as LFI"),
    "rfi": (_check_corpus, "every payload denied at sanitize as RFI"),
    "injection": (_check_corpus, "every payload denied at sanitize as Injection"),
    "dos_single": (_check_dos, "RateFlood denial within 1s of the threshold mark, source banned afterwards"),
    "ddos_multi": (_check_ddos, "severity-3 alert quarantines the store link; store calls then fail"),
    "at_rest_scan": (_check_at_rest, "no 8-byte fragment of any stored value appears in the store file"),
}


def _after(run: _Run, outcomes: list[Outcome]) -> None:
    name = run.scenario.name
    if name == "ddos_multi":
        run.clock.advance(run.window_s + 1)
        now = run.clock.now()
        ip = f"10.{run.index % 256}.255.254"
        at = now - run.start
        resp = run.target.invoke(run.envelope(ip, "banking", "deposit", "amount=1", at), ip, now)
        run.extras["probe"] = Outcome.of(Step(at, ip, b"", "probe"), resp)
        run.extras["status"] = run.target.admin("status", now)
    elif name == "at_rest_scan":
        path = run.target.store_path
        if path is None:
            run.extras["scan_error"] = "store file path unknown; pass --store-path"
            return
        probes = {v[i : i + 8].encode() for v in run.extras["values"] for i in range(len(v) - 7)}
        run.extras["probes"] = len(probes)
        try:
            run.extras["hits"] = scan_plaintext(path, sorted(probes))
        except OSError as exc:
            run.extras["scan_error"] = f"cannot scan store file: {exc}"


def run_scenario(
    scenario: Scenario,
    target: Target,
    clock: Any,
    creds: Credentials,
    seed: int = 0,
    index: int = 0,
    workers: int = 1,
    expected_threshold: int = 50,
    window_s: float = 10,
) -> ScenarioReport:
    rng = random.Random(f"{seed}:{scenario.name}")
    target.reset(scenario.name, clock.now())
    start = clock.now()
    code, raw = target.auth(creds.client_id, creds.password, f"10.{index % 256}.255.1", start)
    if code != 200:
        raise RuntimeError(f"harness account could not authenticate ({code}): {raw[:200]!r}")
    cert = AuthCertificate.from_dict(json.loads(raw))
    run = _Run(scenario, index, target, clock, rng, creds, cert, start, expected_threshold, window_s)
    outcomes = _execute(run, _PLANS[scenario.name](run), workers)
    _after(run, outcomes)
    check, expected = _PREDICATES[scenario.name]
    try:
        passed, detail = check(outcomes, run)
    except Exception as exc:  # a predicate bug must not abort the report
        passed, detail = False, f"predicate error: {exc!r}"
    denied = Counter(o.stage for o in outcomes if o.status == "Denied")
    denied_class = Counter(o.threat for o in outcomes if o.status == "Denied")
    errors = Counter(o.stage for o in outcomes if o.status == "Error")
    return ScenarioReport(
        name=scenario.name,
        sent=len(outcomes),
        allowed=sum(1 for o in outcomes if o.status == "Ok"),
        denied_by_stage=dict(sorted(denied.items())),
        denied_by_class=dict(sorted(denied_class.items())),
        errors_by_stage=dict(sorted(errors.items())),
        expected=expected,
        passed=passed,
        detail=detail,
    )


def run_all(
    target: Target,
    clock: Any,
    creds: Credentials,
    scenarios: Optional[list[Scenario]] = None,
    seed: int = 0,
    workers: int = 1,
    cooldown: float = 0.0,
    expected_threshold: int = 50,
    window_s: float = 10,
) -> Report:
    chosen = scenarios if scenarios is not None else [DEFAULT_SCENARIOS[n] for n in SCENARIO_ORDER]
    chosen = sorted(chosen, key=lambda s: SCENARIO_ORDER.index(s.name))
    sections = []
    for scenario in chosen:
        # put every window, ban and escalation horizon of the previous scenario behind us
        if sections:
            clock.advance(3600 if clock.simulated else cooldown)
        index = SCENARIO_ORDER.index(scenario.name) + 1
        logger.info("running scenario %s", scenario.name)
        sections.append(
            run_scenario(scenario, target, clock, creds, seed, index, workers, expected_threshold, window_s)
        )
    return Report(seed=seed, scenarios=sections)
