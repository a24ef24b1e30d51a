"""Acceptance gate: one test per shipped guarantee.

Each test exercises a whole behavior end to end and prints a single
``ACCEPTANCE PASS: <name>`` / ``ACCEPTANCE FAIL: <name>`` line, so running
this module with -s reads as a checklist of what the package promises.
"""

from __future__ import annotations

import io
import random
import socket
import time
from contextlib import contextmanager
from urllib.parse import urlencode

from ipgate.acl import AclEngine, AclPolicy, Action, PolicyMode
from ipgate.auth import AuthApp
from ipgate.clock import ManualClock
from ipgate.harness import (
    HttpChannel,
    UserSpec,
    bench_latency,
    build_backend,
    deterministic_bytes,
    parse_scenario,
    read_http_response,
    run_scenario,
)
from ipgate.helper import run_loop
from ipgate.httpmsg import RequestSummary
from ipgate.store import InMemorySessionStore, StoreUnavailableError

from conftest import BrokenStore, CountingStore, make_testbed


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL: {name}")
        raise
    print(f"ACCEPTANCE PASS: {name}")


def summary(ip: str, host: str) -> RequestSummary:
    return RequestSummary(client_ip=ip, method="GET", target="/",
                          host=host, port=80, path="/")


# ---------------------------------------------------------------------------
# 1. Session store against a brute-force model

class ModelStore:
    """Dead-simple reimplementation of the store contract: a dict of sessions
    and a set of (user, group) rows, purged by exhaustive scan."""

    def __init__(self, inactivity=None):
        self.inactivity = inactivity
        self.sessions: dict[str, tuple[str, float, float]] = {}
        self.groups: set[tuple[str, str]] = set()

    def _purge(self, now):
        dead = [ip for ip, (_, end, _) in self.sessions.items() if end < now]
        if self.inactivity is not None:
            dead += [ip for ip, (_, end, last) in self.sessions.items()
                     if end >= now and now - last > self.inactivity]
        for ip in dead:
            del self.sessions[ip]
        live = {user for (user, _, _) in self.sessions.values()}
        self.groups = {(u, g) for (u, g) in self.groups if u in live}
        return len(dead)

    def insert(self, ip, user, groups, duration, now):
        self.sessions[ip] = (user, now + duration, now)
        self.groups.update((user, g) for g in groups)
        return (ip, user, now + duration, now)

    def lookup(self, ip, group, now):
        self._purge(now)
        rec = self.sessions.get(ip)
        if rec is None or (rec[0], group) not in self.groups:
            return (False, None)
        user, end, _ = rec
        self.sessions[ip] = (user, end, now)
        return (True, user)

    def logout(self, ip):
        removed = self.sessions.pop(ip, None) is not None
        live = {user for (user, _, _) in self.sessions.values()}
        self.groups = {(u, g) for (u, g) in self.groups if u in live}
        return removed

    def get(self, ip, now):
        self._purge(now)
        rec = self.sessions.get(ip)
        return None if rec is None else (ip, rec[0], rec[1], rec[2])

    def snapshot(self):
        records = tuple(sorted(
            (ip, user, end, last)
            for ip, (user, end, last) in self.sessions.items()
        ))
        return records, frozenset(self.groups)


def real_snapshot(store):
    records, groups = store.snapshot()
    return (tuple((r.ip, r.user, r.end_time, r.last_activity) for r in records),
            frozenset((m.user, m.group) for m in groups))


def drive_store_trace(rng, events, inactivity):
    store = InMemorySessionStore(inactivity=inactivity)
    model = ModelStore(inactivity=inactivity)
    ips = [f"10.5.0.{i}" for i in range(1, 13)]
    users = ["ada", "bob", "cleo", "dia", "eryn"]
    group_pool = ["internet", "staff", "lab"]
    t = 1_000_000.0
    for step in range(events):
        t += rng.uniform(0.0, 120.0)
        op = rng.choices(("insert", "lookup", "logout", "purge", "get"),
                         weights=(30, 35, 10, 10, 15))[0]
        ip = rng.choice(ips)
        if op == "insert":
            user = rng.choice(users)
            groups = rng.sample(group_pool, k=rng.randint(1, 2))
            duration = round(rng.uniform(1.0, 900.0), 3)
            rec = store.insert_session(ip, user, groups, duration, t)
            assert (rec.ip, rec.user, rec.end_time, rec.last_activity) == \
                model.insert(ip, user, groups, duration, t), f"insert diverged at {step}"
        elif op == "lookup":
            group = rng.choice(group_pool)
            decision = store.lookup(ip, group, t)
            assert (decision.ok, decision.user) == model.lookup(ip, group, t), \
                f"lookup diverged at {step}"
        elif op == "logout":
            assert store.logout(ip) == model.logout(ip), f"logout diverged at {step}"
        elif op == "purge":
            assert store.purge_expired(t) == model._purge(t), f"purge diverged at {step}"
        else:
            rec = store.get_session(ip, t)
            got = None if rec is None else (rec.ip, rec.user, rec.end_time, rec.last_activity)
            assert got == model.get(ip, t), f"get diverged at {step}"
        assert real_snapshot(store) == model.snapshot(), f"state diverged after {op} at {step}"


def test_store_matches_brute_force_model():
    with criterion("session store matches 1000-op brute-force model"):
        began = time.monotonic()
        rng = random.Random(4173)
        drive_store_trace(rng, 650, inactivity=None)
        drive_store_trace(rng, 350, inactivity=60.0)
        elapsed = time.monotonic() - began
        assert elapsed < 10.0, f"oracle run took {elapsed:.1f}s"


# ---------------------------------------------------------------------------
# 2. Full login round trip

def test_login_roundtrip_grants_then_expires():
    with criterion("deny, login, byte-identical relay, expiry re-deny"):
        tb = make_testbed(domains=())
        ip = "10.0.0.11"
        url = "http://app.internal/bytes/4096"
        try:
            denied = tb.proxy_request(ip, url)
            assert denied.status == 403
            assert denied.verdict == "deny-needs-login"
            assert "http://10.0.0.1:8080/login?return=" in denied.body.decode()
            assert tb.origin.request_count() == 0

            login = tb.login(ip, "alice", "wonderland", 3600)
            assert login.status == 200

            proxied = tb.proxy_request(ip, url)
            assert proxied.status == 200

            with socket.create_connection(tb.origin.address, timeout=10.0) as sock:
                sock.sendall(b"GET /bytes/4096 HTTP/1.1\r\nHost: app.internal\r\n"
                             b"Connection: close\r\n\r\n")
                rfile = sock.makefile("rb")
                direct = read_http_response(rfile)
                rfile.close()
            assert direct.status == 200
            assert proxied.body == direct.body, "relayed body differs from direct fetch"
            assert proxied.body == deterministic_bytes("app.internal/bytes/4096", 4096)

            tb.clock.advance(3602)
            expired = tb.proxy_request(ip, url)
            assert expired.status == 403
            assert expired.verdict == "deny-needs-login"
        finally:
            tb.close()


# ---------------------------------------------------------------------------
# 3. Squid helper wire protocol

def test_helper_transcript_is_bit_exact():
    with criterion("helper answers OK/ERR transcript bit-exactly"):
        clock = ManualClock()
        store = InMemorySessionStore()
        store.insert_session("10.1.2.3", "alice", ["internet"], 3600, clock())
        stdin = io.StringIO("10.1.2.3\n10.9.9.9\nnot-an-ip\n10.1.2.3\n")
        stdout = io.StringIO()
        code = run_loop(stdin, stdout, group="internet", store=store, clock=clock)
        assert code == 0
        assert stdout.getvalue() == "OK user=alice\nERR\nERR\nOK user=alice\n"


# ---------------------------------------------------------------------------
# 4. ACL decision table, all eight combinations

def test_acl_decision_table_complete():
    expected = {
        # (mode, authed, listed): (action, user)
        (PolicyMode.WHITELIST, False, False): (Action.DENY_NEEDS_LOGIN, None),
        (PolicyMode.WHITELIST, False, True): (Action.ALLOW, None),
        (PolicyMode.WHITELIST, True, False): (Action.ALLOW, "alice"),
        (PolicyMode.WHITELIST, True, True): (Action.ALLOW, None),
        (PolicyMode.BLACKLIST, False, False): (Action.ALLOW, None),
        (PolicyMode.BLACKLIST, False, True): (Action.DENY_BLACKLISTED, None),
        (PolicyMode.BLACKLIST, True, False): (Action.ALLOW, "alice"),
        (PolicyMode.BLACKLIST, True, True): (Action.ALLOW, "alice"),
    }
    with criterion("ACL decision table: 8/8 combinations"):
        deviations = []
        for (mode, authed, listed), want in expected.items():
            clock = ManualClock()
            store = InMemorySessionStore()
            if authed:
                store.insert_session("10.0.0.7", "alice", ["internet"], 3600, clock())
            engine = AclEngine(
                AclPolicy(mode=mode, domains=("listed.example",),
                          auth_group="internet", auth_cache_ttl=0.0),
                store,
            )
            host = "listed.example" if listed else "other.example"
            verdict = engine.evaluate(summary("10.0.0.7", host), clock())
            if (verdict.action, verdict.user) != want:
                deviations.append((mode.value, authed, listed, verdict))
        assert not deviations, f"table deviations: {deviations}"


# ---------------------------------------------------------------------------
# 5. Auth cache TTL

def test_auth_cache_ttl_window_and_zero():
    with criterion("auth cache: one lookup per TTL window; ttl=0 uncached"):
        # Window behavior: evaluations at t0 and t0+299 share one store
        # lookup, the one at t0+301 forces a second.
        clock = ManualClock()
        counting = CountingStore()
        counting.inner.insert_session("10.0.0.7", "alice", ["internet"], 86400, clock())
        engine = AclEngine(
            AclPolicy(mode=PolicyMode.WHITELIST, domains=(),
                      auth_group="internet", auth_cache_ttl=300.0),
            counting,
        )
        t0 = clock()
        assert engine.evaluate(summary("10.0.0.7", "site.example"), t0).allowed
        assert counting.lookups == 1
        assert engine.evaluate(summary("10.0.0.7", "site.example"), t0 + 299).allowed
        assert counting.lookups == 1
        assert engine.evaluate(summary("10.0.0.7", "site.example"), t0 + 301).allowed
        assert counting.lookups == 2

        # ttl=0: 500-event random trace, verdicts must equal an uncached
        # oracle that consults the store directly, and every non-shortcut
        # evaluation must hit the store.
        rng = random.Random(90125)
        counting = CountingStore()
        inner = counting.inner
        engine_w = AclEngine(
            AclPolicy(mode=PolicyMode.WHITELIST, domains=("listed.example",),
                      auth_group="internet", auth_cache_ttl=0.0),
            counting,
        )
        engine_b = AclEngine(
            AclPolicy(mode=PolicyMode.BLACKLIST, domains=("listed.example",),
                      auth_group="internet", auth_cache_ttl=0.0),
            counting,
        )
        ips = [f"10.6.0.{i}" for i in range(1, 7)]
        users = ["ada", "bob", "cleo"]
        t = 2_000_000.0
        for _ in range(500):
            t += rng.uniform(0.0, 40.0)
            roll = rng.random()
            ip = rng.choice(ips)
            if roll < 0.18:
                inner.insert_session(ip, rng.choice(users), ["internet"],
                                     rng.uniform(30.0, 600.0), t)
                continue
            if roll < 0.28:
                inner.logout(ip)
                continue
            host = rng.choice(("listed.example", "other.example", "third.example"))
            listed = host == "listed.example"
            decision = inner.lookup(ip, "internet", t)
            ok, user = decision.ok, decision.user
            if listed:
                want_w = (Action.ALLOW, None)
            elif ok:
                want_w = (Action.ALLOW, user)
            else:
                want_w = (Action.DENY_NEEDS_LOGIN, None)
            if ok:
                want_b = (Action.ALLOW, user)
            elif listed:
                want_b = (Action.DENY_BLACKLISTED, None)
            else:
                want_b = (Action.ALLOW, None)
            before = counting.lookups
            got_w = engine_w.evaluate(summary(ip, host), t)
            got_b = engine_b.evaluate(summary(ip, host), t)
            assert (got_w.action, got_w.user) == want_w, f"whitelist diverged at t={t}"
            assert (got_b.action, got_b.user) == want_b, f"blacklist diverged at t={t}"
            # whitelist short-circuits listed hosts; blacklist always asks
            assert counting.lookups == before + (1 if listed else 2)


# ---------------------------------------------------------------------------
# 6. Gateway topologies

TOPOLOGY_ACTIONS = """\
request 10.0.0.11 http://site.example/ expect deny-needs-login
login 10.0.0.11 alice wonderland 3600 expect ok
request 10.0.0.11 http://site.example/ expect allow
request 10.0.0.12 http://site.example/ expect deny-needs-login
advance 4000
request 10.0.0.11 http://site.example/ expect deny-needs-login
"""


def topology_script(kind: str) -> str:
    return (f"topology {kind}\n"
            "clients 10.0.0.11 10.0.0.12\n"
            "policy whitelist\n"
            "user alice password wonderland groups internet\n"
            + TOPOLOGY_ACTIONS)


NAT_BROKEN_SCRIPT = """\
topology type2-nat-broken
clients 10.0.0.11 10.0.0.12 10.0.0.13
policy whitelist
user alice password wonderland groups internet
request 10.0.0.12 http://site.example/ expect deny-needs-login
login 10.0.0.11 alice wonderland 3600 expect ok
request 10.0.0.12 http://site.example/ expect allow
request 10.0.0.13 http://site.example/ expect allow
"""


def test_topologies_behave_as_documented():
    with criterion("type1 == type2; NAT-broken opens the gate for everyone"):
        type1 = run_scenario(parse_scenario(topology_script("type1")))
        type2 = run_scenario(parse_scenario(topology_script("type2")))
        assert type1.ok, type1.format()
        assert type2.ok, type2.format()
        assert type1.verdicts() == type2.verdicts()

        nat = run_scenario(parse_scenario(NAT_BROKEN_SCRIPT))
        assert nat.ok, nat.format()
        assert nat.verdicts() == ("deny-needs-login", "allow", "allow")


# ---------------------------------------------------------------------------
# 7. Latency overhead

def test_proxy_latency_overhead_within_budget():
    with criterion("proxy adds <= 2 ms median, <= 10 ms p95 (25x200 warm)"):
        report = bench_latency(clients=25, requests_per_client=200, warm_cache=True)
        print()
        print(report.format())
        assert report.direct.count == 25 * 200
        assert report.proxied.count == 25 * 200
        assert report.overhead_p50_ms <= 2.0, report.format()
        assert report.overhead_p95_ms <= 10.0, report.format()
        assert report.elapsed_s < 60.0, report.format()


# ---------------------------------------------------------------------------
# 8. Fail closed when the store is down

class InsertBrokenStore:
    """Healthy reads, but session creation fails like a dead database."""

    def __init__(self, inner):
        self.inner = inner

    def insert_session(self, *args, **kwargs):
        raise StoreUnavailableError("store is unreachable")

    def __getattr__(self, name):
        return getattr(self.inner, name)


def test_store_outage_fails_closed():
    with criterion("store outage: helper says ERR, login returns 503"):
        clock = ManualClock()
        stdout = io.StringIO()
        code = run_loop(io.StringIO("10.0.0.5\n"), stdout, group="internet",
                        store=BrokenStore(StoreUnavailableError), clock=clock)
        assert code == 0
        assert stdout.getvalue() == "ERR\n"

        inner = InMemorySessionStore()
        app = AuthApp(
            InsertBrokenStore(inner),
            build_backend([UserSpec("alice", "wonderland", ("internet",))]),
            clock=clock,
        )
        channel = HttpChannel(app.handle_connection, "10.0.0.11")
        try:
            response = channel.request(
                "POST", "http://10.0.0.1:8080/login",
                headers=[("Content-Type", "application/x-www-form-urlencoded"),
                         ("Accept", "application/json")],
                body=urlencode({"user": "alice", "password": "wonderland",
                                "duration": "3600"}).encode(),
            )
        finally:
            channel.close()
        assert response.status == 503
        assert inner.snapshot() == ((), frozenset())
