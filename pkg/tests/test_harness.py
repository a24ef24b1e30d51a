"""Testbench internals: stub origin, topology modeling, scenario parsing and
execution, and the latency statistics used by the bench."""

from __future__ import annotations

import socket

import pytest

from ipgate.acl import PolicyMode
from ipgate.harness import (
    BenchReport,
    LatencyStats,
    ScenarioError,
    StubOrigin,
    Topology,
    TopologyKind,
    bench_latency,
    deterministic_bytes,
    parse_scenario,
    read_http_response,
    run_scenario,
    split_http_url,
)


# -- deterministic bodies ---------------------------------------------------------

def test_deterministic_bytes_are_stable_and_seeded():
    a = deterministic_bytes("seed-a", 100)
    assert len(a) == 100
    assert a == deterministic_bytes("seed-a", 100)
    assert a[:10] == deterministic_bytes("seed-a", 10)  # prefix property
    assert a != deterministic_bytes("seed-b", 100)
    assert deterministic_bytes("x", 0) == b""


# -- stub origin --------------------------------------------------------------------

def fetch(address, host, path, method="GET"):
    with socket.create_connection(address, timeout=10.0) as sock:
        sock.sendall(f"{method} {path} HTTP/1.1\r\nHost: {host}\r\n"
                     "Connection: close\r\n\r\n".encode())
        rfile = sock.makefile("rb")
        try:
            return read_http_response(rfile, head_only=(method == "HEAD"))
        finally:
            rfile.close()


def test_stub_origin_routes():
    origin = StubOrigin().start()
    try:
        addr = origin.address
        bytes_resp = fetch(addr, "a.example", "/bytes/64")
        assert bytes_resp.body == deterministic_bytes("a.example/bytes/64", 64)

        status_resp = fetch(addr, "a.example", "/status/418")
        assert status_resp.status == 418

        no_content = fetch(addr, "a.example", "/status/204")
        assert no_content.status == 204 and no_content.body == b""

        chunked = fetch(addr, "a.example", "/chunked/2/10")
        assert chunked.headers.get("Transfer-Encoding") == "chunked"
        assert chunked.body == origin.chunked_payload("a.example", "/chunked/2/10", 2, 10)

        default = fetch(addr, "a.example", "/some/page")
        assert b"stub origin body for http://a.example/some/page" in default.body

        # Bodies depend on the host too, not only the path.
        other_host = fetch(addr, "b.example", "/bytes/64")
        assert other_host.body != bytes_resp.body

        assert origin.connections == 6
        assert origin.request_count() == 6
        assert ("a.example", "/bytes/64") in origin.requests
    finally:
        origin.stop()


# -- URL splitting -------------------------------------------------------------------

def test_split_http_url():
    assert split_http_url("http://Host.Example/path?q=1") == ("host.example", 80, "/path?q=1")
    assert split_http_url("http://h.example:8080") == ("h.example", 8080, "/")
    assert split_http_url("http://h.example:81/") == ("h.example", 81, "/")
    for bad in ("https://h.example/", "h.example/path", "ftp://x/", "http://"):
        with pytest.raises(ValueError):
            split_http_url(bad)


# -- topologies ----------------------------------------------------------------------

def test_topology_validation():
    with pytest.raises(ValueError):
        Topology(kind=TopologyKind.TYPE1, client_ips=("10.0.0.5", "10.0.0.5"))
    with pytest.raises(ValueError):
        Topology(kind=TopologyKind.TYPE1, client_ips=("10.0.0.1",), gateway_ip="10.0.0.1")
    with pytest.raises(ValueError):
        Topology(kind=TopologyKind.TYPE1, client_ips=("not-an-ip",))


def test_topology_observed_ip():
    plain = Topology(kind=TopologyKind.TYPE2, client_ips=("10.0.0.5",))
    assert plain.observed_ip("10.0.0.5") == "10.0.0.5"
    natted = Topology(kind=TopologyKind.TYPE2_NAT_BROKEN, client_ips=("10.0.0.5",))
    assert natted.observed_ip("10.0.0.5") == "10.0.0.1"


# -- scenario parsing ------------------------------------------------------------------

FULL_SCRIPT = """\
# exercise most of the grammar
topology type2
gateway 192.168.9.1
clients 192.168.9.10-12 192.168.9.50
policy whitelist open.example .docs.example
auth-group internet
cache-ttl 120
clock 2000000
max-duration 7200
user alice password wonderland groups internet,staff

request 192.168.9.10 http://open.example/ expect allow status 200
spawn request 192.168.9.11 http://closed.example/ expect deny-needs-login
spawn request 192.168.9.12 http://closed.example/ expect deny-needs-login
join
login 192.168.9.50 alice wonderland 600 expect ok
logout 192.168.9.50
advance 30
"""


def test_parse_scenario_full_grammar():
    spec = parse_scenario(FULL_SCRIPT, source="full.scn")
    assert spec.topology.kind is TopologyKind.TYPE2
    assert spec.topology.gateway_ip == "192.168.9.1"
    assert spec.topology.client_ips == (
        "192.168.9.10", "192.168.9.11", "192.168.9.12", "192.168.9.50")
    assert spec.policy.mode is PolicyMode.WHITELIST
    assert spec.policy.domains == frozenset({"open.example", ".docs.example"})
    assert spec.policy.auth_cache_ttl == 120.0
    assert spec.clock_start == 2_000_000.0
    assert spec.max_duration == 7200.0
    assert spec.users == tuple([spec.users[0]])
    assert spec.users[0].name == "alice"
    assert spec.users[0].groups == ("internet", "staff")
    kinds = [a.kind for a in spec.actions]
    assert kinds == ["request", "request", "request", "join", "login", "logout", "advance"]
    assert spec.actions[1].spawn and spec.actions[2].spawn and not spec.actions[0].spawn
    assert spec.actions[0].expect == "allow" and spec.actions[0].expect_status == 200
    assert spec.actions[4].duration == 600.0


MINI = """\
clients 10.0.0.11
policy whitelist
user alice password wonderland groups internet
"""


@pytest.mark.parametrize("script,needle", [
    (MINI + "request 10.0.0.11 http://x/\nclients 10.0.0.12\n", "before the first action"),
    (MINI + "request 10.0.0.99 http://x/\n", "unknown client"),
    (MINI + "request 10.0.0.11 http://x/ expect maybe\n", "expect must be one of"),
    (MINI + "login 10.0.0.11 alice pw 600 expect allowed\n", "expect must be one of"),
    (MINI + "request 10.0.0.11 http://x/ bogus\n", "unexpected token"),
    (MINI + "join now\n", "join takes no arguments"),
    (MINI + "advance\n", "advance SECONDS"),
    (MINI + "logout\n", "logout CLIENT"),
    (MINI + "user bob pw hunter2\n", "user NAME password PW groups"),
    (MINI + "teleport 10.0.0.11\n", "unknown word"),
    (MINI + "spawn\n", "spawn needs an action"),
    ("clients 10.0.0.9-3\npolicy whitelist\n", "bad IP range"),
    ("clients 10.0.0.11\n", "missing `policy`"),
    ("policy whitelist\n", "missing `clients`"),
])
def test_parse_scenario_errors(script, needle):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(script, source="bad.scn")
    assert needle in str(err.value)
    assert str(err.value).startswith("bad.scn")


def test_parse_scenario_reports_line_numbers():
    script = MINI + "request 10.0.0.11 http://x/ expect maybe\n"
    with pytest.raises(ScenarioError) as err:
        parse_scenario(script, source="lines.scn")
    assert str(err.value).startswith("lines.scn:4:")


# -- scenario execution ------------------------------------------------------------------

FLOW_SCRIPT = """\
clients 10.0.0.11 10.0.0.12
policy whitelist open.example
user alice password wonderland groups internet
request 10.0.0.11 http://open.example/ expect allow status 200
request 10.0.0.11 http://closed.example/ expect deny-needs-login status 403
login 10.0.0.11 alice wonderland 3600 expect ok
request 10.0.0.11 http://closed.example/ expect allow
advance 4000
request 10.0.0.11 http://closed.example/ expect deny-needs-login
request 10.0.0.12 http://closed.example/ expect deny-needs-login
"""


def test_run_scenario_is_deterministic():
    first = run_scenario(parse_scenario(FLOW_SCRIPT))
    second = run_scenario(parse_scenario(FLOW_SCRIPT))
    assert first.ok and second.ok
    expected = ("allow", "deny-needs-login", "allow",
                "deny-needs-login", "deny-needs-login")
    assert first.verdicts() == expected
    assert second.verdicts() == expected


def test_transcript_records_time_and_summary():
    transcript = run_scenario(parse_scenario(FLOW_SCRIPT))
    text = transcript.format()
    assert "[t=1000000]" in text            # before advance
    assert "[t=1004000]" in text            # after advance 4000
    assert text.splitlines()[-1] == "# 7 actions, 6 checked, 0 failed"
    assert " [ok]" in text


def test_expect_mismatch_marks_failure():
    script = (
        "clients 10.0.0.11\npolicy whitelist\n"
        "user alice password wonderland groups internet\n"
        "request 10.0.0.11 http://x.example/ expect allow\n"
    )
    transcript = run_scenario(parse_scenario(script))
    assert not transcript.ok
    (failure,) = transcript.failures()
    assert failure.passed is False
    assert failure.verdict == "deny-needs-login"
    assert "[FAIL: expected allow]" in transcript.format()
    assert transcript.format().endswith("# 1 actions, 1 checked, 1 failed")


def test_login_expectations():
    script = (
        "clients 10.0.0.11\npolicy whitelist\n"
        "user alice password wonderland groups internet\n"
        "login 10.0.0.11 alice wrongpw 600 expect fail\n"
        "login 10.0.0.11 alice wonderland 600 expect ok\n"
    )
    transcript = run_scenario(parse_scenario(script))
    assert transcript.ok
    statuses = [e.status for e in transcript.entries]
    assert statuses == [401, 200]


def test_spawned_requests_join_in_script_order():
    script = (
        "clients 10.0.0.11 10.0.0.12 10.0.0.13\npolicy whitelist\n"
        "user alice password wonderland groups internet\n"
        "spawn request 10.0.0.11 http://a.example/ expect deny-needs-login\n"
        "spawn request 10.0.0.12 http://b.example/ expect deny-needs-login\n"
        "spawn request 10.0.0.13 http://c.example/ expect deny-needs-login\n"
        "join\n"
        "login 10.0.0.11 alice wonderland 600 expect ok\n"
        "request 10.0.0.11 http://a.example/ expect allow\n"
    )
    transcript = run_scenario(parse_scenario(script))
    assert transcript.ok
    details = [e.detail for e in transcript.entries if e.action == "request"]
    assert details == ["http://a.example/", "http://b.example/",
                       "http://c.example/", "http://a.example/"]


def test_blacklist_scenario():
    script = (
        "clients 10.0.0.11\npolicy blacklist banned.example\n"
        "user alice password wonderland groups internet\n"
        "request 10.0.0.11 http://banned.example/ expect deny-blacklisted\n"
        "request 10.0.0.11 http://anything.example/ expect allow\n"
        "login 10.0.0.11 alice wonderland 600 expect ok\n"
        "request 10.0.0.11 http://banned.example/ expect allow\n"
    )
    assert run_scenario(parse_scenario(script)).ok


# -- latency statistics ---------------------------------------------------------------

def test_latency_stats_percentiles():
    samples = [i / 1000.0 for i in range(1, 101)]  # 1ms .. 100ms
    stats = LatencyStats.from_seconds(samples)
    assert stats.count == 100
    assert stats.p50_ms == pytest.approx(50.5)
    assert stats.p95_ms == pytest.approx(95.0)  # ceil(0.95*100) = 95th value
    assert stats.max_ms == pytest.approx(100.0)
    tiny = LatencyStats.from_seconds([0.002])
    assert tiny.p50_ms == tiny.p95_ms == tiny.max_ms == pytest.approx(2.0)


def test_bench_report_overheads_and_format():
    direct = LatencyStats(count=10, p50_ms=1.0, p95_ms=2.0, max_ms=3.0)
    proxied = LatencyStats(count=10, p50_ms=2.5, p95_ms=4.0, max_ms=9.0)
    report = BenchReport(clients=2, requests_per_client=5, warm_cache=True,
                         direct=direct, proxied=proxied, elapsed_s=1.25)
    assert report.overhead_p50_ms == pytest.approx(1.5)
    assert report.overhead_p95_ms == pytest.approx(2.0)
    text = report.format()
    assert "2 clients x 5 requests, warm auth cache" in text
    assert "+  1.500 ms".replace(" ", "") in text.replace(" ", "")
    assert "wall time 1.25 s" in text


def test_tiny_bench_run_produces_samples():
    report = bench_latency(clients=2, requests_per_client=5, body_bytes=256)
    assert report.direct.count == 10
    assert report.proxied.count == 10
    assert report.elapsed_s > 0
    assert report.proxied.p50_ms > 0
    # Sanity only: the proxied path does strictly more work than direct.
    assert report.proxied.p50_ms + 0.5 > report.direct.p50_ms
