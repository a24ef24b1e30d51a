"""In-process testbench: simulated client IPs, both gateway topologies, a
deterministic stub origin, a line-based scenario script runner, and a latency
micro-benchmark comparing proxied against direct requests.

Topologies model where the proxy sits relative to the gateway. With the proxy
on the gateway (type1) or policy-routed to a separate host (type2) the client
source addresses survive, and the two run identically. type2-nat-broken models
the misconfiguration where the gateway NATs traffic before forwarding: every
connection appears to come from the gateway address, so one login opens the
gate for everyone. That failure is the point of the topology, not a bug here.
"""

from __future__ import annotations

import enum
import functools
import hashlib
import math
import re
import socket
import statistics
import threading
import time
from dataclasses import dataclass
from typing import BinaryIO, Callable, Iterable

from .acl import AclEngine, AclPolicy, PolicyMode
from .auth import AuthApp, AuthServiceSettings
from .clock import ClockFn, ManualClock
from .credentials import FlatFileBackend, format_credential_line
from .httpmsg import (
    Headers,
    parse_request_head,
    parse_response_head,
    read_head_lines,
    wants_keep_alive,
    write_response,
)
from .netio import Connection, TcpServer, pair_connection
from .proxy import AccessRecord, ProxyService
from .store import InMemorySessionStore, canonical_ipv4

LOGIN_PORT = 8080
SCENARIO_HASH_ITERATIONS = 10_000  # simulated users don't need slow hashes


# ---------------------------------------------------------------------------
# Topologies

class TopologyKind(enum.Enum):
    TYPE1 = "type1"
    TYPE2 = "type2"
    TYPE2_NAT_BROKEN = "type2-nat-broken"


@dataclass(frozen=True)
class Topology:
    kind: TopologyKind
    client_ips: tuple[str, ...]
    gateway_ip: str = "10.0.0.1"

    def __post_init__(self) -> None:
        clients = tuple(canonical_ipv4(ip) for ip in self.client_ips)
        gateway = canonical_ipv4(self.gateway_ip)
        if len(set(clients)) != len(clients):
            raise ValueError("client IPs must be unique")
        if gateway in clients:
            raise ValueError("gateway IP must be distinct from client IPs")
        object.__setattr__(self, "client_ips", clients)
        object.__setattr__(self, "gateway_ip", gateway)

    def observed_ip(self, client_ip: str) -> str:
        """The source address the services actually see for this client."""
        if self.kind is TopologyKind.TYPE2_NAT_BROKEN:
            return self.gateway_ip
        return client_ip


# ---------------------------------------------------------------------------
# Stub origin

def deterministic_bytes(seed: str, length: int) -> bytes:
    """Reproducible pseudo-random bytes so relayed bodies are byte-checkable."""
    out = bytearray()
    key = seed.encode("utf-8")
    counter = 0
    while len(out) < length:
        out += hashlib.sha256(key + counter.to_bytes(8, "big")).digest()
        counter += 1
    return bytes(out[:length])


class StubOrigin:
    """Origin server with deterministic bodies keyed by (host, path).

    Routes:
      /bytes/N        exactly N deterministic bytes
      /chunked/N/M    chunked response: N chunks of M bytes
      /status/NNN     empty-ish response with that status code
      anything else   short text naming the host and path
    Counts accepted connections and records (host, path) per request, which is
    how tests prove denied requests never touch the origin.
    """

    def __init__(self, *, io_timeout: float = 30.0) -> None:
        self._server = TcpServer(self._handle, io_timeout=io_timeout, name="stub-origin")
        self._lock = threading.Lock()
        self.connections = 0
        self.requests: list[tuple[str, str]] = []

    def start(self) -> "StubOrigin":
        self._server.start()
        return self

    def stop(self) -> None:
        self._server.stop()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.address

    def request_count(self) -> int:
        with self._lock:
            return len(self.requests)

    @staticmethod
    @functools.lru_cache(maxsize=128)
    def body_for(host: str, path: str) -> bytes:
        m = re.fullmatch(r"/bytes/(\d+)", path)
        if m:
            return deterministic_bytes(f"{host}{path}", int(m.group(1)))
        digest = hashlib.sha256(f"{host}{path}".encode("utf-8")).hexdigest()
        return f"stub origin body for http://{host}{path}\ndigest {digest}\n".encode("utf-8")

    def _handle(self, conn: Connection) -> None:
        with self._lock:
            self.connections += 1
        try:
            while True:
                lines = read_head_lines(conn.rfile)
                if lines is None:
                    return
                method, target, version, headers = parse_request_head(lines)
                host = (headers.get("Host") or "").split(":", 1)[0].lower()
                path = target.partition("?")[0]
                with self._lock:
                    self.requests.append((host, path))
                length = int(headers.get("Content-Length") or 0)
                while length > 0:
                    piece = conn.rfile.read(min(length, 65536))
                    if not piece:
                        return
                    length -= len(piece)
                keep = wants_keep_alive(version, headers)
                head_only = method == "HEAD"
                chunked = re.fullmatch(r"/chunked/(\d+)/(\d+)", path)
                status_m = re.fullmatch(r"/status/(\d{3})", path)
                if chunked:
                    self._write_chunked(conn, target, host, int(chunked.group(1)),
                                        int(chunked.group(2)), keep, head_only)
                elif status_m:
                    code = int(status_m.group(1))
                    # 204/304 must not carry a body or reuse breaks downstream.
                    payload = b"" if code in (204, 304) else b"status as requested\n"
                    write_response(conn.wfile, code, [("Content-Type", "text/plain")],
                                   payload, head_only=head_only, close=not keep)
                else:
                    write_response(conn.wfile, 200,
                                   [("Content-Type", "application/octet-stream")],
                                   self.body_for(host, path), head_only=head_only,
                                   close=not keep)
                if not keep:
                    return
        except (OSError, ValueError):
            return
        finally:
            conn.close()

    def _write_chunked(self, conn: Connection, target: str, host: str, count: int,
                       size: int, keep: bool, head_only: bool) -> None:
        head = (
            "HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n"
            "Content-Type: application/octet-stream\r\n"
            + ("" if keep else "Connection: close\r\n") + "\r\n"
        )
        conn.wfile.write(head.encode("latin-1"))
        if not head_only:
            payload = deterministic_bytes(f"{host}{target}", count * size)
            for i in range(count):
                chunk = payload[i * size:(i + 1) * size]
                conn.wfile.write(f"{len(chunk):x}\r\n".encode("latin-1") + chunk + b"\r\n")
            conn.wfile.write(b"0\r\n\r\n")
        conn.wfile.flush()

    def chunked_payload(self, host: str, target: str, count: int, size: int) -> bytes:
        return deterministic_bytes(f"{host}{target}", count * size)


# ---------------------------------------------------------------------------
# In-process HTTP client

@dataclass
class HarnessResponse:
    status: int
    reason: str
    headers: Headers
    body: bytes

    @property
    def verdict(self) -> str:
        """How the proxy judged the request; relayed responses count as allow."""
        return self.headers.get("X-Deny-Reason") or "allow"


def split_http_url(url: str) -> tuple[str, int, str]:
    m = re.fullmatch(r"http://([^/:?#]+)(?::(\d+))?(/[^#]*)?", url)
    if not m:
        raise ValueError(f"expected a plain http:// URL, got {url!r}")
    host = m.group(1).lower()
    port = int(m.group(2) or 80)
    path = m.group(3) or "/"
    return host, port, path


def read_http_response(rfile: BinaryIO, *, head_only: bool = False) -> HarnessResponse:
    lines = read_head_lines(rfile)
    if lines is None:
        raise OSError("connection closed before a response arrived")
    _, status, reason, headers = parse_response_head(lines)
    body = b""
    if not head_only and status not in (204, 304) and not (100 <= status <= 199):
        if "chunked" in (headers.get("Transfer-Encoding") or "").lower():
            body = _read_chunked(rfile)
        elif headers.get("Content-Length") is not None:
            want = int(headers.get("Content-Length") or 0)
            parts = []
            while want > 0:
                piece = rfile.read(min(want, 65536))
                if not piece:
                    raise OSError("response body ended early")
                parts.append(piece)
                want -= len(piece)
            body = b"".join(parts)
        else:
            body = rfile.read()
    return HarnessResponse(status=status, reason=reason, headers=headers, body=body)


def _read_chunked(rfile: BinaryIO) -> bytes:
    out = bytearray()
    while True:
        size_line = rfile.readline(16384)
        if not size_line.endswith(b"\n"):
            raise OSError("bad chunk size line")
        size = int(size_line.split(b";", 1)[0].strip(), 16)
        if size == 0:
            while True:
                trailer = rfile.readline(16384)
                if trailer in (b"\r\n", b"\n", b""):
                    return bytes(out)
        piece = rfile.read(size)
        if len(piece) != size:
            raise OSError("chunk ended early")
        out += piece
        rfile.read(2)


class HttpChannel:
    """Client half of one keep-alive connection to an in-process service,
    carrying an arbitrary simulated source address."""

    def __init__(self, handler: Callable[[Connection], None], client_ip: str,
                 *, timeout: float = 30.0) -> None:
        client_sock, server_conn = pair_connection(client_ip, timeout=timeout)
        self._sock = client_sock
        self.rfile = client_sock.makefile("rb")
        self.wfile = client_sock.makefile("wb")
        self._thread = threading.Thread(
            target=handler, args=(server_conn,), name=f"svc-{client_ip}", daemon=True
        )
        self._thread.start()

    def send_request(self, method: str, url: str, *, headers: Iterable[tuple[str, str]] = (),
                     body: bytes = b"") -> None:
        host, port, path = split_http_url(url)
        netloc = host if port == 80 else f"{host}:{port}"
        # Origin-form target plus Host header: exactly what an intercepted
        # client sends when it believes it is talking to the origin.
        out = [f"{method} {path} HTTP/1.1\r\n", f"Host: {netloc}\r\n"]
        out.extend(f"{k}: {v}\r\n" for k, v in headers)
        if body or method in ("POST", "PUT"):
            out.append(f"Content-Length: {len(body)}\r\n")
        out.append("\r\n")
        self.wfile.write("".join(out).encode("latin-1") + body)
        self.wfile.flush()

    def read_response(self, *, head_only: bool = False) -> HarnessResponse:
        return read_http_response(self.rfile, head_only=head_only)

    def request(self, method: str, url: str, *, headers: Iterable[tuple[str, str]] = (),
                body: bytes = b"") -> HarnessResponse:
        self.send_request(method, url, headers=headers, body=body)
        return self.read_response(head_only=(method == "HEAD"))

    def close(self) -> None:
        for closer in (self.rfile.close, self.wfile.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass
        self._thread.join(timeout=5.0)


# ---------------------------------------------------------------------------
# Testbed

@dataclass(frozen=True)
class UserSpec:
    name: str
    password: str
    groups: tuple[str, ...] = ("internet",)


def build_backend(users: Iterable[UserSpec]) -> FlatFileBackend:
    lines = [
        format_credential_line(u.name, u.password, u.groups,
                               iterations=SCENARIO_HASH_ITERATIONS)
        for u in users
    ]
    return FlatFileBackend.parse("\n".join(lines) + "\n", source="<testbed>")


class Testbed:
    """Everything wired together in one process: store, engine, proxy, login
    service, and a stub origin every hostname resolves to."""

    def __init__(
        self,
        topology: Topology,
        policy: AclPolicy,
        backend: FlatFileBackend,
        *,
        clock: ClockFn | None = None,
        max_duration: float = 86400.0,
        duration_choices: tuple[int, ...] = (3600, 14400, 28800),
        inactivity: float | None = None,
        io_timeout: float = 30.0,
    ) -> None:
        self.topology = topology
        self.clock: ClockFn = clock if clock is not None else ManualClock()
        self.store = InMemorySessionStore(inactivity=inactivity)
        self.engine = AclEngine(policy, self.store)
        self.origin = StubOrigin(io_timeout=io_timeout).start()
        self.login_url = f"http://{topology.gateway_ip}:{LOGIN_PORT}/login"
        self._records_lock = threading.Lock()
        self.access_records: list[AccessRecord] = []
        self.proxy = ProxyService(
            self.engine,
            self.login_url,
            clock=self.clock,
            upstream_timeout=io_timeout,
            resolver=lambda host, port: self.origin.address,
            access_sink=self._record_access,
        )
        self.auth = AuthApp(
            self.store,
            backend,
            AuthServiceSettings(max_duration=max_duration, duration_choices=duration_choices),
            clock=self.clock,
            on_session_change=self.engine.invalidate_ip,
        )
        self._io_timeout = io_timeout

    def _record_access(self, record: AccessRecord) -> None:
        with self._records_lock:
            self.access_records.append(record)

    def close(self) -> None:
        self.proxy.close()
        self.origin.stop()

    def __enter__(self) -> "Testbed":
        return self

    def __exit__(self, *exc_info: object) -> None:
        self.close()

    # -- client actions ------------------------------------------------------

    def open_proxy_channel(self, client_ip: str) -> HttpChannel:
        return HttpChannel(self.proxy.handle_connection,
                           self.topology.observed_ip(client_ip),
                           timeout=self._io_timeout)

    def open_auth_channel(self, client_ip: str) -> HttpChannel:
        return HttpChannel(self.auth.handle_connection,
                           self.topology.observed_ip(client_ip),
                           timeout=self._io_timeout)

    def proxy_request(self, client_ip: str, url: str, *, method: str = "GET",
                      headers: Iterable[tuple[str, str]] = (),
                      body: bytes = b"") -> HarnessResponse:
        channel = self.open_proxy_channel(client_ip)
        try:
            return channel.request(method, url, headers=headers, body=body)
        finally:
            channel.close()

    def _auth_request(self, client_ip: str, method: str, path: str,
                      body: bytes = b"") -> HarnessResponse:
        channel = self.open_auth_channel(client_ip)
        try:
            headers = [("Accept", "application/json")]
            if body:
                headers.append(("Content-Type", "application/x-www-form-urlencoded"))
            return channel.request(
                method, f"http://{self.topology.gateway_ip}:{LOGIN_PORT}{path}",
                headers=headers, body=body,
            )
        finally:
            channel.close()

    def login(self, client_ip: str, user: str, password: str,
              duration: float) -> HarnessResponse:
        from urllib.parse import urlencode

        form = urlencode({"user": user, "password": password, "duration": duration})
        return self._auth_request(client_ip, "POST", "/login", form.encode("utf-8"))

    def logout(self, client_ip: str) -> HarnessResponse:
        return self._auth_request(client_ip, "POST", "/logout")

    def status(self, client_ip: str) -> HarnessResponse:
        return self._auth_request(client_ip, "GET", "/status")


# ---------------------------------------------------------------------------
# Scenario scripts

class ScenarioError(ValueError):
    """A scenario file problem; the message carries the line number."""


_VERDICTS = {"allow", "deny-needs-login", "deny-blacklisted"}
_LOGIN_RESULTS = {"ok", "fail", "unavailable"}


@dataclass
class ScenarioAction:
    kind: str  # request | login | logout | advance | join
    line_no: int
    client: str | None = None
    url: str | None = None
    user: str | None = None
    password: str | None = None
    duration: float | None = None
    seconds: float | None = None
    expect: str | None = None
    expect_status: int | None = None
    spawn: bool = False


@dataclass(frozen=True)
class ScenarioSpec:
    topology: Topology
    policy: AclPolicy
    users: tuple[UserSpec, ...]
    actions: tuple[ScenarioAction, ...]
    clock_start: float = 1_000_000.0
    max_duration: float = 86400.0


def _expand_client_tokens(tokens: Iterable[str]) -> list[str]:
    ips: list[str] = []
    for tok in tokens:
        m = re.fullmatch(r"(\d+\.\d+\.\d+\.)(\d+)-(\d+)", tok)
        if m:
            lo, hi = int(m.group(2)), int(m.group(3))
            if lo > hi:
                raise ValueError(f"bad IP range {tok!r}")
            ips.extend(f"{m.group(1)}{i}" for i in range(lo, hi + 1))
        else:
            ips.append(tok)
    return ips


def parse_scenario(text: str, source: str = "<scenario>") -> ScenarioSpec:
    """Line-based scenario grammar; see the README for the full reference.

    Directives (before any action): topology, gateway, clients, policy,
    auth-group, cache-ttl, clock, max-duration, user.
    Actions: request/login/logout/advance, optionally prefixed with `spawn`
    to run concurrently until the next `join` (or non-spawn action).
    """
    kind = TopologyKind.TYPE1
    gateway = "10.0.0.1"
    clients: list[str] = []
    mode: PolicyMode | None = None
    domains: tuple[str, ...] = ()
    auth_group = "internet"
    cache_ttl = 300.0
    clock_start = 1_000_000.0
    max_duration = 86400.0
    users: list[UserSpec] = []
    actions: list[ScenarioAction] = []

    def err(line_no: int, message: str) -> ScenarioError:
        return ScenarioError(f"{source}:{line_no}: {message}")

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        word = tokens[0].lower()
        is_directive = word in {"topology", "gateway", "clients", "policy", "auth-group",
                                "cache-ttl", "clock", "max-duration", "user"}
        if is_directive and actions:
            raise err(line_no, f"directive {word!r} must appear before the first action")
        try:
            if word == "topology":
                kind = TopologyKind(tokens[1].lower())
            elif word == "gateway":
                gateway = tokens[1]
            elif word == "clients":
                clients.extend(_expand_client_tokens(tokens[1:]))
            elif word == "policy":
                mode = PolicyMode(tokens[1].lower())
                domains = domains + tuple(tokens[2:])
            elif word == "auth-group":
                auth_group = tokens[1]
            elif word == "cache-ttl":
                cache_ttl = float(tokens[1])
            elif word == "clock":
                clock_start = float(tokens[1])
            elif word == "max-duration":
                max_duration = float(tokens[1])
            elif word == "user":
                # user NAME password PW groups g1,g2
                if len(tokens) != 6 or tokens[2] != "password" or tokens[4] != "groups":
                    raise err(line_no, "expected: user NAME password PW groups g1,g2")
                users.append(UserSpec(tokens[1], tokens[3],
                                      tuple(g for g in tokens[5].split(",") if g)))
            elif word in ("request", "login", "logout", "advance", "join", "spawn"):
                actions.append(_parse_action(tokens, line_no, err))
            else:
                raise err(line_no, f"unknown word {word!r}")
        except ScenarioError:
            raise
        except (IndexError, ValueError) as exc:
            raise err(line_no, f"cannot parse: {exc}") from None

    if mode is None:
        raise ScenarioError(f"{source}: missing `policy` directive")
    if not clients:
        raise ScenarioError(f"{source}: missing `clients` directive")
    topology = Topology(kind=kind, client_ips=tuple(clients), gateway_ip=gateway)
    known = set(topology.client_ips)
    for action in actions:
        if action.client is not None and action.client not in known:
            raise ScenarioError(
                f"{source}:{action.line_no}: unknown client {action.client!r}"
            )
    policy = AclPolicy(mode=mode, domains=domains, auth_group=auth_group,
                       auth_cache_ttl=cache_ttl)
    return ScenarioSpec(topology=topology, policy=policy, users=tuple(users),
                        actions=tuple(actions), clock_start=clock_start,
                        max_duration=max_duration)


def _parse_action(tokens: list[str], line_no: int,
                  err: Callable[[int, str], ScenarioError]) -> ScenarioAction:
    spawn = False
    if tokens[0].lower() == "spawn":
        spawn = True
        tokens = tokens[1:]
        if not tokens:
            raise err(line_no, "spawn needs an action")
    word = tokens[0].lower()
    if word == "join":
        if spawn or len(tokens) != 1:
            raise err(line_no, "join takes no arguments")
        return ScenarioAction(kind="join", line_no=line_no)
    if word == "advance":
        if len(tokens) != 2:
            raise err(line_no, "expected: advance SECONDS")
        return ScenarioAction(kind="advance", line_no=line_no,
                              seconds=float(tokens[1]), spawn=False)
    if word == "request":
        if len(tokens) < 3:
            raise err(line_no, "expected: request CLIENT URL [expect VERDICT] [status N]")
        action = ScenarioAction(kind="request", line_no=line_no, client=tokens[1],
                                url=tokens[2], spawn=spawn)
        rest = tokens[3:]
        while rest:
            if rest[0] == "expect" and len(rest) >= 2:
                if rest[1] not in _VERDICTS:
                    raise err(line_no, f"expect must be one of {sorted(_VERDICTS)}")
                action.expect = rest[1]
                rest = rest[2:]
            elif rest[0] == "status" and len(rest) >= 2:
                action.expect_status = int(rest[1])
                rest = rest[2:]
            else:
                raise err(line_no, f"unexpected token {rest[0]!r}")
        return action
    if word == "login":
        if len(tokens) < 5:
            raise err(line_no, "expected: login CLIENT USER PASSWORD DURATION [expect ok|fail|unavailable]")
        action = ScenarioAction(kind="login", line_no=line_no, client=tokens[1],
                                user=tokens[2], password=tokens[3],
                                duration=float(tokens[4]), spawn=spawn)
        rest = tokens[5:]
        if rest:
            if len(rest) != 2 or rest[0] != "expect" or rest[1] not in _LOGIN_RESULTS:
                raise err(line_no, f"expect must be one of {sorted(_LOGIN_RESULTS)}")
            action.expect = rest[1]
        return action
    if word == "logout":
        if len(tokens) != 2:
            raise err(line_no, "expected: logout CLIENT")
        return ScenarioAction(kind="logout", line_no=line_no, client=tokens[1], spawn=spawn)
    raise err(line_no, f"unknown action {word!r}")


@dataclass
class TranscriptEntry:
    time: float
    client_ip: str
    action: str
    detail: str
    status: int | None = None
    verdict: str | None = None
    expected: str | None = None
    expected_status: int | None = None
    passed: bool | None = None
    error: str | None = None

    def format(self) -> str:
        status = "-" if self.status is None else str(self.status)
        verdict = self.verdict or "-"
        line = (f"[t={self.time:.0f}] {self.client_ip:<15} {self.action:<7} "
                f"{self.detail} -> {status} {verdict}")
        if self.error:
            line += f" ERROR: {self.error}"
        elif self.passed is True:
            line += " [ok]"
        elif self.passed is False:
            line += f" [FAIL: expected {self.expected or self.expected_status}]"
        return line


@dataclass(frozen=True)
class ScenarioTranscript:
    entries: tuple[TranscriptEntry, ...]

    def verdicts(self) -> tuple[str, ...]:
        """Verdict sequence for request actions, in script order."""
        return tuple(e.verdict or "?" for e in self.entries if e.action == "request")

    def failures(self) -> tuple[TranscriptEntry, ...]:
        return tuple(e for e in self.entries if e.passed is False or e.error)

    @property
    def ok(self) -> bool:
        return not self.failures()

    def format(self) -> str:
        lines = [e.format() for e in self.entries]
        checked = sum(1 for e in self.entries if e.passed is not None)
        failed = len(self.failures())
        lines.append(f"# {len(self.entries)} actions, {checked} checked, {failed} failed")
        return "\n".join(lines)


def build_testbed(spec: ScenarioSpec) -> Testbed:
    return Testbed(
        spec.topology,
        spec.policy,
        build_backend(spec.users),
        clock=ManualClock(spec.clock_start),
        max_duration=spec.max_duration,
    )


def run_scenario(spec: ScenarioSpec) -> ScenarioTranscript:
    """Execute the script. Spawned actions run concurrently and are joined by
    the next non-spawn action (or an explicit `join`); transcript order is
    script order regardless of completion order."""
    bed = build_testbed(spec)
    entries: list[TranscriptEntry] = []
    pending: list[threading.Thread] = []

    def join_pending() -> None:
        for thread in pending:
            thread.join()
        pending.clear()

    try:
        for action in spec.actions:
            if action.kind == "join":
                join_pending()
                continue
            if not action.spawn:
                join_pending()
            entry = TranscriptEntry(
                time=bed.clock(),
                client_ip=action.client or "-",
                action=action.kind,
                detail=_describe_action(action),
                expected=action.expect,
                expected_status=action.expect_status,
            )
            entries.append(entry)
            if action.spawn:
                thread = threading.Thread(target=_execute_action, args=(bed, action, entry),
                                          daemon=True)
                thread.start()
                pending.append(thread)
            else:
                _execute_action(bed, action, entry)
        join_pending()
    finally:
        bed.close()
    return ScenarioTranscript(entries=tuple(entries))


def _describe_action(action: ScenarioAction) -> str:
    if action.kind == "request":
        return action.url or ""
    if action.kind == "login":
        return f"{action.user} for {action.duration:g}s"
    if action.kind == "advance":
        return f"+{action.seconds:g}s"
    return ""


def _execute_action(bed: Testbed, action: ScenarioAction, entry: TranscriptEntry) -> None:
    try:
        if action.kind == "request":
            assert action.client is not None and action.url is not None
            response = bed.proxy_request(action.client, action.url)
            entry.status = response.status
            entry.verdict = response.verdict
        elif action.kind == "login":
            assert action.client is not None
            response = bed.login(action.client, action.user or "",
                                 action.password or "", action.duration or 0)
            entry.status = response.status
            entry.verdict = {200: "ok", 401: "fail", 503: "unavailable"}.get(
                response.status, f"http-{response.status}")
        elif action.kind == "logout":
            assert action.client is not None
            response = bed.logout(action.client)
            entry.status = response.status
            entry.verdict = "ok" if response.status == 200 else f"http-{response.status}"
        elif action.kind == "advance":
            clock = bed.clock
            if not isinstance(clock, ManualClock):
                raise ScenarioError("advance requires the scenario's manual clock")
            clock.advance(action.seconds or 0)
            entry.verdict = "ok"
        else:  # pragma: no cover - parser rejects unknown kinds
            raise ScenarioError(f"unhandled action {action.kind!r}")
    except Exception as exc:  # noqa: BLE001 - transcript carries the failure
        entry.error = f"{type(exc).__name__}: {exc}"
        entry.passed = False
        return
    checks: list[bool] = []
    if entry.expected is not None:
        checks.append(entry.verdict == entry.expected)
    if entry.expected_status is not None:
        checks.append(entry.status == entry.expected_status)
    entry.passed = all(checks) if checks else None


# ---------------------------------------------------------------------------
# Latency bench

@dataclass(frozen=True)
class LatencyStats:
    count: int
    p50_ms: float
    p95_ms: float
    max_ms: float

    @classmethod
    def from_seconds(cls, samples: list[float]) -> "LatencyStats":
        ordered = sorted(samples)
        return cls(
            count=len(ordered),
            p50_ms=statistics.median(ordered) * 1000.0,
            p95_ms=_percentile(ordered, 0.95) * 1000.0,
            max_ms=ordered[-1] * 1000.0,
        )


def _percentile(ordered: list[float], q: float) -> float:
    if not ordered:
        raise ValueError("no samples")
    index = max(0, min(len(ordered) - 1, math.ceil(q * len(ordered)) - 1))
    return ordered[index]


@dataclass(frozen=True)
class BenchReport:
    clients: int
    requests_per_client: int
    warm_cache: bool
    direct: LatencyStats
    proxied: LatencyStats
    elapsed_s: float

    @property
    def overhead_p50_ms(self) -> float:
        return self.proxied.p50_ms - self.direct.p50_ms

    @property
    def overhead_p95_ms(self) -> float:
        return self.proxied.p95_ms - self.direct.p95_ms

    def format(self) -> str:
        cache = "warm" if self.warm_cache else "cold"
        return "\n".join([
            f"latency bench: {self.clients} clients x {self.requests_per_client} "
            f"requests, {cache} auth cache",
            f"  direct:  p50 {self.direct.p50_ms:7.3f} ms   p95 {self.direct.p95_ms:7.3f} ms"
            f"   max {self.direct.max_ms:7.3f} ms",
            f"  proxied: p50 {self.proxied.p50_ms:7.3f} ms   p95 {self.proxied.p95_ms:7.3f} ms"
            f"   max {self.proxied.max_ms:7.3f} ms",
            f"  added:   p50 {self.overhead_p50_ms:+7.3f} ms   p95 {self.overhead_p95_ms:+7.3f} ms",
            f"  wall time {self.elapsed_s:.2f} s",
        ])


def bench_latency(clients: int = 25, requests_per_client: int = 200,
                  warm_cache: bool = True, *, body_bytes: int = 2048) -> BenchReport:
    """Measure per-request wall time through the proxy for authenticated
    clients against the stub origin, and the same requests sent directly.

    warm_cache=True keeps the 300 s auth cache so the store is consulted once
    per client; warm_cache=False disables caching so every request pays the
    store lookup. Uses the real clock: latency is meaningless on a fake one.
    """
    started = time.perf_counter()
    ips = tuple(f"10.9.{1 + i // 250}.{1 + i % 250}" for i in range(clients))
    topology = Topology(kind=TopologyKind.TYPE1, client_ips=ips, gateway_ip="10.9.0.254")
    policy = AclPolicy(mode=PolicyMode.WHITELIST, domains=(), auth_group="internet",
                       auth_cache_ttl=300.0 if warm_cache else 0.0)
    backend = build_backend([UserSpec("bench", "bench-password", ("internet",))])
    bed = Testbed(topology, policy, backend, clock=time.time)
    url = f"http://bench.internal/bytes/{body_bytes}"
    try:
        for ip in ips:
            response = bed.login(ip, "bench", "bench-password", 3600)
            if response.status != 200:
                raise RuntimeError(f"bench login failed for {ip}: {response.status}")

        # Both workers send identical pre-built bytes and share the response
        # reader, so the comparison isolates the proxy hop itself.
        head = (f"GET /bytes/{body_bytes} HTTP/1.1\r\n"
                "Host: bench.internal\r\n\r\n").encode("latin-1")

        def proxied_worker(ip: str, out: list[float]) -> None:
            channel = bed.open_proxy_channel(ip)
            try:
                channel.wfile.write(head)
                channel.wfile.flush()
                read_http_response(channel.rfile)  # warm-up: connection + cache entry
                for _ in range(requests_per_client):
                    t0 = time.perf_counter()
                    channel.wfile.write(head)
                    channel.wfile.flush()
                    response = read_http_response(channel.rfile)
                    out.append(time.perf_counter() - t0)
                    if response.status != 200:
                        raise RuntimeError(f"proxied request failed: {response.status}")
            finally:
                channel.close()

        def direct_worker(out: list[float]) -> None:
            sock = socket.create_connection(bed.origin.address, timeout=30.0)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            rfile = sock.makefile("rb")
            wfile = sock.makefile("wb")
            try:
                wfile.write(head)
                wfile.flush()
                read_http_response(rfile)  # warm-up
                for _ in range(requests_per_client):
                    t0 = time.perf_counter()
                    wfile.write(head)
                    wfile.flush()
                    response = read_http_response(rfile)
                    out.append(time.perf_counter() - t0)
                    if response.status != 200:
                        raise RuntimeError(f"direct request failed: {response.status}")
            finally:
                rfile.close()
                wfile.close()
                sock.close()

        direct_samples = _run_workers([direct_worker for _ in ips])
        proxied_samples = _run_workers(
            [lambda out, ip=ip: proxied_worker(ip, out) for ip in ips]
        )
    finally:
        bed.close()
    return BenchReport(
        clients=clients,
        requests_per_client=requests_per_client,
        warm_cache=warm_cache,
        direct=LatencyStats.from_seconds(direct_samples),
        proxied=LatencyStats.from_seconds(proxied_samples),
        elapsed_s=time.perf_counter() - started,
    )


def _run_workers(workers: list[Callable[[list[float]], None]]) -> list[float]:
    buckets: list[list[float]] = [[] for _ in workers]
    errors: list[BaseException] = []

    def run(worker: Callable[[list[float]], None], bucket: list[float]) -> None:
        try:
            worker(bucket)
        except BaseException as exc:  # noqa: BLE001 - re-raised below
            errors.append(exc)

    threads = [
        threading.Thread(target=run, args=(worker, bucket), daemon=True)
        for worker, bucket in zip(workers, buckets)
    ]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    if errors:
        raise errors[0]
    return [sample for bucket in buckets for sample in bucket]
