"""The intercepting HTTP proxy: reconstructs the absolute URI from the Host
header, judges each request by its client source IP, and either streams it
from the origin or serves a denial page linking to the login portal.

Clients need no configuration: requests arrive exactly as they would at the
origin (origin-form target plus Host header) and the source address is the
only identity used.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass
from html import escape
from typing import BinaryIO, Callable
from urllib.parse import quote, urlsplit

from .acl import AclEngine, Action, Verdict
from .clock import ClockFn, system_clock
from .httpmsg import (
    MAX_HEAD_BYTES,
    Headers,
    HeadTooLargeError,
    MessageError,
    RequestSummary,
    parse_request_head,
    parse_response_head,
    read_head_lines,
    strip_hop_by_hop,
    summarize_request,
    wants_keep_alive,
    write_response,
)
from .netio import Connection

log = logging.getLogger(__name__)
access_log = logging.getLogger("ipgate.access")

RELAY_CHUNK = 64 * 1024
DENY_DRAIN_LIMIT = 1024 * 1024
VIA_TOKEN = "ipgate"

Resolver = Callable[[str, int], tuple[str, int]]


@dataclass(frozen=True)
class AccessRecord:
    timestamp: float
    client_ip: str
    verdict: str
    user: str | None
    method: str
    uri: str
    status: int
    body_bytes: int

    def format(self) -> str:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(self.timestamp))
        return (
            f"{stamp} {self.client_ip} {self.verdict} {self.user or '-'} "
            f"{self.method} {self.uri} {self.status} {self.body_bytes}"
        )


class RelayStats:
    """Relay instrumentation: how much body data the proxy ever held at once."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.max_buffered = 0
        self.bytes_relayed = 0

    def note(self, chunk_len: int) -> None:
        with self._lock:
            if chunk_len > self.max_buffered:
                self.max_buffered = chunk_len
            self.bytes_relayed += chunk_len


class _RelayAborted(Exception):
    """The exchange died after the response head was committed; just drop the link."""


class _Upstream:
    """One origin connection: raw socket for writes, buffered reader for
    responses. The reader must stay with the socket for its whole life, since
    it may hold read-ahead bytes."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.reader: BinaryIO = sock.makefile("rb")

    def write(self, data: bytes) -> int:
        self.sock.sendall(data)
        return len(data)

    def flush(self) -> None:
        pass

    def close(self) -> None:
        for closer in (self.reader.close, self.sock.close):
            try:
                closer()
            except OSError:
                pass


class UpstreamPool:
    """Idle keep-alive origin connections, keyed by resolved address.

    Reuse skips the TCP handshake on the hot path; a pooled connection may
    have been closed by the origin in the meantime, which callers handle by
    retrying on a fresh one (only safe for requests without a body).
    """

    def __init__(self, limit_per_key: int = 64) -> None:
        self.limit_per_key = limit_per_key
        self._lock = threading.Lock()
        self._idle: dict[tuple[str, int], list[_Upstream]] = {}

    def get(self, addr: tuple[str, int]) -> _Upstream | None:
        with self._lock:
            stack = self._idle.get(addr)
            if stack:
                return stack.pop()
        return None

    def put(self, addr: tuple[str, int], upstream: _Upstream) -> None:
        with self._lock:
            stack = self._idle.setdefault(addr, [])
            if len(stack) < self.limit_per_key:
                stack.append(upstream)
                return
        upstream.close()

    def close_all(self) -> None:
        with self._lock:
            doomed = [u for stack in self._idle.values() for u in stack]
            self._idle.clear()
        for upstream in doomed:
            upstream.close()


def render_deny_page(verdict: Verdict, request: RequestSummary, login_url: str) -> bytes:
    """403 body for a denied request; needs-login pages carry the portal link
    with the original URL as the return-to parameter."""
    blocked = escape(request.absolute_uri)
    if verdict.action is Action.DENY_NEEDS_LOGIN:
        link = f"{login_url}?return={quote(request.absolute_uri, safe='')}"
        detail = (
            f"<p>The page <code>{blocked}</code> requires you to log in before "
            "web access is granted.</p>"
            f'<p><a href="{escape(link, quote=True)}">Log in to continue</a></p>'
        )
        title = "Authentication required"
    else:
        detail = (
            f"<p>The site <code>{escape(request.host)}</code> is blocked by your "
            "organization's access policy.</p>"
        )
        title = "Access blocked"
    return (
        "<!doctype html>\n<html>\n<head><meta charset=\"utf-8\">"
        f"<title>{title}</title></head>\n<body>\n<h1>{title}</h1>\n{detail}\n"
        "</body>\n</html>\n"
    ).encode("utf-8")


def _error_page(title: str, detail: str) -> bytes:
    return (
        "<!doctype html>\n<html>\n<head><meta charset=\"utf-8\">"
        f"<title>{escape(title)}</title></head>\n<body>\n<h1>{escape(title)}</h1>\n"
        f"<p>{escape(detail)}</p>\n</body>\n</html>\n"
    ).encode("utf-8")


def _default_resolver(host: str, port: int) -> tuple[str, int]:
    return host, port


class ProxyService:
    """Connection handler implementing the judged relay. One instance serves
    many concurrent connections; shared state lives in the engine, the
    upstream pool, and the stats."""

    def __init__(
        self,
        engine: AclEngine,
        login_url: str,
        *,
        clock: ClockFn = system_clock,
        upstream_timeout: float = 10.0,
        resolver: Resolver | None = None,
        access_sink: Callable[[AccessRecord], None] | None = None,
    ) -> None:
        self.engine = engine
        self.login_url = login_url
        self.clock = clock
        self.upstream_timeout = upstream_timeout
        self.resolver = resolver or _default_resolver
        self.access_sink = access_sink
        self.stats = RelayStats()
        self.pool = UpstreamPool()
        url = urlsplit(login_url)
        if url.scheme != "http" or not url.hostname:
            raise ValueError(f"login_url must be an absolute http URL, got {login_url!r}")
        self._login_host = url.hostname.lower()
        self._login_port = url.port or 80

    def close(self) -> None:
        self.pool.close_all()

    # -- logging ------------------------------------------------------------

    def _log(self, record: AccessRecord) -> None:
        if self.access_sink is not None:
            self.access_sink(record)
        if access_log.isEnabledFor(logging.INFO):
            access_log.info("%s", record.format())

    # -- connection loop ----------------------------------------------------

    def handle_connection(self, conn: Connection) -> None:
        try:
            while self._handle_one(conn):
                pass
        except (OSError, ValueError):
            pass
        finally:
            conn.close()

    def _handle_one(self, conn: Connection) -> bool:
        """Serve one request; returns True when the connection can take another."""
        try:
            lines = read_head_lines(conn.rfile, MAX_HEAD_BYTES)
        except HeadTooLargeError:
            write_response(conn.wfile, 431, [("Content-Type", "text/html; charset=utf-8")],
                           _error_page("Request too large", "The request head exceeds 64 KiB."),
                           close=True)
            return False
        except MessageError:
            self._bad_request(conn, "unreadable request")
            return False
        except OSError:
            return False
        if lines is None:
            return False
        try:
            method, target, version, headers = parse_request_head(lines)
        except MessageError as exc:
            self._bad_request(conn, str(exc))
            return False

        if method == "CONNECT":
            # No HTTPS interception: tunnelling is refused outright.
            write_response(
                conn.wfile, 403, [("Content-Type", "text/html; charset=utf-8")],
                _error_page("Tunnelling refused", "This proxy does not relay CONNECT tunnels."),
                close=True,
            )
            self._log(AccessRecord(self.clock(), conn.client_ip, "connect-refused", None,
                                   method, target, 403, 0))
            return False

        try:
            summary = summarize_request(conn.client_ip, method, target, version, headers)
        except MessageError as exc:
            self._bad_request(conn, str(exc))
            return False

        lengths = headers.get_all("Content-Length")
        if lengths:
            if headers.get_all("Transfer-Encoding"):
                self._bad_request(conn, "both Content-Length and Transfer-Encoding present")
                return False
            if len(lengths) > 1 or not lengths[0].isdigit():
                self._bad_request(conn, f"malformed Content-Length: {lengths[0]!r}")
                return False

        keep_alive = wants_keep_alive(version, headers)
        now = self.clock()
        if self._is_login_service(summary):
            verdict, verdict_label = Verdict(Action.ALLOW), "portal"
        else:
            verdict = self.engine.evaluate(summary, now)
            verdict_label = verdict.action.value

        if verdict.allowed:
            status, body_bytes, reusable = self._relay(conn, summary)
            keep_alive = keep_alive and reusable
        else:
            status, body_bytes = self._deny(conn, summary, verdict, keep_alive)
            if not self._drain_request_body(conn, summary.headers):
                keep_alive = False
        self._log(AccessRecord(now, conn.client_ip, verdict_label, verdict.user,
                               method, summary.absolute_uri, status, body_bytes))
        return keep_alive

    def _bad_request(self, conn: Connection, detail: str) -> None:
        try:
            write_response(conn.wfile, 400, [("Content-Type", "text/html; charset=utf-8")],
                           _error_page("Bad request", detail), close=True)
        except OSError:
            pass

    def _is_login_service(self, summary: RequestSummary) -> bool:
        # The portal must stay reachable in every policy mode, otherwise the
        # deny page would link to a page the policy denies.
        return summary.host == self._login_host and summary.port == self._login_port

    # -- deny path ------------------------------------------------------------

    def _deny(self, conn: Connection, summary: RequestSummary, verdict: Verdict,
              keep_alive: bool) -> tuple[int, int]:
        body = render_deny_page(verdict, summary, self.login_url)
        sent = write_response(
            conn.wfile, 403,
            [("Content-Type", "text/html; charset=utf-8"),
             ("X-Deny-Reason", verdict.action.value),
             ("Via", f"1.1 {VIA_TOKEN}")],
            body, head_only=(summary.method == "HEAD"), close=not keep_alive,
        )
        return 403, sent

    def _drain_request_body(self, conn: Connection, headers: Headers) -> bool:
        """Consume an unread request body so the next head starts cleanly.
        Returns False (caller closes) when there is too much to swallow."""
        length_text = headers.get("Content-Length")
        if length_text is None:
            if "chunked" in (headers.get("Transfer-Encoding") or "").lower():
                return False  # not worth decoding a body we refused
            return True
        remaining = int(length_text)
        if remaining > DENY_DRAIN_LIMIT:
            return False
        while remaining > 0:
            piece = conn.rfile.read(min(remaining, RELAY_CHUNK))
            if not piece:
                return False
            remaining -= len(piece)
        return True

    # -- allow path -----------------------------------------------------------

    @staticmethod
    def _request_has_body(headers: Headers) -> bool:
        if "chunked" in (headers.get("Transfer-Encoding") or "").lower():
            return True
        return int(headers.get("Content-Length") or 0) > 0

    def _connect_fresh(self, addr: tuple[str, int]) -> _Upstream:
        sock = socket.create_connection(addr, timeout=self.upstream_timeout)
        sock.settimeout(self.upstream_timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return _Upstream(sock)

    def _relay(self, conn: Connection, summary: RequestSummary) -> tuple[int, int, bool]:
        """Forward the request and stream the response back.

        Returns (status sent to client, body bytes relayed, connection reusable).
        """
        try:
            addr = self.resolver(summary.host, summary.port)
        except OSError as exc:
            return self._bad_gateway(conn, summary, f"cannot resolve {summary.host}: {exc}")
        has_body = self._request_has_body(summary.headers)

        # A pooled connection can be stale; requests without a body are safe
        # to resend on a fresh one. Requests with a body always get a fresh
        # connection, because the body stream cannot be replayed.
        exchange = None
        failure = "origin unreachable"
        sources = ("pooled", "fresh") if not has_body else ("fresh",)
        for source in sources:
            if source == "pooled":
                upstream = self.pool.get(addr)
                if upstream is None:
                    continue
            else:
                try:
                    upstream = self._connect_fresh(addr)
                except OSError as exc:
                    return self._bad_gateway(conn, summary,
                                             f"cannot connect to {summary.host}: {exc}")
            try:
                self._send_upstream_request(upstream, conn, summary)
                status, reason, resp_headers = self._read_response_head(upstream.reader)
            except (OSError, MessageError, HeadTooLargeError) as exc:
                upstream.close()
                failure = f"origin protocol error: {exc}"
                continue
            exchange = (upstream, status, reason, resp_headers)
            break
        if exchange is None:
            return self._bad_gateway(conn, summary, failure)

        upstream, status, reason, resp_headers = exchange
        try:
            result, reuse_upstream = self._stream_response(
                conn, summary, status, reason, resp_headers, upstream.reader)
        except _RelayAborted:
            upstream.close()
            return status, 0, False
        if reuse_upstream:
            self.pool.put(addr, upstream)
        else:
            upstream.close()
        return result

    @staticmethod
    def _read_response_head(up_r: BinaryIO) -> tuple[int, str, Headers]:
        reply = read_head_lines(up_r, MAX_HEAD_BYTES)
        if reply is None:
            raise MessageError("origin closed without responding")
        _, status, reason, resp_headers = parse_response_head(reply)
        while 100 <= status <= 199:
            reply = read_head_lines(up_r, MAX_HEAD_BYTES)
            if reply is None:
                raise MessageError("origin closed after interim response")
            _, status, reason, resp_headers = parse_response_head(reply)
        return status, reason, resp_headers

    def _bad_gateway(self, conn: Connection, summary: RequestSummary,
                     detail: str) -> tuple[int, int, bool]:
        log.warning("502 for %s %s: %s", summary.client_ip, summary.absolute_uri, detail)
        try:
            sent = write_response(
                conn.wfile, 502,
                [("Content-Type", "text/html; charset=utf-8"), ("Via", f"1.1 {VIA_TOKEN}")],
                _error_page("Bad gateway", "The origin server could not be reached."),
                head_only=(summary.method == "HEAD"),
            )
        except OSError:
            return 502, 0, False
        return 502, sent, True

    def _send_upstream_request(self, upstream: _Upstream, conn: Connection,
                               summary: RequestSummary) -> None:
        headers = strip_hop_by_hop(summary.headers)
        headers.remove("Expect")  # interim-response handshakes are not relayed
        if "Host" not in headers:
            netloc = summary.host if summary.port == 80 else f"{summary.host}:{summary.port}"
            headers.add("Host", netloc)
        headers.add("Via", f"1.1 {VIA_TOKEN}")
        head = [f"{summary.method} {summary.path} HTTP/1.1\r\n"]
        head.extend(f"{k}: {v}\r\n" for k, v in headers)
        head.append("\r\n")
        upstream.write("".join(head).encode("latin-1"))
        self._relay_request_body(conn, summary, upstream)

    def _relay_request_body(self, conn: Connection, summary: RequestSummary,
                            dst: _Upstream) -> None:
        headers = summary.headers
        if "chunked" in (headers.get("Transfer-Encoding") or "").lower():
            self._copy_chunked(conn.rfile, dst, dechunk=False)
            return
        length = int(headers.get("Content-Length") or 0)
        if length > 0:
            self._copy_exact(conn.rfile, dst, length)

    def _stream_response(self, conn: Connection, summary: RequestSummary, status: int,
                         reason: str, resp_headers: Headers,
                         up_r: BinaryIO) -> tuple[tuple[int, int, bool], bool]:
        """Send the origin's response to the client.

        Returns ((status, body bytes, client connection reusable), upstream reusable).
        """
        origin_wants_close = "close" in (resp_headers.get("Connection") or "").lower()
        out = strip_hop_by_hop(resp_headers)
        out.add("Via", f"1.1 {VIA_TOKEN}")
        chunked = "chunked" in (out.get("Transfer-Encoding") or "").lower()
        length_text = out.get("Content-Length")
        bodyless = summary.method == "HEAD" or status in (204, 304)
        dechunk = chunked and summary.version == "HTTP/1.0"

        if chunked and length_text is not None:
            out.remove("Content-Length")
            length_text = None
        length = None
        if not chunked and length_text is not None:
            try:
                length = int(length_text)
            except ValueError:
                return self._bad_gateway(conn, summary, "origin sent bad Content-Length"), False
        close_delimited = not bodyless and not chunked and length is None
        if dechunk:
            out.remove("Transfer-Encoding")
            close_delimited = True

        if close_delimited:
            out.remove("Connection")
            out.add("Connection", "close")

        head = [f"HTTP/1.1 {status} {reason}".rstrip() + "\r\n"]
        head.extend(f"{k}: {v}\r\n" for k, v in out)
        head.append("\r\n")
        sent = 0
        try:
            conn.wfile.write("".join(head).encode("latin-1"))
            if bodyless:
                pass
            elif chunked and not dechunk:
                sent = self._copy_chunked(up_r, conn.wfile, dechunk=False)
            elif dechunk:
                sent = self._copy_chunked(up_r, conn.wfile, dechunk=True)
            elif length is not None:
                sent = self._copy_exact(up_r, conn.wfile, length)
            else:
                sent = self._copy_until_eof(up_r, conn.wfile)
            conn.wfile.flush()
        except MessageError as exc:
            # Framing already committed to the client; nothing to do but hang up.
            log.warning("relay aborted mid-body for %s: %s", summary.absolute_uri, exc)
            raise _RelayAborted() from None
        except OSError as exc:
            log.warning("relay connection lost for %s: %s", summary.absolute_uri, exc)
            raise _RelayAborted() from None
        reuse_upstream = not close_delimited and not origin_wants_close
        return (status, sent, not close_delimited), reuse_upstream

    # -- byte pumps -----------------------------------------------------------

    def _read_piece(self, src: BinaryIO, limit: int) -> bytes:
        """One bounded read that returns as soon as any data is available."""
        read1 = getattr(src, "read1", None)
        if read1 is not None:
            return read1(min(limit, RELAY_CHUNK))
        return src.read(min(limit, RELAY_CHUNK))

    def _copy_exact(self, src: BinaryIO, dst, length: int) -> int:
        remaining = length
        while remaining > 0:
            piece = self._read_piece(src, remaining)
            if not piece:
                raise MessageError("body ended before its declared length")
            self.stats.note(len(piece))
            dst.write(piece)
            dst.flush()
            remaining -= len(piece)
        return length

    def _copy_until_eof(self, src: BinaryIO, dst) -> int:
        total = 0
        while True:
            piece = self._read_piece(src, RELAY_CHUNK)
            if not piece:
                return total
            self.stats.note(len(piece))
            dst.write(piece)
            dst.flush()
            total += len(piece)

    def _copy_chunked(self, src: BinaryIO, dst, *, dechunk: bool) -> int:
        """Relay chunked framing (or decode it when dechunk=True). Returns payload bytes."""
        payload = 0
        while True:
            size_line = src.readline(16384)
            if not size_line.endswith(b"\n"):
                raise MessageError("malformed chunk size line")
            try:
                size = int(size_line.split(b";", 1)[0].strip(), 16)
            except ValueError:
                raise MessageError(f"malformed chunk size: {size_line[:40]!r}") from None
            if not dechunk:
                dst.write(size_line)
            if size == 0:
                while True:
                    trailer = src.readline(16384)
                    if not trailer.endswith(b"\n"):
                        raise MessageError("malformed chunk trailer")
                    if not dechunk:
                        dst.write(trailer)
                    if trailer in (b"\r\n", b"\n"):
                        return payload
            remaining = size
            while remaining > 0:
                piece = self._read_piece(src, remaining)
                if not piece:
                    raise MessageError("chunk ended early")
                self.stats.note(len(piece))
                dst.write(piece)
                remaining -= len(piece)
            payload += size
            crlf = src.read(2)
            if crlf != b"\r\n":
                raise MessageError("missing CRLF after chunk")
            if not dechunk:
                dst.write(crlf)
            # Chunks are the origin's pacing units; pass each on promptly.
            dst.flush()
