"""Minimal HTTP/1.x message primitives shared by the proxy and the login service."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Iterator
from urllib.parse import urlsplit

MAX_HEAD_BYTES = 64 * 1024

_TOKEN_RE = re.compile(r"^[!#$%&'*+\-.^_`|~0-9A-Za-z]+$")

REASONS = {
    200: "OK",
    204: "No Content",
    302: "Found",
    303: "See Other",
    400: "Bad Request",
    401: "Unauthorized",
    403: "Forbidden",
    404: "Not Found",
    405: "Method Not Allowed",
    431: "Request Header Fields Too Large",
    500: "Internal Server Error",
    502: "Bad Gateway",
    503: "Service Unavailable",
}


class MessageError(Exception):
    """Malformed HTTP message on the wire."""


class HeadTooLargeError(MessageError):
    """Request or response head exceeded the size cap."""


class Headers:
    """Ordered, case-insensitive multimap of header fields.

    Lowercased names are kept alongside the originals so lookups on the relay
    hot path don't re-fold case on every scan.
    """

    __slots__ = ("_items",)

    def __init__(self, items: Iterable[tuple[str, str]] = ()) -> None:
        self._items: list[tuple[str, str, str]] = [
            (k, k.lower(), v) for k, v in items
        ]

    def get(self, name: str, default: str | None = None) -> str | None:
        lname = name.lower()
        for _, lk, v in self._items:
            if lk == lname:
                return v
        return default

    def get_all(self, name: str) -> list[str]:
        lname = name.lower()
        return [v for _, lk, v in self._items if lk == lname]

    def add(self, name: str, value: str) -> None:
        self._items.append((name, name.lower(), value))

    def remove(self, name: str) -> None:
        lname = name.lower()
        self._items = [t for t in self._items if t[1] != lname]

    def items(self) -> list[tuple[str, str]]:
        return [(k, v) for k, _, v in self._items]

    def copy(self) -> "Headers":
        fresh = Headers()
        fresh._items = list(self._items)
        return fresh

    def __contains__(self, name: str) -> bool:
        return self.get(name) is not None

    def __iter__(self) -> Iterator[tuple[str, str]]:
        return iter((k, v) for k, _, v in self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"Headers({self.items()!r})"


@dataclass
class RequestSummary:
    """What the ACL engine judges: where the request came from and where it points."""

    client_ip: str
    method: str
    target: str
    host: str
    port: int
    path: str
    version: str = "HTTP/1.1"
    headers: Headers = field(default_factory=Headers)

    @property
    def absolute_uri(self) -> str:
        netloc = self.host if self.port == 80 else f"{self.host}:{self.port}"
        return f"http://{netloc}{self.path}"


def read_head_lines(rfile: BinaryIO, limit: int = MAX_HEAD_BYTES) -> list[bytes] | None:
    """Read one message head (request or status line plus headers).

    Returns None on a clean EOF before any bytes. Tolerates blank line(s)
    before the start line as RFC 7230 suggests.
    """
    lines: list[bytes] = []
    total = 0
    leading_blanks = 0
    while True:
        line = rfile.readline(limit + 1)
        if not line:
            if not lines:
                return None
            raise MessageError("connection closed in the middle of a message head")
        total += len(line)
        if total > limit:
            raise HeadTooLargeError(f"message head exceeds {limit} bytes")
        if not line.endswith(b"\n"):
            raise MessageError("message head line without line terminator")
        if line in (b"\r\n", b"\n"):
            if lines:
                return lines
            leading_blanks += 1
            if leading_blanks > 4:
                raise MessageError("too many blank lines before request")
            continue
        lines.append(line)


def parse_headers(lines: list[bytes]) -> Headers:
    headers = Headers()
    for raw in lines:
        text = raw.decode("latin-1").rstrip("\r\n")
        if text[:1] in (" ", "\t"):
            raise MessageError("obsolete header line folding is not supported")
        name, sep, value = text.partition(":")
        if not sep or not _TOKEN_RE.match(name):
            raise MessageError(f"malformed header line: {text[:80]!r}")
        headers.add(name, value.strip())
    return headers


def parse_request_head(lines: list[bytes]) -> tuple[str, str, str, Headers]:
    """Parse request head lines into (method, target, version, headers)."""
    start = lines[0].decode("latin-1").rstrip("\r\n")
    parts = start.split()
    if len(parts) != 3:
        raise MessageError(f"malformed request line: {start[:80]!r}")
    method, target, version = parts
    if not _TOKEN_RE.match(method):
        raise MessageError(f"malformed method: {method[:40]!r}")
    if version not in ("HTTP/1.1", "HTTP/1.0"):
        raise MessageError(f"unsupported protocol version: {version[:40]!r}")
    return method, target, version, parse_headers(lines[1:])


def parse_response_head(lines: list[bytes]) -> tuple[str, int, str, Headers]:
    """Parse response head lines into (version, status, reason, headers)."""
    start = lines[0].decode("latin-1").rstrip("\r\n")
    parts = start.split(" ", 2)
    if len(parts) < 2 or not parts[0].startswith("HTTP/1."):
        raise MessageError(f"malformed status line: {start[:80]!r}")
    try:
        status = int(parts[1])
    except ValueError:
        raise MessageError(f"malformed status code: {parts[1][:40]!r}") from None
    reason = parts[2] if len(parts) == 3 else ""
    return parts[0], status, reason, parse_headers(lines[1:])


def parse_host(value: str) -> tuple[str, int]:
    """Split a Host header value into (lowercase host, port), defaulting to port 80."""
    text = value.strip()
    if not text:
        raise MessageError("empty Host header")
    if text.startswith("["):
        raise MessageError("IPv6 hosts are not supported")
    host, sep, port_text = text.rpartition(":")
    if not sep:
        host, port_text = text, ""
    if not port_text:
        return _check_host(text if not sep else host), 80
    try:
        port = int(port_text)
    except ValueError:
        raise MessageError(f"malformed Host port: {value!r}") from None
    if not 1 <= port <= 65535:
        raise MessageError(f"Host port out of range: {port}")
    return _check_host(host), port


def _check_host(host: str) -> str:
    host = host.strip().lower()
    if not host or "/" in host or ":" in host or host.split() != [host]:
        raise MessageError(f"malformed host: {host!r}")
    return host


def reconstruct_uri(request_line: str, headers: Headers) -> str:
    """Build the absolute URI for a request line, using Host for origin-form targets."""
    parts = request_line.split()
    if len(parts) != 3:
        raise MessageError(f"malformed request line: {request_line[:80]!r}")
    summary = summarize_request("0.0.0.0", parts[0], parts[1], parts[2], headers)
    return summary.absolute_uri


def summarize_request(
    client_ip: str, method: str, target: str, version: str, headers: Headers
) -> RequestSummary:
    """Resolve an origin-form or absolute-form target into a judged request summary.

    Interception delivers origin-form targets (the client thinks it is talking to
    the origin), so the Host header supplies the authority. Explicitly proxied
    absolute-form targets are accepted too.
    """
    if target.startswith("/"):
        host_value = headers.get("Host")
        if host_value is None or not host_value.strip():
            raise MessageError("origin-form request without a Host header")
        host, port = parse_host(host_value)
        path = target
    elif "://" in target:
        url = urlsplit(target)
        if url.scheme != "http":
            raise MessageError(f"unsupported scheme in request target: {url.scheme!r}")
        if not url.hostname:
            raise MessageError(f"request target without a host: {target[:80]!r}")
        host = url.hostname.lower()
        try:
            port = url.port or 80
        except ValueError:
            raise MessageError(f"malformed port in request target: {target[:80]!r}") from None
        path = url.path or "/"
        if url.query:
            path += "?" + url.query
    else:
        raise MessageError(f"unsupported request target: {target[:80]!r}")
    return RequestSummary(
        client_ip=client_ip,
        method=method,
        target=target,
        host=host,
        port=port,
        path=path,
        version=version,
        headers=headers,
    )


_HOP_BY_HOP = {
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "upgrade",
}


def strip_hop_by_hop(headers: Headers) -> Headers:
    """Drop connection-scoped headers; body framing headers are kept as-is."""
    listed = headers.get_all("Connection")
    if listed:
        doomed = set(_HOP_BY_HOP)
        for value in listed:
            for token in value.split(","):
                token = token.strip().lower()
                if token:
                    doomed.add(token)
    else:
        doomed = _HOP_BY_HOP
    fresh = Headers()
    fresh._items = [t for t in headers._items if t[1] not in doomed]
    return fresh


def wants_keep_alive(version: str, headers: Headers) -> bool:
    tokens = {
        t.strip().lower() for value in headers.get_all("Connection") for t in value.split(",")
    }
    if version == "HTTP/1.0":
        return "keep-alive" in tokens
    return "close" not in tokens


def write_response(
    wfile: BinaryIO,
    status: int,
    headers: Iterable[tuple[str, str]] = (),
    body: bytes = b"",
    *,
    reason: str | None = None,
    head_only: bool = False,
    close: bool = False,
) -> int:
    """Write a complete response with an explicit Content-Length. Returns body bytes sent."""
    if reason is None:
        reason = REASONS.get(status, "Unknown")
    field_names = set()
    out = [f"HTTP/1.1 {status} {reason}\r\n"]
    for k, v in headers:
        field_names.add(k.lower())
        out.append(f"{k}: {v}\r\n")
    if "content-length" not in field_names:
        out.append(f"Content-Length: {len(body)}\r\n")
    if close and "connection" not in field_names:
        out.append("Connection: close\r\n")
    out.append("\r\n")
    wfile.write("".join(out).encode("latin-1"))
    sent = 0
    if body and not head_only:
        wfile.write(body)
        sent = len(body)
    wfile.flush()
    return sent
