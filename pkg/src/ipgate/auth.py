"""Captive login service: login form, credential check, IP session insertion,
logout and status endpoints.

The client identity is always the transport source address of the connection;
nothing in a request body or header can claim a different IP. Endpoints answer
HTML (or plain text for /status) by default and JSON when the Accept header
asks for application/json.
"""

from __future__ import annotations

import html
import json
import logging
import mimetypes
from dataclasses import dataclass
from pathlib import Path
from typing import Callable
from urllib.parse import parse_qs, quote

from .clock import ClockFn, system_clock
from .credentials import BackendUnavailableError, CredentialBackend
from .httpmsg import (
    Headers,
    HeadTooLargeError,
    MessageError,
    RequestSummary,
    parse_request_head,
    read_head_lines,
    summarize_request,
    write_response,
)
from .netio import Connection
from .store import SessionStore, StoreUnavailableError

log = logging.getLogger(__name__)

MAX_FORM_BYTES = 64 * 1024


@dataclass(frozen=True)
class SessionStatus:
    authenticated: bool
    user: str | None = None
    remaining: int | None = None

    def __post_init__(self) -> None:
        if self.authenticated and (self.user is None or self.remaining is None):
            raise ValueError("authenticated status needs user and remaining")
        if self.remaining is not None and self.remaining < 0:
            raise ValueError("remaining must be >= 0")


class LoginRejected(Exception):
    """Credentials were checked and refused (or grant no group at all)."""


def handle_login(
    client_ip: str,
    user: str,
    password: str,
    duration: float,
    *,
    backend: CredentialBackend,
    store: SessionStore,
    max_duration: float,
    now: float,
) -> SessionStatus:
    """Verify credentials and insert an IP session. The requested duration is
    clamped to max_duration rather than rejected. Nothing is written to the
    store unless the backend said yes in this very call."""
    if not duration > 0:
        raise ValueError("duration must be positive")
    result = backend.verify(user, password)
    if not result.success or not result.groups:
        raise LoginRejected("invalid credentials")
    granted = min(float(duration), float(max_duration))
    store.insert_session(client_ip, user, result.groups, granted, now)
    return SessionStatus(authenticated=True, user=user, remaining=int(granted))


def handle_logout(client_ip: str, store: SessionStore) -> SessionStatus:
    store.logout(client_ip)
    return SessionStatus(authenticated=False)


def handle_status(client_ip: str, store: SessionStore, now: float) -> SessionStatus:
    record = store.get_session(client_ip, now)
    if record is None:
        return SessionStatus(authenticated=False)
    return SessionStatus(
        authenticated=True, user=record.user, remaining=max(0, int(record.remaining(now)))
    )


def describe_duration(seconds: int) -> str:
    if seconds % 3600 == 0:
        hours = seconds // 3600
        return "1 hour" if hours == 1 else f"{hours} hours"
    if seconds % 60 == 0:
        return f"{seconds // 60} minutes"
    return f"{seconds} seconds"


_PAGE = """<!doctype html>
<html>
<head><meta charset="utf-8"><title>{title}</title>
<style>
 body {{ font-family: sans-serif; margin: 3em auto; max-width: 28em; color: #222; }}
 form label {{ display: block; margin: 0.6em 0; }}
 input, select {{ font-size: 1em; }}
 .error {{ color: #b00020; }}
 .note {{ color: #555; }}
</style>{extra_head}</head>
<body>
<h1>{heading}</h1>
{body}
</body>
</html>
"""


@dataclass
class AuthServiceSettings:
    max_duration: float = 86400.0
    duration_choices: tuple[int, ...] = (3600, 14400, 28800)
    portal_dir: str | None = None


class AuthApp:
    """HTTP frontend over the login/logout/status handlers plus portal assets."""

    def __init__(
        self,
        store: SessionStore,
        backend: CredentialBackend,
        settings: AuthServiceSettings | None = None,
        clock: ClockFn = system_clock,
        on_session_change: Callable[[str], None] | None = None,
    ) -> None:
        self.store = store
        self.backend = backend
        self.settings = settings or AuthServiceSettings()
        self.clock = clock
        # Co-located deployments hook this to the ACL cache so a fresh login
        # or logout takes effect immediately instead of after the cache TTL.
        self.on_session_change = on_session_change

    def _notify_session_change(self, client_ip: str) -> None:
        if self.on_session_change is not None:
            self.on_session_change(client_ip)

    # -- connection plumbing ------------------------------------------------

    def handle_connection(self, conn: Connection) -> None:
        """One request per connection; the service always answers Connection: close."""
        try:
            try:
                lines = read_head_lines(conn.rfile)
                if lines is None:
                    return
                method, target, version, headers = parse_request_head(lines)
                summary = summarize_request(conn.client_ip, method, target, version, headers)
            except HeadTooLargeError:
                write_response(conn.wfile, 431, close=True)
                return
            except MessageError as exc:
                write_response(
                    conn.wfile, 400, body=f"bad request: {exc}\n".encode(), close=True,
                    headers=[("Content-Type", "text/plain; charset=utf-8")],
                )
                return
            body = b""
            length_text = headers.get("Content-Length")
            if length_text is not None:
                try:
                    length = int(length_text)
                except ValueError:
                    write_response(conn.wfile, 400, close=True)
                    return
                if length > MAX_FORM_BYTES:
                    write_response(conn.wfile, 431, close=True)
                    return
                body = conn.rfile.read(length)
            self.dispatch(summary, body, conn)
        except (OSError, ValueError):
            pass
        finally:
            conn.close()

    def dispatch(self, request: RequestSummary, body: bytes, conn: Connection) -> None:
        path, _, query = request.path.partition("?")
        params = parse_qs(query, keep_blank_values=True)
        wants_json = "application/json" in (request.headers.get("Accept") or "")
        try:
            if path == "/" and request.method == "GET":
                write_response(conn.wfile, 302, [("Location", "/login")], close=True)
            elif path == "/login" and request.method == "GET":
                self._login_page(request, params, wants_json, conn)
            elif path == "/login" and request.method == "POST":
                self._login_submit(request, body, wants_json, conn)
            elif path == "/logout" and request.method == "POST":
                status = handle_logout(request.client_ip, self.store)
                self._notify_session_change(request.client_ip)
                self._send_status_like(status, wants_json, conn, heading="Logged out",
                                       note="Your IP session has ended.")
            elif path == "/status" and request.method == "GET":
                self._status(request, wants_json, conn)
            elif path.startswith("/portal") and request.method == "GET":
                self._portal_asset(path, conn)
            elif path in ("/login", "/logout", "/status"):
                write_response(conn.wfile, 405, close=True)
            else:
                write_response(conn.wfile, 404, close=True)
        except StoreUnavailableError as exc:
            log.error("session store unavailable: %s", exc)
            self._service_error(wants_json, conn, "session store unavailable")
        except BackendUnavailableError as exc:
            log.error("credential backend unavailable: %s", exc)
            self._service_error(wants_json, conn, "authentication service unavailable")

    # -- endpoint bodies ----------------------------------------------------

    def _json(self, conn: Connection, status: int, payload: dict) -> None:
        body = (json.dumps(payload) + "\n").encode("utf-8")
        write_response(
            conn.wfile, status, [("Content-Type", "application/json")], body, close=True
        )

    def _page(self, conn: Connection, status: int, *, title: str, heading: str, body: str,
              extra_head: str = "") -> None:
        doc = _PAGE.format(title=title, heading=heading, body=body, extra_head=extra_head)
        write_response(
            conn.wfile, status, [("Content-Type", "text/html; charset=utf-8")],
            doc.encode("utf-8"), close=True,
        )

    def _status_payload(self, status: SessionStatus) -> dict:
        return {
            "authenticated": status.authenticated,
            "user": status.user,
            "remaining": status.remaining,
            "server_time": self.clock(),
        }

    def _login_page(self, request: RequestSummary, params: dict, wants_json: bool,
                    conn: Connection) -> None:
        now = self.clock()
        status = handle_status(request.client_ip, self.store, now)
        if wants_json:
            payload = self._status_payload(status)
            payload["duration_choices"] = list(self.settings.duration_choices)
            self._json(conn, 200, payload)
            return
        return_url = (params.get("return") or [""])[0]
        note = ""
        if status.authenticated:
            note = (
                f'<p class="note">Already logged in as {html.escape(status.user or "")} '
                f"with {status.remaining} seconds remaining.</p>"
            )
        options = "".join(
            f'<option value="{c}">{describe_duration(c)}</option>'
            for c in self.settings.duration_choices
        )
        form = f"""{note}
<form method="post" action="/login">
<label>User <input name="user" autofocus></label>
<label>Password <input type="password" name="password"></label>
<label>Duration <select name="duration">{options}</select></label>
<input type="hidden" name="return" value="{html.escape(return_url, quote=True)}">
<button type="submit">Log in</button>
</form>"""
        self._page(conn, 200, title="Web access login", heading="Log in for web access", body=form)

    def _login_submit(self, request: RequestSummary, body: bytes, wants_json: bool,
                      conn: Connection) -> None:
        form = parse_qs(body.decode("utf-8", "replace"), keep_blank_values=True)
        user = (form.get("user") or [""])[0]
        password = (form.get("password") or [""])[0]
        duration_text = (form.get("duration") or [""])[0]
        return_url = (form.get("return") or [""])[0]
        try:
            duration = float(duration_text)
        except ValueError:
            duration = -1.0
        if not user or not password or not duration > 0:
            if wants_json:
                self._json(conn, 400, {"authenticated": False, "error": "bad-request"})
            else:
                self._page(conn, 400, title="Login failed", heading="Login failed",
                           body='<p class="error">Missing or malformed form fields.</p>')
            return
        try:
            status = handle_login(
                request.client_ip, user, password, duration,
                backend=self.backend, store=self.store,
                max_duration=self.settings.max_duration, now=self.clock(),
            )
        except LoginRejected:
            if wants_json:
                self._json(conn, 401, {"authenticated": False, "error": "invalid-credentials"})
            else:
                back = "/login" + (f"?return={quote(return_url, safe='')}" if return_url else "")
                self._page(
                    conn, 401, title="Login failed", heading="Login failed",
                    body='<p class="error">Invalid user name or password.</p>'
                         f'<p><a href="{html.escape(back, quote=True)}">Try again</a></p>',
                )
            return
        self._notify_session_change(request.client_ip)
        if wants_json:
            payload = self._status_payload(status)
            payload["return_url"] = return_url or None
            self._json(conn, 200, payload)
            return
        link = ""
        extra_head = ""
        if return_url:
            safe = html.escape(return_url, quote=True)
            link = f'<p><a href="{safe}">Continue to your page</a> (automatic in 3 seconds)</p>'
            extra_head = f'<meta http-equiv="refresh" content="3;url={safe}">'
        self._page(
            conn, 200, title="Logged in", heading="You are logged in",
            body=f"<p>Welcome {html.escape(user)}. Web access is granted for "
                 f"{describe_duration(status.remaining or 0)} "
                 f"({status.remaining} seconds).</p>{link}",
            extra_head=extra_head,
        )

    def _status(self, request: RequestSummary, wants_json: bool, conn: Connection) -> None:
        status = handle_status(request.client_ip, self.store, self.clock())
        if wants_json:
            self._json(conn, 200, self._status_payload(status))
            return
        lines = [f"authenticated: {'yes' if status.authenticated else 'no'}"]
        if status.authenticated:
            lines.append(f"user: {status.user}")
            lines.append(f"remaining: {status.remaining}")
        text = "\n".join(lines) + "\n"
        write_response(
            conn.wfile, 200, [("Content-Type", "text/plain; charset=utf-8")],
            text.encode("utf-8"), close=True,
        )

    def _send_status_like(self, status: SessionStatus, wants_json: bool, conn: Connection,
                          *, heading: str, note: str) -> None:
        if wants_json:
            self._json(conn, 200, self._status_payload(status))
            return
        self._page(conn, 200, title=heading, heading=heading,
                   body=f"<p>{html.escape(note)}</p><p><a href=\"/login\">Log in again</a></p>")

    def _service_error(self, wants_json: bool, conn: Connection, detail: str) -> None:
        if wants_json:
            self._json(conn, 503, {"authenticated": False, "error": "service-unavailable"})
        else:
            self._page(conn, 503, title="Service unavailable", heading="Service unavailable",
                       body=f'<p class="error">{html.escape(detail)}; please retry shortly.</p>')

    def _portal_asset(self, path: str, conn: Connection) -> None:
        if self.settings.portal_dir is None:
            write_response(conn.wfile, 404, close=True)
            return
        rel = path[len("/portal"):].lstrip("/") or "index.html"
        root = Path(self.settings.portal_dir).resolve()
        target = (root / rel).resolve()
        if not target.is_relative_to(root) or not target.is_file():
            write_response(conn.wfile, 404, close=True)
            return
        ctype = mimetypes.guess_type(target.name)[0] or "application/octet-stream"
        write_response(
            conn.wfile, 200, [("Content-Type", ctype)], target.read_bytes(), close=True
        )
