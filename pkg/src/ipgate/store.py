"""Authoritative table of authenticated client IPs with TTL expiry and group membership.

Two backends share one contract: an in-memory store for single-process use and
tests, and a sqlite-backed store (tables ``addresses`` and ``groups``) that
multiple helper processes can share on disk.
"""

from __future__ import annotations

import ipaddress
import sqlite3
import threading
from dataclasses import dataclass, replace
from typing import Iterable, Protocol


class StoreError(Exception):
    pass


class StoreUnavailableError(StoreError):
    """The backing store cannot be reached. Callers must fail closed."""


def canonical_ipv4(value: str) -> str:
    """Return the dotted-quad form of an IPv4 address, rejecting anything else."""
    if not isinstance(value, str):
        raise ValueError(f"IP address must be a string, got {type(value).__name__}")
    text = value.strip()
    try:
        addr = ipaddress.ip_address(text)
    except ValueError:
        raise ValueError(f"not a valid IP address: {value!r}") from None
    if addr.version != 4:
        raise ValueError(f"only IPv4 is supported, got IPv6 address {value!r}")
    return str(addr)


def _check_identifier(value: str, what: str) -> str:
    if not isinstance(value, str) or not value or value.split() != [value]:
        raise ValueError(f"{what} must be a non-empty identifier without whitespace: {value!r}")
    return value


@dataclass(frozen=True)
class SessionRecord:
    ip: str
    user: str
    end_time: float
    last_activity: float

    def remaining(self, now: float) -> float:
        return self.end_time - now


@dataclass(frozen=True)
class GroupMembership:
    user: str
    group: str


@dataclass(frozen=True)
class AuthDecision:
    """Outcome of an IP/group lookup: Ok carries the owning user, Err carries nothing."""

    user: str | None = None

    @property
    def ok(self) -> bool:
        return self.user is not None

    @classmethod
    def granted(cls, user: str) -> "AuthDecision":
        return cls(user=user)

    @classmethod
    def denied(cls) -> "AuthDecision":
        return cls(user=None)


class SessionStore(Protocol):
    def insert_session(
        self, ip: str, user: str, groups: Iterable[str], duration: float, now: float
    ) -> SessionRecord: ...

    def purge_expired(self, now: float) -> int: ...

    def lookup(self, ip: str, group: str, now: float) -> AuthDecision: ...

    def logout(self, ip: str) -> bool: ...

    def get_session(self, ip: str, now: float) -> SessionRecord | None: ...

    def snapshot(self) -> tuple[tuple[SessionRecord, ...], frozenset[GroupMembership]]: ...


def _validate_insert(
    ip: str, user: str, groups: Iterable[str], duration: float
) -> tuple[str, str, list[str]]:
    ip = canonical_ipv4(ip)
    user = _check_identifier(user, "user")
    group_list = [_check_identifier(g, "group") for g in groups]
    if not group_list:
        raise ValueError("at least one group is required")
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration!r}")
    return ip, user, group_list


class InMemorySessionStore:
    """Process-local store. All operations are atomic under one lock."""

    def __init__(self, inactivity: float | None = None) -> None:
        if inactivity is not None and not inactivity > 0:
            raise ValueError("inactivity window must be positive when set")
        self.inactivity = inactivity
        self._lock = threading.Lock()
        self._sessions: dict[str, SessionRecord] = {}
        self._groups: set[GroupMembership] = set()

    def insert_session(
        self, ip: str, user: str, groups: Iterable[str], duration: float, now: float
    ) -> SessionRecord:
        ip, user, group_list = _validate_insert(ip, user, groups, duration)
        record = SessionRecord(ip=ip, user=user, end_time=now + duration, last_activity=now)
        with self._lock:
            self._sessions[ip] = record
            for group in group_list:
                self._groups.add(GroupMembership(user=user, group=group))
        return record

    def _purge_locked(self, now: float) -> int:
        expired = [ip for ip, rec in self._sessions.items() if rec.end_time < now]
        if self.inactivity is not None:
            expired.extend(
                ip
                for ip, rec in self._sessions.items()
                if rec.end_time >= now and now - rec.last_activity > self.inactivity
            )
        for ip in expired:
            del self._sessions[ip]
        self._drop_orphans_locked()
        return len(expired)

    def _drop_orphans_locked(self) -> None:
        live_users = {rec.user for rec in self._sessions.values()}
        self._groups = {m for m in self._groups if m.user in live_users}

    def purge_expired(self, now: float) -> int:
        with self._lock:
            return self._purge_locked(now)

    def lookup(self, ip: str, group: str, now: float) -> AuthDecision:
        ip = canonical_ipv4(ip)
        with self._lock:
            self._purge_locked(now)
            record = self._sessions.get(ip)
            if record is None:
                return AuthDecision.denied()
            if GroupMembership(user=record.user, group=group) not in self._groups:
                return AuthDecision.denied()
            self._sessions[ip] = replace(record, last_activity=now)
            return AuthDecision.granted(record.user)

    def logout(self, ip: str) -> bool:
        ip = canonical_ipv4(ip)
        with self._lock:
            removed = self._sessions.pop(ip, None) is not None
            self._drop_orphans_locked()
            return removed

    def get_session(self, ip: str, now: float) -> SessionRecord | None:
        ip = canonical_ipv4(ip)
        with self._lock:
            self._purge_locked(now)
            return self._sessions.get(ip)

    def snapshot(self) -> tuple[tuple[SessionRecord, ...], frozenset[GroupMembership]]:
        with self._lock:
            records = tuple(sorted(self._sessions.values(), key=lambda r: r.ip))
            return records, frozenset(self._groups)


class SqliteSessionStore:
    """Durable store over sqlite, usable by several processes at once.

    Schema follows the two-table layout the in-memory store models:
    ``addresses``(ip, user, end_time, last_activity) and ``groups``(user, group).
    """

    def __init__(self, path: str, inactivity: float | None = None) -> None:
        if inactivity is not None and not inactivity > 0:
            raise ValueError("inactivity window must be positive when set")
        self.inactivity = inactivity
        self.path = path
        self._lock = threading.Lock()
        try:
            self._db = sqlite3.connect(path, check_same_thread=False, timeout=10.0)
            self._db.execute("PRAGMA journal_mode=WAL")
            self._db.execute("PRAGMA busy_timeout=10000")
            with self._db:
                self._db.execute(
                    "CREATE TABLE IF NOT EXISTS addresses ("
                    " ip TEXT PRIMARY KEY,"
                    " user TEXT NOT NULL,"
                    " end_time REAL NOT NULL,"
                    " last_activity REAL NOT NULL)"
                )
                self._db.execute(
                    'CREATE TABLE IF NOT EXISTS groups ('
                    ' user TEXT NOT NULL,'
                    ' "group" TEXT NOT NULL,'
                    ' UNIQUE (user, "group"))'
                )
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"cannot open session store at {path!r}: {exc}") from exc

    def close(self) -> None:
        self._db.close()

    def _purge_tx(self, now: float) -> int:
        cur = self._db.execute("DELETE FROM addresses WHERE end_time < ?", (now,))
        removed = cur.rowcount
        if self.inactivity is not None:
            cur = self._db.execute(
                "DELETE FROM addresses WHERE ? - last_activity > ?", (now, self.inactivity)
            )
            removed += cur.rowcount
        self._db.execute(
            "DELETE FROM groups WHERE NOT EXISTS"
            " (SELECT user FROM addresses WHERE user = groups.user)"
        )
        return removed

    def insert_session(
        self, ip: str, user: str, groups: Iterable[str], duration: float, now: float
    ) -> SessionRecord:
        ip, user, group_list = _validate_insert(ip, user, groups, duration)
        record = SessionRecord(ip=ip, user=user, end_time=now + duration, last_activity=now)
        try:
            with self._lock, self._db:
                self._db.execute(
                    "INSERT OR REPLACE INTO addresses (ip, user, end_time, last_activity)"
                    " VALUES (?, ?, ?, ?)",
                    (record.ip, record.user, record.end_time, record.last_activity),
                )
                self._db.executemany(
                    'INSERT OR IGNORE INTO groups (user, "group") VALUES (?, ?)',
                    [(user, g) for g in group_list],
                )
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"session store write failed: {exc}") from exc
        return record

    def purge_expired(self, now: float) -> int:
        try:
            with self._lock, self._db:
                return self._purge_tx(now)
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"session store purge failed: {exc}") from exc

    def lookup(self, ip: str, group: str, now: float) -> AuthDecision:
        ip = canonical_ipv4(ip)
        try:
            with self._lock, self._db:
                self._purge_tx(now)
                row = self._db.execute(
                    "SELECT addresses.user FROM addresses JOIN groups USING (user)"
                    ' WHERE addresses.ip = ? AND groups."group" = ? LIMIT 1',
                    (ip, group),
                ).fetchone()
                if row is None:
                    return AuthDecision.denied()
                self._db.execute(
                    "UPDATE addresses SET last_activity = ? WHERE ip = ?", (now, ip)
                )
                return AuthDecision.granted(row[0])
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"session store lookup failed: {exc}") from exc

    def logout(self, ip: str) -> bool:
        ip = canonical_ipv4(ip)
        try:
            with self._lock, self._db:
                cur = self._db.execute("DELETE FROM addresses WHERE ip = ?", (ip,))
                self._db.execute(
                    "DELETE FROM groups WHERE NOT EXISTS"
                    " (SELECT user FROM addresses WHERE user = groups.user)"
                )
                return cur.rowcount > 0
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"session store logout failed: {exc}") from exc

    def get_session(self, ip: str, now: float) -> SessionRecord | None:
        ip = canonical_ipv4(ip)
        try:
            with self._lock, self._db:
                self._purge_tx(now)
                row = self._db.execute(
                    "SELECT ip, user, end_time, last_activity FROM addresses WHERE ip = ?",
                    (ip,),
                ).fetchone()
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"session store read failed: {exc}") from exc
        if row is None:
            return None
        return SessionRecord(ip=row[0], user=row[1], end_time=row[2], last_activity=row[3])

    def snapshot(self) -> tuple[tuple[SessionRecord, ...], frozenset[GroupMembership]]:
        try:
            with self._lock, self._db:
                rows = self._db.execute(
                    "SELECT ip, user, end_time, last_activity FROM addresses ORDER BY ip"
                ).fetchall()
                members = self._db.execute('SELECT user, "group" FROM groups').fetchall()
        except sqlite3.Error as exc:
            raise StoreUnavailableError(f"session store read failed: {exc}") from exc
        records = tuple(SessionRecord(*row) for row in rows)
        return records, frozenset(GroupMembership(user=u, group=g) for u, g in members)


def open_store(locator: str, inactivity: float | None = None) -> SessionStore:
    """Open a store from a locator: ``memory:`` or ``sqlite:<path>``."""
    if locator == "memory:":
        return InMemorySessionStore(inactivity=inactivity)
    if locator.startswith("sqlite:"):
        path = locator[len("sqlite:") :]
        if not path:
            raise ValueError("sqlite locator needs a path, e.g. sqlite:/var/lib/ipgate/sessions.db")
        return SqliteSessionStore(path, inactivity=inactivity)
    raise ValueError(f"unknown store locator {locator!r} (expected memory: or sqlite:<path>)")
