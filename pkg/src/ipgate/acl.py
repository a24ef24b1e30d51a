"""Ordered allow/deny policy evaluation with a TTL cache in front of session lookups.

Two modes: whitelist (default deny; approved domains pass without login, anything
else needs an authenticated IP) and blacklist (default allow; listed domains are
blocked unless the IP is authenticated, which takes precedence).
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

from .store import AuthDecision, SessionStore

if TYPE_CHECKING:
    from .httpmsg import RequestSummary


class PolicyMode(str, enum.Enum):
    WHITELIST = "whitelist"
    BLACKLIST = "blacklist"


class Action(enum.Enum):
    ALLOW = "allow"
    DENY_NEEDS_LOGIN = "deny-needs-login"
    DENY_BLACKLISTED = "deny-blacklisted"


@dataclass(frozen=True)
class Verdict:
    action: Action
    user: str | None = None

    def __post_init__(self) -> None:
        if self.action is not Action.ALLOW and self.user is not None:
            raise ValueError("deny verdicts never carry a user")

    @property
    def allowed(self) -> bool:
        return self.action is Action.ALLOW


def _normalize_pattern(pattern: str) -> str:
    p = pattern.strip().lower()
    if not p or "://" in p or "/" in p or p.split() != [p]:
        raise ValueError(f"bad domain pattern {pattern!r}: hostname only, optional leading dot")
    return p


@dataclass(frozen=True)
class AclPolicy:
    """Rule configuration for one deployment: mode, domain list, and who counts as logged in.

    ``auth_cache_ttl`` of 0 disables decision caching entirely.
    """

    mode: PolicyMode
    domains: frozenset[str]
    auth_group: str
    auth_cache_ttl: float = 300.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", PolicyMode(self.mode))
        object.__setattr__(self, "domains", frozenset(_normalize_pattern(p) for p in self.domains))
        if not self.auth_group:
            raise ValueError("auth_group is required")
        if self.auth_cache_ttl < 0:
            raise ValueError("auth_cache_ttl must be >= 0")


def match_domain(host: str, patterns: frozenset[str] | set[str]) -> bool:
    """True if host equals a pattern, or a ``.domain`` pattern covers host or a subdomain of it."""
    if host in patterns:
        return True
    for pattern in patterns:
        if pattern.startswith("."):
            base = pattern[1:]
            if host == base or host.endswith(pattern):
                return True
    return False


@dataclass
class CacheEntry:
    decision: AuthDecision
    cached_at: float


class AuthCache:
    """TTL cache of per-IP auth decisions; both Ok and Err results are kept."""

    def __init__(self, ttl: float) -> None:
        if ttl < 0:
            raise ValueError("ttl must be >= 0")
        self.ttl = ttl
        self._lock = threading.Lock()
        self._entries: dict[str, CacheEntry] = {}

    def check(self, ip: str, group: str, now: float, store: SessionStore) -> AuthDecision:
        if self.ttl == 0:
            return store.lookup(ip, group, now)
        with self._lock:
            entry = self._entries.get(ip)
            if entry is not None and now - entry.cached_at <= self.ttl:
                return entry.decision
        decision = store.lookup(ip, group, now)
        with self._lock:
            self._entries[ip] = CacheEntry(decision=decision, cached_at=now)
        return decision

    def invalidate(self, ip: str) -> None:
        """Drop one IP's entry. Wired to login/logout in single-process
        deployments so session changes take effect before the TTL runs out;
        split deployments live with the staleness window instead."""
        with self._lock:
            self._entries.pop(ip, None)

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()


@dataclass
class AclEngine:
    """Binds a policy to a session store and judges one request at a time."""

    policy: AclPolicy
    store: SessionStore
    cache: AuthCache = field(init=False)

    def __post_init__(self) -> None:
        self.cache = AuthCache(self.policy.auth_cache_ttl)

    def cached_auth_check(self, ip: str, now: float) -> AuthDecision:
        return self.cache.check(ip, self.policy.auth_group, now, self.store)

    def invalidate_ip(self, ip: str) -> None:
        self.cache.invalidate(ip)

    def evaluate(self, request: "RequestSummary", now: float) -> Verdict:
        host = request.host
        if self.policy.mode is PolicyMode.WHITELIST:
            if match_domain(host, self.policy.domains):
                return Verdict(Action.ALLOW)
            decision = self.cached_auth_check(request.client_ip, now)
            if decision.ok:
                return Verdict(Action.ALLOW, user=decision.user)
            return Verdict(Action.DENY_NEEDS_LOGIN)
        decision = self.cached_auth_check(request.client_ip, now)
        if decision.ok:
            return Verdict(Action.ALLOW, user=decision.user)
        if match_domain(host, self.policy.domains):
            return Verdict(Action.DENY_BLACKLISTED)
        return Verdict(Action.ALLOW)
