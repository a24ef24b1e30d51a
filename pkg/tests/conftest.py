"""Shared fixtures: stores, a counting store wrapper, and testbed builders."""

from __future__ import annotations

import pytest

from ipgate.acl import AclPolicy, PolicyMode
from ipgate.clock import ManualClock
from ipgate.harness import Testbed, Topology, TopologyKind, UserSpec, build_backend
from ipgate.store import AuthDecision, InMemorySessionStore


class CountingStore:
    """Delegates to a real store while counting lookup calls; lets cache tests
    assert exactly how often the store was consulted."""

    def __init__(self, inner=None):
        self.inner = inner or InMemorySessionStore()
        self.lookups = 0

    def lookup(self, ip, group, now):
        self.lookups += 1
        return self.inner.lookup(ip, group, now)

    def __getattr__(self, name):
        return getattr(self.inner, name)


class BrokenStore:
    """Every operation fails as if the backing database were down."""

    def __init__(self, exc_type):
        self.exc_type = exc_type

    def _boom(self, *args, **kwargs):
        raise self.exc_type("store is unreachable")

    insert_session = _boom
    purge_expired = _boom
    lookup = _boom
    logout = _boom
    get_session = _boom
    snapshot = _boom


@pytest.fixture
def clock():
    return ManualClock(1_000_000.0)


@pytest.fixture
def memory_store():
    return InMemorySessionStore()


def make_testbed(
    *,
    mode=PolicyMode.WHITELIST,
    domains=(),
    client_ips=("10.0.0.11", "10.0.0.12", "10.0.0.13"),
    kind=TopologyKind.TYPE1,
    users=(UserSpec("alice", "wonderland", ("internet",)),),
    auth_cache_ttl=300.0,
    **kwargs,
) -> Testbed:
    topology = Topology(kind=kind, client_ips=tuple(client_ips))
    policy = AclPolicy(mode=mode, domains=tuple(domains), auth_group="internet",
                       auth_cache_ttl=auth_cache_ttl)
    return Testbed(topology, policy, build_backend(list(users)), **kwargs)


def granted(user: str) -> AuthDecision:
    return AuthDecision.granted(user)
