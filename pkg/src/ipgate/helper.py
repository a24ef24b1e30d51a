"""Squid external-ACL helper: reads one client IP per stdin line, answers
"OK user=<name>" when that IP holds a live session in the configured group,
"ERR" otherwise.

squid.conf wiring (the proxy passes the client source address with %SRC):

    external_acl_type ip_session ttl=300 children-max=4 %SRC \\
        /usr/local/bin/ipgate-helper --group internet --store sqlite:/var/lib/ipgate/sessions.db
    acl authenticated external ip_session
    http_access allow authenticated
    http_access deny all

Run several helper children freely; they share the store. The helper never
exits on bad input and answers ERR whenever the store cannot be reached, so a
broken backend locks traffic out rather than letting it through.
"""

from __future__ import annotations

import argparse
import logging
import sys
from typing import IO, Iterable
from urllib.parse import unquote

from .clock import ClockFn, system_clock
from .store import AuthDecision, SessionStore, StoreUnavailableError, canonical_ipv4, open_store

log = logging.getLogger(__name__)


class HelperParseError(ValueError):
    pass


def parse_query_line(line: str) -> str:
    """Extract the client IPv4 address from one helper query line.

    Strips surrounding whitespace, ignores extra whitespace-separated tokens
    after the address, and undoes the %-escaping Squid applies to helper fields.
    """
    tokens = line.strip().split()
    if not tokens:
        raise HelperParseError("empty query line")
    candidate = unquote(tokens[0])
    try:
        return canonical_ipv4(candidate)
    except ValueError as exc:
        raise HelperParseError(str(exc)) from None


def format_response(decision: AuthDecision) -> str:
    return f"OK user={decision.user}" if decision.ok else "ERR"


def run_loop(
    input_stream: IO[str],
    output_stream: IO[str],
    *,
    group: str,
    store: SessionStore,
    clock: ClockFn = system_clock,
) -> int:
    """Answer queries line by line until EOF. Exactly one response per query,
    flushed immediately: Squid blocks on helpers that sit on buffered output."""
    for line in iter(input_stream.readline, ""):
        try:
            ip = parse_query_line(line)
        except HelperParseError as exc:
            log.warning("unparseable helper query (%s), answering ERR", exc)
            decision = AuthDecision.denied()
        else:
            try:
                decision = store.lookup(ip, group, clock())
            except Exception as exc:  # fail closed, and never die mid-stream
                log.error("store lookup failed for %s (%s), answering ERR", ip, exc)
                decision = AuthDecision.denied()
        output_stream.write(format_response(decision) + "\n")
        output_stream.flush()
    return 0


class _UnavailableStore:
    """Stands in when the real store cannot be opened; every lookup fails closed."""

    def __init__(self, reason: str) -> None:
        self.reason = reason

    def lookup(self, ip: str, group: str, now: float) -> AuthDecision:
        raise StoreUnavailableError(self.reason)


def main(argv: Iterable[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="ipgate-helper",
        description="Squid external ACL helper answering OK/ERR per client IP.",
    )
    parser.add_argument("--group", required=True, help="ACL group a session must belong to")
    parser.add_argument(
        "--store", required=True, help="session store locator (memory: or sqlite:<path>)"
    )
    parser.add_argument(
        "--inactivity",
        type=float,
        default=None,
        metavar="SECONDS",
        help="also expire sessions idle longer than this window",
    )
    args = parser.parse_args(list(argv) if argv is not None else None)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="ipgate-helper: %(message)s")

    store: SessionStore
    try:
        store = open_store(args.store, inactivity=args.inactivity)
    except ValueError as exc:
        parser.error(str(exc))
    except StoreUnavailableError as exc:
        log.error("cannot open session store, all queries will answer ERR: %s", exc)
        store = _UnavailableStore(str(exc))

    try:
        return run_loop(sys.stdin, sys.stdout, group=args.group, store=store)
    except KeyboardInterrupt:
        return 0


if __name__ == "__main__":
    sys.exit(main())
