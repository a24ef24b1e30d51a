"""External ACL helper: query parsing, OK/ERR formatting, the line loop, and
the real subprocess over a shared sqlite store."""

from __future__ import annotations

import io
import random
import subprocess
import sys

import pytest

from conftest import BrokenStore
from ipgate.clock import ManualClock
from ipgate.helper import HelperParseError, format_response, parse_query_line, run_loop
from ipgate.store import AuthDecision, InMemorySessionStore, SqliteSessionStore, StoreUnavailableError

T0 = 1_000_000.0


# -- query line parsing ---------------------------------------------------------

def test_parse_plain_address():
    assert parse_query_line("10.0.0.5\n") == "10.0.0.5"


def test_parse_ignores_trailing_tokens():
    # Squid appends further %-format fields after the address when configured to.
    assert parse_query_line("10.0.0.5 alice GET\n") == "10.0.0.5"


def test_parse_undoes_percent_escaping():
    # %31 is the digit 1; Squid %-escapes helper fields on the wire.
    assert parse_query_line("%310.0.0.5\n") == "10.0.0.5"


@pytest.mark.parametrize("bad", ["", "   \n", "banana\n", "10.0.0\n", "2001:db8::1\n"])
def test_parse_rejects_garbage(bad):
    with pytest.raises(HelperParseError):
        parse_query_line(bad)


def test_format_response_shapes():
    assert format_response(AuthDecision.granted("alice")) == "OK user=alice"
    assert format_response(AuthDecision.denied()) == "ERR"


# -- the answer loop -------------------------------------------------------------

class FlushSpy(io.StringIO):
    def __init__(self):
        super().__init__()
        self.flushes = 0

    def flush(self):
        self.flushes += 1
        super().flush()


def seeded_store():
    store = InMemorySessionStore()
    store.insert_session("10.0.0.5", "alice", ["internet"], 3600, T0)
    return store


def test_run_loop_transcript_exact_bytes():
    out = io.StringIO()
    rc = run_loop(
        io.StringIO("10.0.0.5\n10.0.0.99\nnot-an-ip\n10.0.0.5\n"),
        out,
        group="internet",
        store=seeded_store(),
        clock=ManualClock(T0 + 10),
    )
    assert rc == 0
    assert out.getvalue() == "OK user=alice\nERR\nERR\nOK user=alice\n"


def test_run_loop_flushes_after_every_line():
    # Squid blocks on helpers that buffer; one flush per answer minimum.
    out = FlushSpy()
    run_loop(io.StringIO("10.0.0.5\n10.0.0.5\n10.0.0.5\n"), out,
             group="internet", store=seeded_store(), clock=ManualClock(T0))
    assert out.flushes >= 3


def test_run_loop_respects_group():
    out = io.StringIO()
    run_loop(io.StringIO("10.0.0.5\n"), out, group="admins",
             store=seeded_store(), clock=ManualClock(T0))
    assert out.getvalue() == "ERR\n"


def test_run_loop_expiry_follows_clock():
    out = io.StringIO()
    run_loop(io.StringIO("10.0.0.5\n"), out, group="internet",
             store=seeded_store(), clock=ManualClock(T0 + 3601))
    assert out.getvalue() == "ERR\n"


def test_run_loop_answers_err_when_store_is_down():
    out = io.StringIO()
    rc = run_loop(io.StringIO("10.0.0.5\n10.0.0.6\n"), out, group="internet",
                  store=BrokenStore(StoreUnavailableError), clock=ManualClock(T0))
    assert rc == 0
    assert out.getvalue() == "ERR\nERR\n"


def test_run_loop_survives_arbitrary_store_exceptions():
    out = io.StringIO()
    run_loop(io.StringIO("10.0.0.5\n"), out, group="internet",
             store=BrokenStore(RuntimeError), clock=ManualClock(T0))
    assert out.getvalue() == "ERR\n"


def test_run_loop_randomized_against_oracle():
    rng = random.Random(4242)
    store = InMemorySessionStore()
    clock = ManualClock(T0)
    sessions = {}  # ip -> (user, end_time)
    ips = [f"10.3.0.{i}" for i in range(1, 21)]
    lines = []
    expected = []
    for _ in range(1000):
        roll = rng.random()
        if roll < 0.15:
            ip, user = rng.choice(ips), f"u{rng.randrange(6)}"
            duration = rng.choice([5, 60, 600])
            store.insert_session(ip, user, ["internet"], duration, clock())
            sessions[ip] = (user, clock() + duration)
        elif roll < 0.25:
            clock.advance(rng.uniform(0, 120))
        else:
            ip = rng.choice(ips + ["garbage-host"])
            lines.append(ip + "\n")
            live = sessions.get(ip)
            if ip == "garbage-host" or live is None or live[1] < clock():
                expected.append("ERR")
            else:
                expected.append(f"OK user={live[0]}")
            # Queries run sequentially, so evaluate this one now to keep the
            # oracle's view of time aligned with the store's.
            out = io.StringIO()
            run_loop(io.StringIO(lines[-1]), out, group="internet",
                     store=store, clock=clock)
            assert out.getvalue() == expected[-1] + "\n", (ip, clock())


# -- the installed executable -----------------------------------------------------

def _helper_cmd(store_locator: str) -> list[str]:
    return [sys.executable, "-m", "ipgate.helper",
            "--group", "internet", "--store", store_locator]


def test_helper_subprocess_interactive_over_sqlite(tmp_path):
    db = tmp_path / "sessions.db"
    store = SqliteSessionStore(str(db))
    import time as _time

    now = _time.time()
    store.insert_session("10.0.0.5", "alice", ["internet"], 3600, now)
    store.insert_session("10.0.0.7", "bob", ["internet"], 3600, now)
    store.close()

    proc = subprocess.Popen(
        _helper_cmd(f"sqlite:{db}"),
        stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
        text=True, bufsize=1,
    )
    try:
        # One line in, one line out, before the next query is even written:
        # proves per-line flushing rather than batch processing at EOF.
        for query, answer in [
            ("10.0.0.5", "OK user=alice"),
            ("10.0.0.99", "ERR"),
            ("definitely not an ip", "ERR"),
            ("10.0.0.7", "OK user=bob"),
        ]:
            assert proc.stdin is not None and proc.stdout is not None
            proc.stdin.write(query + "\n")
            proc.stdin.flush()
            assert proc.stdout.readline() == answer + "\n"
        proc.stdin.close()
        assert proc.wait(timeout=10) == 0
    finally:
        proc.kill()


def test_helper_subprocess_fails_closed_on_unopenable_store(tmp_path):
    # Point it at a directory: the store cannot open, every answer is ERR.
    proc = subprocess.run(
        _helper_cmd(f"sqlite:{tmp_path}"),
        input="10.0.0.5\n10.0.0.6\n",
        capture_output=True, text=True, timeout=30,
    )
    assert proc.returncode == 0
    assert proc.stdout == "ERR\nERR\n"


def test_helper_subprocess_rejects_bad_locator():
    proc = subprocess.run(
        _helper_cmd("carrier-pigeon:coop"),
        input="", capture_output=True, text=True, timeout=30,
    )
    assert proc.returncode == 2  # argparse usage error
