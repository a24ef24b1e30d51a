"""Byte-stream connections and a small threaded TCP server.

Request handlers receive Connection objects rather than raw sockets, so the
scenario harness can hand them in-process connections annotated with any
client source address (including deliberately rewritten ones).
"""

from __future__ import annotations

import logging
import socket
import threading
from typing import BinaryIO, Callable, Protocol

log = logging.getLogger(__name__)

DEFAULT_IO_TIMEOUT = 30.0


class Connection(Protocol):
    client_ip: str
    rfile: BinaryIO
    wfile: BinaryIO

    def close(self) -> None: ...


class SocketConnection:
    def __init__(self, sock: socket.socket, client_ip: str) -> None:
        self.client_ip = client_ip
        self._sock = sock
        self.rfile: BinaryIO = sock.makefile("rb")
        self.wfile: BinaryIO = sock.makefile("wb")

    def close(self) -> None:
        for closer in (self.rfile.close, self.wfile.close, self._sock.close):
            try:
                closer()
            except OSError:
                pass


def pair_connection(
    client_ip: str, timeout: float | None = DEFAULT_IO_TIMEOUT
) -> tuple[socket.socket, SocketConnection]:
    """In-process connection pair: (client end socket, server-side Connection).

    The server side reports ``client_ip`` as the peer address regardless of the
    real transport, which is how the harness models gateway address handling.
    """
    client_end, server_end = socket.socketpair()
    client_end.settimeout(timeout)
    server_end.settimeout(timeout)
    return client_end, SocketConnection(server_end, client_ip=client_ip)


class TcpServer:
    """Accept loop that dispatches one thread per connection to a handler."""

    def __init__(
        self,
        handler: Callable[[Connection], None],
        host: str = "127.0.0.1",
        port: int = 0,
        io_timeout: float | None = DEFAULT_IO_TIMEOUT,
        name: str = "tcp-server",
    ) -> None:
        self._handler = handler
        self._host = host
        self._port = port
        self._io_timeout = io_timeout
        self._name = name
        self._listener: socket.socket | None = None
        self._accept_thread: threading.Thread | None = None
        self._open_lock = threading.Lock()
        self._open_socks: set[socket.socket] = set()
        self._stopping = threading.Event()

    @property
    def address(self) -> tuple[str, int]:
        assert self._listener is not None, "server not started"
        addr = self._listener.getsockname()
        return addr[0], addr[1]

    def start(self) -> "TcpServer":
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((self._host, self._port))
        listener.listen(128)
        self._listener = listener
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name=f"{self._name}-accept", daemon=True
        )
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        assert self._listener is not None
        while not self._stopping.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                break
            sock.settimeout(self._io_timeout)
            try:
                # Request/response turnarounds are latency-bound; Nagle only hurts.
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            except OSError:
                pass
            with self._open_lock:
                self._open_socks.add(sock)
            thread = threading.Thread(
                target=self._run_handler, args=(sock, addr[0]), name=self._name, daemon=True
            )
            thread.start()

    def _run_handler(self, sock: socket.socket, peer_ip: str) -> None:
        conn = SocketConnection(sock, client_ip=peer_ip)
        try:
            self._handler(conn)
        except Exception:
            if not self._stopping.is_set():
                log.exception("%s: connection handler crashed", self._name)
        finally:
            conn.close()
            with self._open_lock:
                self._open_socks.discard(sock)

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            # close() alone does not wake a thread blocked in accept();
            # shutdown() does.
            try:
                self._listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                self._listener.close()
            except OSError:
                pass
        with self._open_lock:
            doomed = list(self._open_socks)
        for sock in doomed:
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                sock.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
