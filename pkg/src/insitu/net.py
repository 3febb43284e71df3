"""Socket plumbing shared by the rank mesh, steering bus and stream server.

Local TCP streams stand in for MPI point-to-point; every protocol frames its
own messages (magic + fixed header + payload) so a different transport could
be swapped in without touching message layouts.
"""

from __future__ import annotations

import socket
import struct
import threading
import time


class ConnectionClosed(ConnectionError):
    pass


def recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionClosed(f"peer closed with {len(buf)}/{n} bytes read")
        buf.extend(chunk)
    return bytes(buf)


class FrameSocket:
    """A duplex socket with a write lock so multiple threads can send frames."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._send_lock = threading.Lock()
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def send(self, data: bytes) -> None:
        with self._send_lock:
            self.sock.sendall(data)

    def recv_exact(self, n: int) -> bytes:
        return recv_exact(self.sock, n)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()

    def settimeout(self, t) -> None:
        self.sock.settimeout(t)


def listen_local(port: int = 0) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("127.0.0.1", port))
    srv.listen(64)
    return srv


def dial(port: int, timeout_s: float = 10.0, host: str = "127.0.0.1") -> socket.socket:
    """Connect with retry while the listener may still be coming up."""
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout_s)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.02)


# -- hello handshake ---------------------------------------------------------

HELLO_FMT = "<4sBH"  # magic, role, rank
ROLE_SIM = 1
ROLE_RENDER = 2
ROLE_CLIENT = 3


def send_hello(sock: socket.socket, role: int, rank: int) -> None:
    sock.sendall(struct.pack(HELLO_FMT, b"HELO", role, rank))


def recv_hello(sock: socket.socket) -> tuple[int, int]:
    magic, role, rank = struct.unpack(HELLO_FMT, recv_exact(sock, struct.calcsize(HELLO_FMT)))
    if magic != b"HELO":
        raise ConnectionClosed(f"bad hello magic {magic!r}")
    return role, rank


# -- launcher rendezvous -----------------------------------------------------
#
# Children register their listener ports; once all expected registrations are
# in, everyone receives the complete port map.  Entries are (role, rank, tag).

_REG_FMT = "<4sBHBH"  # magic, role, rank, n_entries ... entries follow
_ENTRY_FMT = "<16sH"  # tag (padded ascii), port


def rendezvous_serve(srv: socket.socket, expected: int) -> None:
    """Run in the launcher: collect `expected` registrations, broadcast the map."""
    conns = []
    entries: list[tuple[str, int]] = []
    for _ in range(expected):
        conn, _ = srv.accept()
        magic = recv_exact(conn, 4)
        if magic != b"REGI":
            conn.close()
            raise ConnectionClosed(f"bad registration magic {magic!r}")
        (n,) = struct.unpack("<H", recv_exact(conn, 2))
        for _ in range(n):
            tag, port = struct.unpack(_ENTRY_FMT, recv_exact(conn, struct.calcsize(_ENTRY_FMT)))
            entries.append((tag.rstrip(b"\0").decode(), port))
        conns.append(conn)
    blob = struct.pack("<4sH", b"PMAP", len(entries))
    for tag, port in entries:
        blob += struct.pack(_ENTRY_FMT, tag.encode().ljust(16, b"\0"), port)
    for conn in conns:
        conn.sendall(blob)
        conn.close()


def rendezvous_register(port: int, my_entries: dict[str, int], timeout_s: float = 15.0) -> dict[str, int]:
    """Run in each child: register own listener ports, receive everyone's."""
    sock = dial(port, timeout_s)
    try:
        sock.settimeout(timeout_s)
        blob = struct.pack("<4sH", b"REGI", len(my_entries))
        for tag, p in my_entries.items():
            blob += struct.pack(_ENTRY_FMT, tag.encode().ljust(16, b"\0"), p)
        sock.sendall(blob)
        magic = recv_exact(sock, 4)
        if magic != b"PMAP":
            raise ConnectionClosed(f"bad port map magic {magic!r}")
        (n,) = struct.unpack("<H", recv_exact(sock, 2))
        out = {}
        for _ in range(n):
            tag, p = struct.unpack(_ENTRY_FMT, recv_exact(sock, struct.calcsize(_ENTRY_FMT)))
            out[tag.rstrip(b"\0").decode()] = p
        return out
    finally:
        sock.close()
