"""Head-node streaming service: composited frames out, steering in.

Per-client delivery is a depth-1 newest-wins slot: a stalled client only ever
costs itself frames, never stalls compositing or the simulation.  Clients may
speak the raw framed TCP protocol (opening with the 4-byte hello "RAWC") or
upgrade to WebSocket (opening with an HTTP GET), which is what the browser
cockpit uses; the framed payloads are identical either way.

Wire formats (little-endian):
  frame  "FRM0" frame_seq u64, sim_step u64, capture_timestamp u64 (us),
         width u16, height u16, encoding u8, payload_len u32, payload
  stats  "STAT" fps f64, sim_sps f64, steer_roundtrip_ms f64 (-1 if stale),
         rank_count u16, rank_state u8 x rank_count (1 = ok)
  echo   "ECHO" capture_timestamp u64   (client -> server)
  reply  "SRSP" seq u64, accepted u8, msg_len u16, msg   (head -> client)

Frame payload encodings: 0 raw RGBA8 rows; 1 per-row RLE over 4-byte pixels
(count u8 >= 1 + pixel, or literal marker 0x00 + count u8 + pixels); 2 the
renderer's VDI serialization, verbatim.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from insitu.net import ConnectionClosed, FrameSocket, listen_local, recv_exact
from insitu.render.image import DepthImage
from insitu.render.vdi import VDI, vdi_to_bytes
from insitu import steering as steer_mod

log = logging.getLogger(__name__)

FRM_FMT = "<4sQQQHHBI"
FRM_SIZE = struct.calcsize(FRM_FMT)
STAT_FMT = "<4sdddH"
ECHO_FMT = "<4sQ"
ECHO_SIZE = struct.calcsize(ECHO_FMT)
SRSP_FMT = "<4sQBH"

ENC_RAW = 0
ENC_RLE = 1
ENC_VDI = 2

ECHO_STALE_S = 2.0


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class FrameMessage:
    frame_seq: int
    sim_step: int
    capture_timestamp: int  # microseconds
    width: int
    height: int
    encoding: int
    payload: bytes

    def encode(self) -> bytes:
        return struct.pack(
            FRM_FMT, b"FRM0", self.frame_seq, self.sim_step, self.capture_timestamp,
            self.width, self.height, self.encoding, len(self.payload),
        ) + self.payload

    @staticmethod
    def decode(data: bytes) -> "FrameMessage":
        magic, seq, step, ts, w, h, enc, plen = struct.unpack_from(FRM_FMT, data, 0)
        if magic != b"FRM0":
            raise ValueError(f"bad frame magic {magic!r}")
        payload = data[FRM_SIZE:FRM_SIZE + plen]
        if len(payload) != plen:
            raise ValueError("truncated frame payload")
        return FrameMessage(seq, step, ts, w, h, enc, payload)


@dataclass(frozen=True)
class StatsMessage:
    frames_per_second: float
    sim_steps_per_second: float
    steer_roundtrip_ms: float  # -1.0 when no echo within the staleness window
    rank_ok: tuple

    def encode(self) -> bytes:
        return struct.pack(
            STAT_FMT, b"STAT", self.frames_per_second, self.sim_steps_per_second,
            self.steer_roundtrip_ms, len(self.rank_ok),
        ) + bytes(1 if ok else 0 for ok in self.rank_ok)

    @staticmethod
    def decode(data: bytes) -> "StatsMessage":
        magic, fps, sps, rt, n = struct.unpack_from(STAT_FMT, data, 0)
        if magic != b"STAT":
            raise ValueError(f"bad stats magic {magic!r}")
        states = tuple(b == 1 for b in data[struct.calcsize(STAT_FMT):][:n])
        return StatsMessage(fps, sps, rt, states)


# ---------------------------------------------------------------------------
# payload encodings
# ---------------------------------------------------------------------------

def rle_encode_rgba(rgba: np.ndarray) -> bytes:
    """Per-row run-length coding over 4-byte pixels.

    Greedy: repeats of >= 2 become run tokens (count u8 1..255 + pixel);
    everything else accumulates into literal tokens (0x00 + count u8 +
    pixels).  A row never shares tokens with the next.
    """
    h, w = rgba.shape[:2]
    rows = rgba.reshape(h, w, 4)
    out = bytearray()
    for y in range(h):
        row = rows[y]
        # run length at each position, computed vectorized
        same = np.empty(w, dtype=bool)
        same[0] = False
        if w > 1:
            same[1:] = (row[1:] == row[:-1]).all(axis=1)
        x = 0
        lit_start = -1
        while x < w:
            run = 1
            while x + run < w and same[x + run] and run < 255:
                run += 1
            if run >= 2:
                if lit_start >= 0:
                    _flush_literal(out, row, lit_start, x)
                    lit_start = -1
                out.append(run)
                out += row[x].tobytes()
                x += run
            else:
                if lit_start < 0:
                    lit_start = x
                x += 1
                if x - lit_start == 255:
                    _flush_literal(out, row, lit_start, x)
                    lit_start = -1
        if lit_start >= 0:
            _flush_literal(out, row, lit_start, w)
    return bytes(out)


def _flush_literal(out: bytearray, row: np.ndarray, start: int, stop: int) -> None:
    out.append(0)
    out.append(stop - start)
    out += row[start:stop].tobytes()


def rle_decode_rgba(payload: bytes, width: int, height: int) -> np.ndarray:
    out = np.empty((height * width, 4), dtype=np.uint8)
    pos = 0
    pix = 0
    data = memoryview(payload)
    while pix < height * width:
        marker = data[pos]
        pos += 1
        if marker == 0:
            count = data[pos]
            pos += 1
            flat = np.frombuffer(data[pos:pos + count * 4], dtype=np.uint8)
            out[pix:pix + count] = flat.reshape(count, 4)
            pos += count * 4
        else:
            value = np.frombuffer(data[pos:pos + 4], dtype=np.uint8)
            out[pix:pix + marker] = value
            pos += 4
        pix += marker if marker else count
    if pos != len(payload):
        raise EncodingError(f"trailing rle bytes: {len(payload) - pos}")
    return out.reshape(height, width, 4)


def encode_frame(content, encoding: int, frame_seq: int, sim_step: int,
                 capture_timestamp: int | None = None) -> FrameMessage:
    """Serialize a DepthImage or VDI into a FrameMessage."""
    if capture_timestamp is None:
        capture_timestamp = time.monotonic_ns() // 1000
    if encoding == ENC_RAW:
        if not isinstance(content, DepthImage):
            raise EncodingError("raw encoding needs a DepthImage")
        payload = content.rgba.tobytes()
    elif encoding == ENC_RLE:
        if not isinstance(content, DepthImage):
            raise EncodingError("rle encoding needs a DepthImage")
        payload = rle_encode_rgba(content.rgba)
    elif encoding == ENC_VDI:
        if not isinstance(content, VDI):
            raise EncodingError("vdi encoding needs a VDI")
        payload = vdi_to_bytes(content)
    else:
        raise EncodingError(f"unsupported encoding id {encoding}")
    return FrameMessage(frame_seq, sim_step, capture_timestamp,
                        content.width, content.height, encoding, payload)


def decode_frame_payload(msg: FrameMessage):
    """Inverse of encode_frame: DepthImage rgba (no depth) or VDI."""
    if msg.encoding == ENC_RAW:
        rgba = np.frombuffer(msg.payload, dtype=np.uint8).reshape(msg.height, msg.width, 4)
        return rgba.copy()
    if msg.encoding == ENC_RLE:
        return rle_decode_rgba(msg.payload, msg.width, msg.height)
    if msg.encoding == ENC_VDI:
        from insitu.render.vdi import vdi_from_bytes
        return vdi_from_bytes(msg.payload)
    raise EncodingError(f"unsupported encoding id {msg.encoding}")


# ---------------------------------------------------------------------------
# websocket (RFC 6455, binary frames only)
# ---------------------------------------------------------------------------

_WS_GUID = b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def websocket_accept_key(client_key: str) -> str:
    digest = hashlib.sha1(client_key.encode() + _WS_GUID).digest()
    return base64.b64encode(digest).decode()


def websocket_handshake(sock: socket.socket, first_bytes: bytes) -> bool:
    """Read the HTTP upgrade request (first_bytes already consumed) and reply."""
    data = bytearray(first_bytes)
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            return False
        data.extend(chunk)
    headers = {}
    for line in bytes(data).split(b"\r\n")[1:]:
        if b":" in line:
            key, _, val = line.partition(b":")
            headers[key.strip().lower()] = val.strip()
    key = headers.get(b"sec-websocket-key")
    if key is None:
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        return False
    accept = websocket_accept_key(key.decode())
    sock.sendall(
        b"HTTP/1.1 101 Switching Protocols\r\n"
        b"Upgrade: websocket\r\n"
        b"Connection: Upgrade\r\n"
        b"Sec-WebSocket-Accept: " + accept.encode() + b"\r\n\r\n"
    )
    return True


def ws_wrap_binary(payload: bytes) -> bytes:
    n = len(payload)
    if n < 126:
        header = struct.pack("!BB", 0x82, n)
    elif n < 65536:
        header = struct.pack("!BBH", 0x82, 126, n)
    else:
        header = struct.pack("!BBQ", 0x82, 127, n)
    return header + payload


def ws_read_message(sock: socket.socket) -> bytes | None:
    """One client message (unmasked on return); None on close frame."""
    while True:
        b0, b1 = recv_exact(sock, 2)
        opcode = b0 & 0x0F
        masked = b1 & 0x80
        length = b1 & 0x7F
        if length == 126:
            (length,) = struct.unpack("!H", recv_exact(sock, 2))
        elif length == 127:
            (length,) = struct.unpack("!Q", recv_exact(sock, 8))
        mask = recv_exact(sock, 4) if masked else b"\0\0\0\0"
        payload = bytearray(recv_exact(sock, length))
        if masked:
            for i in range(length):
                payload[i] ^= mask[i % 4]
        if opcode == 0x8:  # close
            return None
        if opcode == 0x9:  # ping -> pong
            sock.sendall(struct.pack("!BB", 0x8A, len(payload)) + bytes(payload))
            continue
        if opcode in (0x1, 0x2):
            return bytes(payload)
        # ignore pongs/continuations of control traffic


# ---------------------------------------------------------------------------
# the server
# ---------------------------------------------------------------------------

class _Client:
    def __init__(self, server: "StreamServer", fs: FrameSocket, is_ws: bool, cid: int):
        self.server = server
        self.fs = fs
        self.is_ws = is_ws
        self.cid = cid
        self.slot: FrameMessage | None = None
        self.slot_cond = threading.Condition()
        self.dropped = 0
        self.sent = 0
        self.last_seq = 0
        self.alive = True

    def offer(self, frame: FrameMessage) -> None:
        with self.slot_cond:
            if self.slot is not None:
                self.dropped += 1
            self.slot = frame
            self.slot_cond.notify()

    def send_bytes(self, payload: bytes) -> None:
        self.fs.send(ws_wrap_binary(payload) if self.is_ws else payload)

    def writer_loop(self) -> None:
        last_stats = 0.0
        try:
            while self.alive:
                with self.slot_cond:
                    self.slot_cond.wait(timeout=0.25)
                    frame, self.slot = self.slot, None
                if frame is not None:
                    self.send_bytes(frame.encode())
                    self.sent += 1
                    self.last_seq = frame.frame_seq
                now = time.monotonic()
                if now - last_stats >= 1.0:
                    last_stats = now
                    self.send_bytes(self.server.current_stats().encode())
        except (OSError, ConnectionError):
            pass
        finally:
            self.alive = False

    def reader_loop(self) -> None:
        try:
            if self.is_ws:
                while self.alive:
                    msg = ws_read_message(self.fs.sock)
                    if msg is None:
                        break
                    self.server.handle_inbound(self, msg)
            else:
                while self.alive:
                    magic = self.fs.recv_exact(4)
                    self.server.handle_inbound_stream(self, magic)
        except (OSError, ConnectionError):
            pass
        finally:
            self.alive = False
            self.fs.close()
            self.server.forget(self)


class StreamServer:
    """Accepts clients, streams newest frames, forwards steering inbound.

    steer_submit(kind, name, value) -> SteeringCommand (or raises
    steering.Rejected); viz_submit(VizParam); both supplied by the runtime.
    """

    def __init__(self, port: int = 0, steer_submit=None, viz_submit=None,
                 stats_provider=None):
        self.listener = listen_local(port)
        self.port = self.listener.getsockname()[1]
        self.steer_submit = steer_submit
        self.viz_submit = viz_submit
        self.stats_provider = stats_provider
        self._clients: list[_Client] = []
        self._lock = threading.Lock()
        self._next_cid = 1
        self._echo_rt_ms = -1.0
        self._echo_at = 0.0
        self.frames_offered = 0
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()

    # client management --------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, _ = self.listener.accept()
            except OSError:
                break
            threading.Thread(target=self._setup_client, args=(sock,), daemon=True).start()

    def _setup_client(self, sock: socket.socket) -> None:
        try:
            first = recv_exact(sock, 4)
            is_ws = first.startswith(b"GET")
            if is_ws:
                if not websocket_handshake(sock, first):
                    sock.close()
                    return
            elif first != b"RAWC":
                log.warning("stream: unknown client hello %r", first)
                sock.close()
                return
            with self._lock:
                client = _Client(self, FrameSocket(sock), is_ws, self._next_cid)
                self._next_cid += 1
                self._clients.append(client)
            threading.Thread(target=client.writer_loop, daemon=True).start()
            threading.Thread(target=client.reader_loop, daemon=True).start()
        except OSError:
            sock.close()

    def forget(self, client: _Client) -> None:
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)

    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    # frame path ----------------------------------------------------------

    def offer_frame(self, frame: FrameMessage) -> None:
        """Non-blocking: hand the newest frame to every client slot."""
        self.frames_offered += 1
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            client.offer(frame)

    # inbound -------------------------------------------------------------

    def handle_inbound(self, client: _Client, msg: bytes) -> None:
        magic = msg[:4]
        if magic == b"STER":
            self._steer(client, msg)
        elif magic == b"VIZP":
            if self.viz_submit is not None:
                param, _ = steer_mod.decode_viz(msg)
                self.viz_submit(param)
        elif magic == b"ECHO":
            _, ts = struct.unpack_from(ECHO_FMT, msg, 0)
            now_us = time.monotonic_ns() // 1000
            self._echo_rt_ms = max(0.0, (now_us - ts) / 1000.0)
            self._echo_at = time.monotonic()
        else:
            log.warning("stream: unknown inbound magic %r", magic)

    def handle_inbound_stream(self, client: _Client, magic: bytes) -> None:
        """Raw-mode framing: magic already read, pull the rest per protocol."""
        fs = client.fs
        if magic == b"STER":
            rest = fs.recv_exact(steer_mod.STER_FMT_SIZE - 4)
            (name_len,) = struct.unpack_from("<H", rest, len(rest) - 2)
            rest += fs.recv_exact(name_len + 8)
            self._steer(client, magic + rest)
        elif magic == b"VIZP":
            rest = fs.recv_exact(steer_mod.VIZP_FMT_SIZE - 4)
            (count,) = struct.unpack_from("<H", rest, len(rest) - 2)
            rest += fs.recv_exact(count * 8)
            if self.viz_submit is not None:
                param, _ = steer_mod.decode_viz(magic + rest)
                self.viz_submit(param)
        elif magic == b"ECHO":
            rest = fs.recv_exact(ECHO_SIZE - 4)
            self.handle_inbound(client, magic + rest)
        else:
            raise ConnectionClosed(f"unknown inbound magic {magic!r}")

    def _steer(self, client: _Client, msg: bytes) -> None:
        cmd, _ = steer_mod.decode_command(msg)
        if self.steer_submit is None:
            return
        try:
            accepted = self.steer_submit(cmd.kind, cmd.name, cmd.value)
            reply = struct.pack(SRSP_FMT, b"SRSP", accepted.seq, 1, 0)
        except steer_mod.Rejected as exc:
            reason = str(exc).encode()[:65535]
            reply = struct.pack(SRSP_FMT, b"SRSP", 0, 0, len(reason)) + reason
        try:
            client.send_bytes(reply)
        except (OSError, ConnectionError):
            pass

    # stats ----------------------------------------------------------------

    def steer_roundtrip_ms(self) -> float:
        if time.monotonic() - self._echo_at > ECHO_STALE_S:
            return -1.0
        return self._echo_rt_ms

    def current_stats(self) -> StatsMessage:
        fps, sps, ranks = 0.0, 0.0, ()
        if self.stats_provider is not None:
            fps, sps, ranks = self.stats_provider()
        return StatsMessage(fps, sps, self.steer_roundtrip_ms(), tuple(ranks))

    def drop_counts(self) -> dict[int, int]:
        with self._lock:
            return {c.cid: c.dropped for c in self._clients}

    def close(self) -> None:
        self._stop.set()
        try:
            self.listener.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            client.alive = False
            client.fs.close()
