import socket
import struct
import threading
import time

import numpy as np
import pytest

from insitu.net import dial, recv_exact
from insitu.render.camera import look_at
from insitu.render.colormap import ColorMap
from insitu.render.image import DepthImage
from insitu.render.render import build_vdi
from insitu.render.vdi import vdi_to_bytes
from insitu.snapshot import ParticleSnapshot
from insitu.steering import Rejected, SteeringCommand
from insitu.stream import (
    ENC_RAW,
    ENC_RLE,
    ENC_VDI,
    FRM_SIZE,
    FrameMessage,
    StatsMessage,
    StreamServer,
    decode_frame_payload,
    encode_frame,
    rle_decode_rgba,
    rle_encode_rgba,
    websocket_accept_key,
    ws_wrap_binary,
)


def image_of(rgba_array):
    rgba = np.asarray(rgba_array, dtype=np.uint8)
    depth = np.where(rgba[:, :, 3] > 0, 1.0, np.inf).astype(np.float32)
    return DepthImage(rgba, depth)


class TestRle:
    def test_two_black_pixels_single_run(self):
        img = image_of(np.zeros((1, 2, 4), dtype=np.uint8))
        payload = rle_encode_rgba(img.rgba)
        assert payload == b"\x02\x00\x00\x00\x00"

    def test_literal_sequence(self):
        rgba = np.arange(3 * 4, dtype=np.uint8).reshape(1, 3, 4)
        payload = rle_encode_rgba(rgba)
        assert payload[0] == 0  # literal marker
        assert payload[1] == 3
        assert payload[2:] == rgba.tobytes()

    def test_runs_do_not_cross_rows(self):
        rgba = np.zeros((2, 2, 4), dtype=np.uint8)
        payload = rle_encode_rgba(rgba)
        # one count-2 run per row, never one count-4 run
        assert payload == b"\x02\x00\x00\x00\x00" * 2

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_roundtrip_random(self, seed):
        rng = np.random.default_rng(seed)
        h, w = 13, 31
        rgba = rng.integers(0, 4, (h, w, 4), dtype=np.uint8) * 60  # frequent runs
        assert np.array_equal(rle_decode_rgba(rle_encode_rgba(rgba), w, h), rgba)

    def test_roundtrip_long_runs(self):
        rgba = np.zeros((2, 600, 4), dtype=np.uint8)  # runs longer than 255
        rgba[1, :, 0] = 7
        assert np.array_equal(rle_decode_rgba(rle_encode_rgba(rgba), 600, 2), rgba)


class TestFrameMessage:
    def test_golden_bytes(self):
        img = image_of([[[1, 2, 3, 255], [0, 0, 0, 0]]])
        msg = encode_frame(img, ENC_RAW, frame_seq=5, sim_step=77, capture_timestamp=123456)
        expected = struct.pack("<4sQQQHHBI", b"FRM0", 5, 77, 123456, 2, 1, 0, 8)
        expected += bytes([1, 2, 3, 255, 0, 0, 0, 0])
        assert msg.encode() == expected

    def test_decode_roundtrip(self):
        rng = np.random.default_rng(3)
        rgba = rng.integers(0, 255, (6, 9, 4), dtype=np.uint8)
        img = image_of(rgba)
        for encoding in (ENC_RAW, ENC_RLE):
            msg = encode_frame(img, encoding, 9, 100)
            again = FrameMessage.decode(msg.encode())
            assert again == msg
            assert np.array_equal(decode_frame_payload(again), rgba)

    def test_vdi_payload_is_file_format(self):
        rng = np.random.default_rng(1)
        pos = rng.uniform(1, 9, (20, 3)).astype(np.float32)
        snap = ParticleSnapshot(4, 0.0, pos, np.zeros_like(pos))
        cam = look_at((5, 5, 20), (5, 5, 5))
        vdi = build_vdi(snap, cam, (16, 12), radius=0.5, cmap=ColorMap(), opacity=0.9)
        msg = encode_frame(vdi, ENC_VDI, 2, 4)
        assert msg.payload == vdi_to_bytes(vdi)
        decoded = decode_frame_payload(msg)
        assert np.array_equal(decoded.counts, vdi.counts)

    def test_unsupported_encoding(self):
        img = image_of(np.zeros((2, 2, 4), dtype=np.uint8))
        with pytest.raises(ValueError):
            encode_frame(img, 9, 1, 1)

    def test_stats_roundtrip(self):
        msg = StatsMessage(59.5, 980.0, 3.25, (True, False, True))
        again = StatsMessage.decode(msg.encode())
        assert again == msg


class TestWebSocket:
    def test_accept_key_rfc_example(self):
        # the handshake example key from RFC 6455 section 1.3
        assert (websocket_accept_key("dGhlIHNhbXBsZSBub25jZQ==")
                == "s3pPLMBiTxaQ9kYGzzhZRbK+xOo=")

    def test_binary_frame_lengths(self):
        short = ws_wrap_binary(b"x" * 10)
        assert short[0] == 0x82 and short[1] == 10
        medium = ws_wrap_binary(b"x" * 300)
        assert medium[1] == 126
        assert struct.unpack("!H", medium[2:4])[0] == 300
        large = ws_wrap_binary(b"x" * 70000)
        assert large[1] == 127
        assert struct.unpack("!Q", large[2:10])[0] == 70000


def read_messages(sock, deadline, sink):
    """Raw-protocol reader used by test clients."""
    try:
        while time.monotonic() < deadline:
            magic = recv_exact(sock, 4)
            if magic == b"FRM0":
                rest = recv_exact(sock, FRM_SIZE - 4)
                seq, step, ts, w, h, enc, plen = struct.unpack("<QQQHHBI", rest)
                payload = recv_exact(sock, plen)
                sink.setdefault("frames", []).append(
                    FrameMessage(seq, step, ts, w, h, enc, payload))
            elif magic == b"STAT":
                rest = recv_exact(sock, 26)
                (n,) = struct.unpack("<H", rest[24:26])
                body = recv_exact(sock, n)
                sink.setdefault("stats", []).append(StatsMessage.decode(magic + rest + body))
            elif magic == b"SRSP":
                rest = recv_exact(sock, 11)
                seq, ok, mlen = struct.unpack("<QBH", rest)
                msg = recv_exact(sock, mlen)
                sink.setdefault("srsp", []).append((seq, ok, msg.decode()))
    except (ConnectionError, OSError):
        pass


class TestStreamServer:
    def frame(self, seq, w=4, h=2):
        rgba = np.full((h, w, 4), seq % 256, dtype=np.uint8)
        return encode_frame(image_of(rgba), ENC_RAW, seq, seq * 10)

    def test_no_clients_never_blocks(self):
        server = StreamServer(0)
        for seq in range(1, 100):
            server.offer_frame(self.frame(seq))
        assert server.frames_offered == 99
        server.close()

    def test_slow_client_gets_newest_and_gaps_match_drops(self):
        server = StreamServer(0)
        sock = dial(server.port)
        sock.sendall(b"RAWC")
        time.sleep(0.2)  # client connected but not reading yet

        for seq in range(1, 8):
            server.offer_frame(self.frame(seq))
        time.sleep(0.3)  # writer drains the slot: newest only
        sink = {}
        reader = threading.Thread(target=read_messages,
                                  args=(sock, time.monotonic() + 0.6, sink))
        reader.start()
        reader.join()
        frames = sink.get("frames", [])
        assert frames, "client saw no frames"
        seqs = [f.frame_seq for f in frames]
        assert seqs == sorted(seqs)
        assert seqs[-1] == 7  # newest won
        gaps = (seqs[0] - 1) + sum(b - a - 1 for a, b in zip(seqs, seqs[1:]))
        drops = sum(server.drop_counts().values())
        assert gaps == drops
        sock.close()
        server.close()

    def test_two_clients_independent_streams(self):
        server = StreamServer(0)
        socks = []
        for _ in range(2):
            s = dial(server.port)
            s.sendall(b"RAWC")
            socks.append(s)
        time.sleep(0.2)
        sinks = [{}, {}]
        threads = [threading.Thread(target=read_messages,
                                    args=(s, time.monotonic() + 0.8, sink))
                   for s, sink in zip(socks, sinks)]
        for t in threads:
            t.start()
        for seq in range(1, 30):
            server.offer_frame(self.frame(seq))
            time.sleep(0.01)
        for t in threads:
            t.join()
        for sink in sinks:
            seqs = [f.frame_seq for f in sink.get("frames", [])]
            assert seqs and all(b > a for a, b in zip(seqs, seqs[1:]))
        for s in socks:
            s.close()
        server.close()

    def test_echo_measures_roundtrip(self):
        server = StreamServer(0)
        sock = dial(server.port)
        sock.sendall(b"RAWC")
        time.sleep(0.1)
        now_us = time.monotonic_ns() // 1000
        sock.sendall(struct.pack("<4sQ", b"ECHO", now_us - 10_000))  # 10 ms ago
        time.sleep(0.2)
        rt = server.steer_roundtrip_ms()
        assert 9.0 <= rt <= 500.0
        sock.close()
        server.close()

    def test_no_echo_reports_stale(self):
        server = StreamServer(0)
        assert server.steer_roundtrip_ms() == -1.0
        server.close()

    def test_steer_submission_accept_and_reject(self):
        def submit(kind, name, value):
            if name == "dt":
                return SteeringCommand(42, kind, 10, name, value)
            raise Rejected(f"unknown parameter {name!r}")

        server = StreamServer(0, steer_submit=submit)
        sock = dial(server.port)
        sock.sendall(b"RAWC")
        sink = {}
        reader = threading.Thread(target=read_messages,
                                  args=(sock, time.monotonic() + 0.8, sink))
        reader.start()
        sock.sendall(SteeringCommand(0, "set_param", 0, "dt", 0.002).encode())
        sock.sendall(SteeringCommand(0, "set_param", 0, "nope", 1.0).encode())
        reader.join()
        srsp = sink.get("srsp", [])
        assert (42, 1, "") in srsp
        rejected = [r for r in srsp if r[1] == 0]
        assert rejected and "nope" in rejected[0][2]
        sock.close()
        server.close()

    def test_websocket_client_end_to_end(self):
        server = StreamServer(0)
        sock = socket.create_connection(("127.0.0.1", server.port))
        key = "dGhlIHNhbXBsZSBub25jZQ=="
        sock.sendall(
            (f"GET / HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\n"
             f"Connection: Upgrade\r\nSec-WebSocket-Key: {key}\r\n"
             f"Sec-WebSocket-Version: 13\r\n\r\n").encode())
        response = b""
        while b"\r\n\r\n" not in response:
            response += sock.recv(4096)
        assert b"101 Switching Protocols" in response
        assert websocket_accept_key(key).encode() in response

        server.offer_frame(self.frame(3))
        # read one ws binary frame
        header = recv_exact(sock, 2)
        length = header[1] & 0x7F
        if length == 126:
            (length,) = struct.unpack("!H", recv_exact(sock, 2))
        payload = recv_exact(sock, length)
        assert payload[:4] in (b"FRM0", b"STAT")

        # client -> server messages are masked
        echo = struct.pack("<4sQ", b"ECHO", time.monotonic_ns() // 1000)
        mask = b"\x01\x02\x03\x04"
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(echo))
        sock.sendall(struct.pack("!BB", 0x82, 0x80 | len(echo)) + mask + masked)
        time.sleep(0.2)
        assert server.steer_roundtrip_ms() >= 0.0
        sock.close()
        server.close()
