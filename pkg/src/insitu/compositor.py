"""Sort-last compositing: binary-swap exchange over power-of-two ranks.

Each rank starts with a full-size rendering of its own particles.  At stage
s, partners (rank XOR 2^s) trade halves of their current flat-pixel region
and composite the half they keep; after log2(k) stages every rank owns an
exact 1/k tile, gathered at rank 0 into the final frame.

Stage message framing: magic "BSWP", stage u8, sender_rank u16, frame_seq
u64, payload_len u32, payload.
"""

from __future__ import annotations

import queue
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

from insitu.config import is_power_of_two, log2_int
from insitu.net import ConnectionClosed, FrameSocket
from insitu.render.camera import CameraPose
from insitu.render.image import DepthImage, PIXEL_BYTES
from insitu.render.vdi import VDI, DEFAULT_MERGE_TOL, merge_segment_lists

BSWP_HDR = "<4sBHQI"
BSWP_HDR_SIZE = struct.calcsize(BSWP_HDR)
GATH_HDR = "<4sHQII"  # magic, rank, frame_seq, region_start, payload_len
GATH_HDR_SIZE = struct.calcsize(GATH_HDR)

STAGE_TIMEOUT_S = 2.0


class CompositeError(RuntimeError):
    """A frame's exchange failed; the frame is abandoned, the run continues."""


class ProtocolError(CompositeError):
    """Stage/sequence mismatch between partners."""


class CompositeAhead(CompositeError):
    """A partner is already exchanging a newer frame: abandon this one and
    fast-forward to theirs (heals desync after an abandoned frame)."""

    def __init__(self, seq: int):
        super().__init__(f"partner ahead at frame {seq}")
        self.seq = seq


@dataclass(frozen=True)
class CompositeTopology:
    rank_count: int

    def __post_init__(self):
        if not is_power_of_two(self.rank_count):
            raise ValueError(f"rank_count {self.rank_count} is not a power of two")

    @property
    def stages(self) -> int:
        return log2_int(self.rank_count)

    def partner(self, rank: int, stage: int) -> int:
        return rank ^ (1 << stage)

    def keeps_front(self, rank: int, stage: int) -> bool:
        return (rank >> stage) & 1 == 0

    def owned_region(self, rank: int, total_pixels: int) -> tuple[int, int]:
        """Final (start, length) flat-pixel region of a rank."""
        if total_pixels % self.rank_count != 0:
            raise ValueError(
                f"{total_pixels} pixels not divisible by {self.rank_count} ranks"
            )
        start, length = 0, total_pixels
        for stage in range(self.stages):
            length //= 2
            if not self.keeps_front(rank, stage):
                start += length
        return start, length


# ---------------------------------------------------------------------------
# pairwise composite operators
# ---------------------------------------------------------------------------

def composite_depth_arrays(rgba_a, depth_a, rgba_b, depth_b):
    """Nearest-depth-wins; exact ties resolve to input a."""
    take_b = depth_b < depth_a
    rgba = np.where(take_b[..., None], rgba_b, rgba_a)
    depth = np.where(take_b, depth_b, depth_a)
    return rgba, depth


def composite_depth_pair(a: DepthImage, b: DepthImage) -> DepthImage:
    if a.rgba.shape != b.rgba.shape:
        raise ValueError(f"dimension mismatch: {a.rgba.shape} vs {b.rgba.shape}")
    rgba, depth = composite_depth_arrays(a.rgba, a.depth, b.rgba, b.depth)
    return DepthImage(rgba, depth)


def merge_vdi_arrays(counts_a, segs_a, counts_b, segs_b, s_max, merge_tol=DEFAULT_MERGE_TOL):
    """Per-pixel merge of two supersegment lists over flat pixel arrays."""
    n = len(counts_a)
    out_counts = np.zeros(n, dtype=np.uint16)
    out_segs = np.zeros((n, s_max, 6), dtype=np.float32)
    for p in range(n):
        ca, cb = int(counts_a[p]), int(counts_b[p])
        if ca + cb == 0:
            continue
        fronts = np.concatenate([segs_a[p, :ca, 0], segs_b[p, :cb, 0]])
        order = np.argsort(fronts, kind="stable")
        merged_in = np.concatenate([segs_a[p, :ca], segs_b[p, :cb]], axis=0)[order]
        f, b, c = merge_segment_lists(merged_in[:, 0], merged_in[:, 1], merged_in[:, 2:6])
        if len(f) > s_max:
            # re-cap with the construction-time rule (similarity + overflow)
            alpha = np.maximum(c[:, 3:4], 1e-6)
            base = c[:, :3] / alpha
            f, b, c = merge_segment_lists(f, b, c, base, s_max, merge_tol)
        k = len(f)
        out_counts[p] = k
        out_segs[p, :k, 0] = f
        out_segs[p, :k, 1] = b
        out_segs[p, :k, 2:6] = c
    return out_counts, out_segs


def merge_vdi_pair(a: VDI, b: VDI) -> VDI:
    if (a.width, a.height) != (b.width, b.height):
        raise ValueError("VDI dimension mismatch")
    if not a.camera.same_pose(b.camera):
        raise ValueError("VDIs rendered from different cameras cannot be merged")
    s_max = max(a.s_max, b.s_max)
    counts, segs = merge_vdi_arrays(
        a.counts.reshape(-1),
        a.segments.reshape(-1, a.s_max, 6),
        b.counts.reshape(-1),
        b.segments.reshape(-1, b.s_max, 6),
        s_max,
    )
    return VDI(a.camera, counts.reshape(a.height, a.width),
               segs.reshape(a.height, a.width, s_max, 6))


# ---------------------------------------------------------------------------
# region fragments: the unit binary swap splits, ships and composites
# ---------------------------------------------------------------------------

class DepthFragment:
    pixel_bytes = PIXEL_BYTES

    def __init__(self, rgba: np.ndarray, depth: np.ndarray):
        self.rgba = rgba  # (n, 4) uint8
        self.depth = depth  # (n,) float32

    def __len__(self) -> int:
        return len(self.depth)

    @staticmethod
    def from_image(img: DepthImage) -> "DepthFragment":
        return DepthFragment(img.flat_rgba().copy(), img.flat_depth().copy())

    def split(self, front_len: int):
        return (DepthFragment(self.rgba[:front_len], self.depth[:front_len]),
                DepthFragment(self.rgba[front_len:], self.depth[front_len:]))

    def composite(self, other: "DepthFragment") -> "DepthFragment":
        rgba, depth = composite_depth_arrays(self.rgba, self.depth, other.rgba, other.depth)
        return DepthFragment(rgba, depth)

    def to_bytes(self) -> bytes:
        return self.rgba.tobytes() + self.depth.astype("<f4").tobytes()

    @staticmethod
    def from_bytes(payload: bytes, count: int) -> "DepthFragment":
        if len(payload) != count * PIXEL_BYTES:
            raise ProtocolError(f"fragment payload {len(payload)} != {count * PIXEL_BYTES}")
        rgba = np.frombuffer(payload[: count * 4], dtype=np.uint8).reshape(count, 4).copy()
        depth = np.frombuffer(payload[count * 4:], dtype="<f4").copy()
        return DepthFragment(rgba, depth)


class VdiFragment:
    def __init__(self, counts: np.ndarray, segs: np.ndarray, merge_tol: float = DEFAULT_MERGE_TOL):
        self.counts = counts  # (n,) uint16
        self.segs = segs  # (n, s_max, 6) float32
        self.merge_tol = merge_tol

    def __len__(self) -> int:
        return len(self.counts)

    @property
    def s_max(self) -> int:
        return self.segs.shape[1]

    @staticmethod
    def from_vdi(vdi: VDI) -> "VdiFragment":
        return VdiFragment(vdi.counts.reshape(-1).copy(),
                           vdi.segments.reshape(-1, vdi.s_max, 6).copy())

    def split(self, front_len: int):
        return (VdiFragment(self.counts[:front_len], self.segs[:front_len], self.merge_tol),
                VdiFragment(self.counts[front_len:], self.segs[front_len:], self.merge_tol))

    def composite(self, other: "VdiFragment") -> "VdiFragment":
        counts, segs = merge_vdi_arrays(self.counts, self.segs, other.counts, other.segs,
                                        max(self.s_max, other.s_max), self.merge_tol)
        return VdiFragment(counts, segs, self.merge_tol)

    def to_bytes(self) -> bytes:
        used = self.segs[np.arange(self.s_max)[None, :] < self.counts[:, None].astype(np.int64)]
        return (struct.pack("<HI", self.s_max, len(self.counts))
                + self.counts.astype("<u2").tobytes()
                + used.astype("<f4").tobytes())

    @staticmethod
    def from_bytes(payload: bytes, count: int) -> "VdiFragment":
        s_max, n = struct.unpack_from("<HI", payload, 0)
        if n != count:
            raise ProtocolError(f"fragment count {n} != expected {count}")
        off = 6
        counts = np.frombuffer(payload, dtype="<u2", count=n, offset=off).astype(np.uint16)
        off += n * 2
        total = int(counts.sum())
        used = np.frombuffer(payload, dtype="<f4", count=total * 6, offset=off).reshape(total, 6)
        segs = np.zeros((n, s_max, 6), dtype=np.float32)
        segs[np.arange(s_max)[None, :] < counts[:, None].astype(np.int64)] = used
        return VdiFragment(counts, segs)


# ---------------------------------------------------------------------------
# exchange endpoints
# ---------------------------------------------------------------------------

class MeshEndpoint:
    """One rank's view of the all-pairs exchange fabric."""

    rank: int
    swap_bytes_sent: int

    def exchange(self, partner: int, stage: int, frame_seq: int, payload: bytes) -> bytes:
        raise NotImplementedError

    def gather_send(self, frame_seq: int, region_start: int, payload: bytes) -> None:
        raise NotImplementedError

    def gather_collect(self, frame_seq: int, rank_count: int) -> dict[int, tuple[int, bytes]]:
        raise NotImplementedError


class LocalMeshGroup:
    """Queue-backed mesh for tests: k endpoints in one process."""

    def __init__(self, rank_count: int):
        self.rank_count = rank_count
        self._queues = {
            (src, dst): queue.Queue()
            for src in range(rank_count)
            for dst in range(rank_count)
            if src != dst
        }
        self._gather: queue.Queue = queue.Queue()

    def endpoint(self, rank: int) -> "LocalMeshEndpoint":
        return LocalMeshEndpoint(self, rank)


class LocalMeshEndpoint(MeshEndpoint):
    def __init__(self, group: LocalMeshGroup, rank: int):
        self._group = group
        self.rank = rank
        self.swap_bytes_sent = 0
        self.timeout_s = STAGE_TIMEOUT_S
        self._stash: dict[int, tuple] = {}

    def exchange(self, partner, stage, frame_seq, payload):
        self._group._queues[(self.rank, partner)].put((stage, self.rank, frame_seq, payload))
        self.swap_bytes_sent += len(payload)
        while True:
            item = self._stash.pop(partner, None)
            if item is None:
                try:
                    item = self._group._queues[(partner, self.rank)].get(timeout=self.timeout_s)
                except queue.Empty:
                    raise CompositeError(
                        f"rank {self.rank}: partner {partner} silent at stage {stage}")
            got_stage, got_rank, got_seq, got_payload = item
            if got_seq < frame_seq:
                continue
            if got_seq > frame_seq:
                self._stash[partner] = item
                raise CompositeAhead(got_seq)
            break
        if got_stage != stage or got_rank != partner:
            raise ProtocolError(
                f"rank {self.rank}: expected stage {stage} seq {frame_seq} from {partner}, "
                f"got stage {got_stage} seq {got_seq} from {got_rank}"
            )
        return got_payload

    def gather_send(self, frame_seq, region_start, payload):
        self._group._gather.put((self.rank, frame_seq, region_start, payload))

    def gather_collect(self, frame_seq, rank_count):
        out = {}
        while len(out) < rank_count - 1:
            try:
                rank, seq, start, payload = self._group._gather.get(timeout=self.timeout_s)
            except queue.Empty:
                raise CompositeError(f"gather incomplete: {len(out) + 1}/{rank_count}")
            if seq != frame_seq:
                raise ProtocolError(f"gather seq {seq} != frame {frame_seq}")
            out[rank] = (start, payload)
        return out


class SocketMeshEndpoint(MeshEndpoint):
    """Mesh over per-pair duplex sockets.

    Every peer connection gets a reader thread that demultiplexes inbound
    traffic: BSWP frames to per-peer queues, GATH fragments to the gather
    queue (head only), VIZP parameters to an optional viz callback.  Sends
    during an exchange run on a helper thread so both partners can stream
    large halves without deadlocking on full socket buffers.
    """

    def __init__(self, rank: int, timeout_s: float = STAGE_TIMEOUT_S, viz_callback=None):
        self.rank = rank
        self.peers: dict[int, FrameSocket] = {}
        self.swap_bytes_sent = 0
        self.timeout_s = timeout_s
        self.viz_callback = viz_callback
        self._swap_queues: dict[int, queue.Queue] = {}
        self._swap_stash: dict[int, tuple] = {}
        self._gather_frames: queue.Queue = queue.Queue()
        self._gather_stash: list[tuple] = []
        self._readers: list[threading.Thread] = []
        self.closed = threading.Event()

    def add_peer(self, peer_rank: int, fs: FrameSocket) -> None:
        self.peers[peer_rank] = fs
        self._swap_queues[peer_rank] = queue.Queue()
        t = threading.Thread(target=self._reader_loop, args=(peer_rank, fs), daemon=True)
        t.start()
        self._readers.append(t)

    def _reader_loop(self, peer_rank: int, fs: FrameSocket) -> None:
        try:
            while not self.closed.is_set():
                magic = fs.recv_exact(4)
                if magic == b"BSWP":
                    rest = fs.recv_exact(BSWP_HDR_SIZE - 4)
                    stage, sender, seq, plen = struct.unpack("<BHQI", rest)
                    payload = fs.recv_exact(plen)
                    self._swap_queues[peer_rank].put((stage, sender, seq, payload))
                elif magic == b"GATH":
                    rest = fs.recv_exact(GATH_HDR_SIZE - 4)
                    sender, seq, start, plen = struct.unpack("<HQII", rest)
                    payload = fs.recv_exact(plen)
                    self._gather_frames.put((sender, seq, start, payload))
                elif magic == b"VIZP":
                    from insitu import steering as steer_mod
                    rest = fs.recv_exact(steer_mod.VIZP_FMT_SIZE - 4)
                    (count,) = struct.unpack_from("<H", rest, len(rest) - 2)
                    rest += fs.recv_exact(count * 8)
                    if self.viz_callback is not None:
                        self.viz_callback(magic + rest)
                else:
                    raise ConnectionClosed(f"unknown mesh magic {magic!r}")
        except (OSError, ConnectionError):
            self._swap_queues[peer_rank].put(None)  # wake any waiter

    def exchange(self, partner, stage, frame_seq, payload):
        sock = self.peers[partner]
        header = struct.pack(BSWP_HDR, b"BSWP", stage, self.rank, frame_seq, len(payload))
        err: list[Exception] = []

        def _send():
            try:
                sock.send(header + payload)
            except OSError as exc:
                err.append(exc)

        sender = threading.Thread(target=_send, daemon=True)
        sender.start()
        deadline = time.monotonic() + self.timeout_s
        try:
            while True:
                stashed = self._swap_stash.pop(partner, None)
                if stashed is not None:
                    item = stashed
                else:
                    try:
                        item = self._swap_queues[partner].get(
                            timeout=max(0.01, deadline - time.monotonic()))
                    except queue.Empty:
                        raise CompositeError(
                            f"rank {self.rank}: partner {partner} silent at stage {stage}"
                        ) from None
                if item is None:
                    raise CompositeError(f"rank {self.rank}: partner {partner} disconnected")
                got_stage, got_rank, got_seq, got_payload = item
                if got_seq < frame_seq:
                    continue  # leftovers of an abandoned frame
                if got_seq > frame_seq:
                    # partner moved on; keep their message for the next frame
                    self._swap_stash[partner] = item
                    raise CompositeAhead(got_seq)
                break
        finally:
            sender.join(timeout=self.timeout_s)
        if err:
            raise CompositeError(f"rank {self.rank}: send to {partner} failed: {err[0]}")
        self.swap_bytes_sent += len(payload)
        if got_stage != stage or got_rank != partner:
            raise ProtocolError(
                f"rank {self.rank}: expected stage {stage} seq {frame_seq} from {partner}, "
                f"got stage {got_stage} seq {got_seq} from {got_rank}"
            )
        return got_payload

    def gather_send(self, frame_seq, region_start, payload):
        sock = self.peers[0]
        sock.send(struct.pack(GATH_HDR, b"GATH", self.rank, frame_seq, region_start, len(payload))
                  + payload)

    def gather_collect(self, frame_seq, rank_count):
        out = {}
        deadline = time.monotonic() + self.timeout_s
        pending = self._gather_stash
        self._gather_stash = []
        while len(out) < rank_count - 1:
            if pending:
                rank, seq, start, payload = pending.pop()
            else:
                try:
                    rank, seq, start, payload = self._gather_frames.get(
                        timeout=max(0.01, deadline - time.monotonic()))
                except queue.Empty:
                    raise CompositeError(
                        f"gather incomplete: {len(out) + 1}/{rank_count}") from None
            if seq < frame_seq:
                continue  # stale fragment from an abandoned frame
            if seq > frame_seq:
                self._gather_stash.append((rank, seq, start, payload))
                continue
            out[rank] = (start, payload)
        return out

    def broadcast_viz(self, data: bytes) -> None:
        """Head-side: push a VIZP frame to every render peer."""
        for fs in self.peers.values():
            try:
                fs.send(data)
            except OSError:
                pass

    def close(self) -> None:
        self.closed.set()
        for fs in self.peers.values():
            fs.close()


# ---------------------------------------------------------------------------
# the collective
# ---------------------------------------------------------------------------

def binary_swap(fragment, rank: int, topology: CompositeTopology, mesh: MeshEndpoint,
                frame_seq: int = 0):
    """Run the log2(k) exchange; returns (region_start, owned fragment).

    All ranks must call collectively with consistent topology and frame_seq.
    """
    fragment_cls = type(fragment)
    start = 0
    for stage in range(topology.stages):
        partner = topology.partner(rank, stage)
        half = len(fragment) // 2
        front, back = fragment.split(half)
        if topology.keeps_front(rank, stage):
            keep, send = front, back
        else:
            keep, send = back, front
            start += half
        received = mesh.exchange(partner, stage, frame_seq, send.to_bytes())
        other = fragment_cls.from_bytes(received, len(keep))
        # depth-composite order is commutative up to the tie-break; keep the
        # lower rank as input `a` so both partners agree bit-for-bit
        if rank < partner:
            fragment = keep.composite(other)
        else:
            fragment = other.composite(keep)
    return start, fragment


def gather_frame(fragment, start: int, rank: int, topology: CompositeTopology,
                 mesh: MeshEndpoint, frame_seq: int = 0):
    """Assemble the composited frame at rank 0; returns fragments by region."""
    if rank != 0:
        mesh.gather_send(frame_seq, start, fragment.to_bytes())
        return None
    pieces = {0: (start, fragment)}
    if topology.rank_count > 1:
        fragment_cls = type(fragment)
        length = len(fragment)
        for other_rank, (other_start, payload) in mesh.gather_collect(
            frame_seq, topology.rank_count
        ).items():
            pieces[other_rank] = (other_start, fragment_cls.from_bytes(payload, length))
    return pieces


def assemble_depth_image(pieces: dict, width: int, height: int) -> DepthImage:
    img = DepthImage.background(width, height)
    flat_rgba = img.flat_rgba()
    flat_depth = img.flat_depth()
    for start, frag in pieces.values():
        flat_rgba[start:start + len(frag)] = frag.rgba
        flat_depth[start:start + len(frag)] = frag.depth
    return img


def assemble_vdi(pieces: dict, camera: CameraPose, width: int, height: int, s_max: int) -> VDI:
    vdi = VDI.empty(camera, width, height, s_max)
    counts = vdi.counts.reshape(-1)
    segs = vdi.segments.reshape(-1, s_max, 6)
    for start, frag in pieces.values():
        counts[start:start + len(frag)] = frag.counts
        n_slots = min(s_max, frag.s_max)
        segs[start:start + len(frag), :n_slots] = frag.segs[:, :n_slots]
    return vdi
