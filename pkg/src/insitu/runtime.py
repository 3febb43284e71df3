"""Per-node process composition: sim and render processes per rank, head
services on rank 0's render process, a launcher that wires it all up.

Per rank there are two OS processes coupled only through shared memory: the
simulation loop (publishes snapshots, drains its steering inbox at step
boundaries) and the render/composite loop (acquires the newest snapshot,
renders, joins the binary-swap collective).  Rank 0's render process also
hosts the steering head and the stream server, mirroring the head-node role.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import struct
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass

import numpy as np

from insitu import _kernels
from insitu.compositor import (
    CompositeAhead,
    CompositeError,
    CompositeTopology,
    DepthFragment,
    SocketMeshEndpoint,
    VdiFragment,
    assemble_depth_image,
    assemble_vdi,
    binary_swap,
    gather_frame,
)
from insitu.config import RunSpec, next_power_of_two
from insitu.net import (
    ROLE_SIM,
    FrameSocket,
    dial,
    listen_local,
    recv_hello,
    rendezvous_register,
    rendezvous_serve,
    send_hello,
)
from insitu.render.camera import CameraPose, orbit_pose
from insitu.render.colormap import ColorMap
from insitu.render.render import build_vdi, composite_vdi_to_image, render_spheres
from insitu.shmem import (
    HEADER_SIZE,
    SegmentName,
    SegmentWriter,
    SnapshotChainReader,
    list_segments,
)
from insitu.sim.engine import InstabilityError, Simulation
from insitu.sim.exchange import BaseExchange, ExchangeError, LoopbackExchange
from insitu.snapshot import RECORD_BYTES, ParticleSnapshot
from insitu.steering import (
    VIZ_SET_CAMERA,
    VIZ_SET_COLOR_RANGE,
    VIZ_SET_MODE,
    VIZ_SET_RADIUS,
    RankInbox,
    RenderInbox,
    SteeringHead,
    decode_ack,
    decode_command,
)
from insitu.stream import ENC_VDI, StreamServer, encode_frame

log = logging.getLogger(__name__)

RING_FMT = "<4s4sII"  # magic RTRD, tag, rows, cols
RING_SIZE = struct.calcsize(RING_FMT)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 3


def default_camera(box_length: float) -> CameraPose:
    center = (box_length / 2,) * 3
    return orbit_pose(center, azimuth_deg=0.0, elevation_deg=12.0,
                      distance=2.1 * box_length, vertical_fov=50.0,
                      near=0.05, far=20.0 * box_length)


# ---------------------------------------------------------------------------
# socket ring exchange (simulation processes)
# ---------------------------------------------------------------------------

class SocketRingExchange(BaseExchange):
    """Neighbor trades over two duplex sockets: dialed right, accepted left."""

    def __init__(self, rank: int, rank_count: int, right: FrameSocket, left: FrameSocket,
                 timeout_s: float = 30.0):
        self.rank = rank
        self.rank_count = rank_count
        self._right = right
        self._left = left
        self._timeout = timeout_s
        right.settimeout(timeout_s)
        left.settimeout(timeout_s)

    @staticmethod
    def _pack(tag: str, arr: np.ndarray) -> bytes:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        rows = len(arr)
        cols = arr.shape[1] if arr.ndim == 2 else 1
        return struct.pack(RING_FMT, b"RTRD", tag.encode().ljust(4, b"\0"), rows, cols) \
            + arr.tobytes()

    @staticmethod
    def _unpack(fs: FrameSocket, tag: str) -> np.ndarray:
        magic, got_tag, rows, cols = struct.unpack(RING_FMT, fs.recv_exact(RING_SIZE))
        if magic != b"RTRD":
            raise ExchangeError(f"bad ring magic {magic!r}")
        got = got_tag.rstrip(b"\0").decode()
        if got != tag:
            raise ExchangeError(f"ring tag mismatch: expected {tag}, got {got}")
        data = fs.recv_exact(rows * cols * 8)
        arr = np.frombuffer(data, dtype=np.float64).reshape(rows, cols)
        return arr.copy()

    def trade(self, tag, to_left, to_right):
        to_left = np.ascontiguousarray(np.atleast_2d(to_left), dtype=np.float64)
        to_right = np.ascontiguousarray(np.atleast_2d(to_right), dtype=np.float64)
        err: list[Exception] = []

        def _send():
            try:
                self._left.send(self._pack(tag, to_left))
                self._right.send(self._pack(tag, to_right))
            except OSError as exc:
                err.append(exc)

        sender = threading.Thread(target=_send, daemon=True)
        sender.start()
        from_left = self._unpack(self._left, tag)
        from_right = self._unpack(self._right, tag)
        sender.join(self._timeout)
        if err:
            raise ExchangeError(f"ring send failed: {err[0]}")
        return from_left, from_right

    def ring_pass(self, payload):
        payload = np.ascontiguousarray(np.atleast_2d(payload), dtype=np.float64)
        err: list[Exception] = []

        def _send():
            try:
                self._right.send(self._pack("RING", payload))
            except OSError as exc:
                err.append(exc)

        sender = threading.Thread(target=_send, daemon=True)
        sender.start()
        received = self._unpack(self._left, "RING")
        sender.join(self._timeout)
        if err:
            raise ExchangeError(f"ring send failed: {err[0]}")
        return received.reshape(-1)

    def close(self):
        self._right.close()
        self._left.close()


# ---------------------------------------------------------------------------
# simulation process
# ---------------------------------------------------------------------------

def _write_stats(spec: RunSpec, name: str, payload: dict) -> None:
    if spec.stats_dir:
        path = os.path.join(spec.stats_dir, name)
        with open(path, "w") as fh:
            json.dump(payload, fh)


def sim_process_main(spec: RunSpec, rank: int, rdv_port: int, checksum: str) -> int:
    if spec.checksum() != checksum:
        log.error("sim %d: RunSpec checksum mismatch, aborting", rank)
        return EXIT_CONFIG
    k = spec.sim.rank_count
    entries = {}
    ring_listener = None
    if k > 1:
        ring_listener = listen_local(0)
        entries[f"sim{rank}"] = ring_listener.getsockname()[1]
    ports = rendezvous_register(rdv_port, entries)

    exchange: BaseExchange
    if k > 1:
        right_rank = (rank + 1) % k
        # accept from the left while dialing right; order-free via threads
        accepted: list = [None]
        def _accept():
            conn, _ = ring_listener.accept()
            role, peer = recv_hello(conn)
            accepted[0] = FrameSocket(conn)
        acc_thread = threading.Thread(target=_accept, daemon=True)
        acc_thread.start()
        right_sock = dial(ports[f"sim{right_rank}"])
        send_hello(right_sock, ROLE_SIM, rank)
        acc_thread.join(timeout=15.0)
        if accepted[0] is None:
            log.error("sim %d: left neighbor never connected", rank)
            return EXIT_ERROR
        exchange = SocketRingExchange(rank, k, FrameSocket(right_sock), accepted[0])
        ring_listener.close()
    else:
        exchange = LoopbackExchange()

    # steering inbox over the head connection
    steer_sock = FrameSocket(dial(ports["steer"]))
    send_hello(steer_sock.sock, ROLE_SIM, rank)
    inbox = RankInbox(rank)

    def _inbox_loop():
        try:
            while True:
                magic = steer_sock.recv_exact(4)
                if magic != b"STER":
                    raise ConnectionError(f"unexpected steer magic {magic!r}")
                from insitu.steering import STER_FMT_SIZE
                rest = steer_sock.recv_exact(STER_FMT_SIZE - 4)
                (name_len,) = struct.unpack_from("<H", rest, len(rest) - 2)
                rest += steer_sock.recv_exact(name_len + 8)
                cmd, _ = decode_command(magic + rest)
                log.debug("sim %d: received %s seq %d for step %d",
                          rank, cmd.kind, cmd.seq, cmd.apply_at_step)
                inbox.feed(cmd)
                from insitu.steering import encode_ack
                steer_sock.send(encode_ack(rank, cmd.seq))
        except (OSError, ConnectionError) as exc:
            log.debug("sim %d: steer inbox closed: %s", rank, exc)

    threading.Thread(target=_inbox_loop, daemon=True).start()

    status = EXIT_OK
    writer = None
    started = time.monotonic()
    try:
        engine = Simulation(spec.sim, rank, exchange)
        capacity = next_power_of_two(2 * (HEADER_SIZE + max(1, len(engine.pos)) * RECORD_BYTES))
        writer = SegmentWriter(SegmentName(rank, 0, spec.shm_prefix), capacity)
        writer = writer.publish(engine.snapshot()).writer
        # startup rendezvous only: this runtime always pairs a renderer per
        # rank, and a short run must not unlink the segment before it ever
        # attaches.  The publish path itself never waits for the reader.
        deadline = time.monotonic() + 10.0
        while writer.header()["reader_count"] == 0 and time.monotonic() < deadline:
            time.sleep(0.005)
        terminate = False
        while True:
            for cmd in inbox.poll(engine.sim_step, engine.paused):
                engine.apply_steering(cmd)
                if cmd.kind == "terminate":
                    terminate = True
            if engine.paused and not terminate:
                writer = writer.publish(engine.snapshot()).writer
                time.sleep(0.002)
                continue
            if k > 1 and not engine.paused:
                # collective exit: terminate may reach neighbors one boundary
                # apart, and an early exit would strand them mid-trade.  The
                # stepping ranks run in lockstep, so a per-step flag reduction
                # lets every rank stop at the same boundary.
                stopping = engine.exchange.allreduce_sum([1.0 if terminate else 0.0])[0]
                if stopping > 0 and not terminate:
                    # this rank's copy is still in flight; wait, apply, log
                    deadline = time.monotonic() + 2.0
                    while not terminate and time.monotonic() < deadline:
                        for cmd in inbox.poll(engine.sim_step, paused=True):
                            engine.apply_steering(cmd)
                            if cmd.kind == "terminate":
                                terminate = True
                        if not terminate:
                            time.sleep(0.0005)
                    break
            if terminate:
                break
            engine.step()
            if engine.sim_step % spec.sim.steps_per_publish == 0:
                writer = writer.publish(engine.snapshot()).writer
            if spec.sim_throttle_s > 0:
                time.sleep(spec.sim_throttle_s)
            if spec.max_steps and engine.sim_step >= spec.max_steps:
                break
        _write_stats(spec, f"sim{rank}.json", {
            "rank": rank,
            "steps": engine.sim_step,
            "wall_s": time.monotonic() - started,
            "late_commands": inbox.late_count,
            "applied": engine.applied_commands,
        })
    except InstabilityError as exc:
        log.error("sim %d: %s", rank, exc)
        status = EXIT_ERROR
    except (ExchangeError, ConnectionError, OSError) as exc:
        log.error("sim %d: exchange failed: %s", rank, exc)
        status = EXIT_ERROR
    finally:
        if writer is not None:
            writer.close(terminated=True)
        steer_sock.close()
        if isinstance(exchange, SocketRingExchange):
            exchange.close()
    return status


# ---------------------------------------------------------------------------
# render process (head services on rank 0)
# ---------------------------------------------------------------------------

class _HeadState:
    """Stream/steering plumbing that only exists on rank 0's render process."""

    def __init__(self, spec: RunSpec, mesh: SocketMeshEndpoint, viz_inbox: RenderInbox):
        self.spec = spec
        self.head = SteeringHead(spec.sim.rank_count, spec.delay_steps)
        self.mesh = mesh
        self.viz_inbox = viz_inbox
        self.frame_times: deque = deque(maxlen=600)
        self.step_marks: deque = deque(maxlen=600)
        self.frame_intervals_ms: list[float] = []
        self.steer_samples_ms: list[float] = []
        self._last_frame_at: float | None = None
        self.server: StreamServer | None = None
        self.steer_listener = listen_local(0)
        self.steer_port = self.steer_listener.getsockname()[1]
        self._sim_socks: list[FrameSocket] = []
        threading.Thread(target=self._accept_sims, daemon=True).start()
        if not spec.headless:
            self.server = StreamServer(
                spec.listen_port,
                steer_submit=self.head.submit,
                viz_submit=self.submit_viz,
                stats_provider=self.stats,
            )

    def _accept_sims(self) -> None:
        for _ in range(self.spec.sim.rank_count):
            conn, _ = self.steer_listener.accept()
            role, rank = recv_hello(conn)
            fs = FrameSocket(conn)
            self._sim_socks.append(fs)
            self.head.add_rank_sink(rank, fs.send)
            threading.Thread(target=self._ack_loop, args=(fs,), daemon=True).start()
        self.steer_listener.close()

    def _ack_loop(self, fs: FrameSocket) -> None:
        try:
            while True:
                from insitu.steering import SACK_SIZE
                data = fs.recv_exact(SACK_SIZE)
                rank, seq = decode_ack(data)
                self.head.ack(rank, seq)
        except (OSError, ConnectionError):
            pass

    def submit_viz(self, param) -> None:
        stamped = self.head.submit_viz(param.kind, param.values)
        self.viz_inbox.feed(stamped)
        self.mesh.broadcast_viz(stamped.encode())

    def note_frame(self, frame_seq: int, sim_step: int) -> None:
        now = time.monotonic()
        self.frame_times.append(now)
        self.step_marks.append((now, sim_step))
        if self._last_frame_at is not None:
            self.frame_intervals_ms.append((now - self._last_frame_at) * 1000.0)
        self._last_frame_at = now
        self.head.observe_frame(frame_seq)
        self.head.observe_step(sim_step)

    def measure_steer_latency(self, dt_value: float) -> None:
        """Submit a physics no-op and time submit -> acked-by-all."""
        def _measure():
            t0 = time.perf_counter()
            cmd = self.head.submit("set_param", "dt", dt_value)
            deadline = t0 + self.head.ack_timeout_s
            while time.perf_counter() < deadline:
                with self.head._lock:
                    if cmd.seq not in self.head._pending:
                        self.steer_samples_ms.append((time.perf_counter() - t0) * 1000.0)
                        return
                time.sleep(0.0005)
        threading.Thread(target=_measure, daemon=True).start()

    def stats(self):
        fps = 0.0
        if len(self.frame_times) >= 2:
            span = self.frame_times[-1] - self.frame_times[0]
            if span > 0:
                fps = (len(self.frame_times) - 1) / span
        sps = 0.0
        if len(self.step_marks) >= 2:
            (t0, s0), (t1, s1) = self.step_marks[0], self.step_marks[-1]
            if t1 > t0:
                sps = (s1 - s0) / (t1 - t0)
        return fps, sps, self.head.rank_states()

    def close(self) -> None:
        if self.server is not None:
            self.server.close()
        for fs in self._sim_socks:
            fs.close()


class _ScriptDriver(threading.Thread):
    """Replays a line-oriented steering script against the head:
    `<step> <command> [args]` with commands set/pause/resume/terminate."""

    def __init__(self, head: SteeringHead, text: str):
        super().__init__(daemon=True)
        self.head = head
        self.entries = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            step = int(parts[0])
            cmd = parts[1]
            if cmd == "set":
                self.entries.append((step, "set_param", parts[2], float(parts[3])))
            elif cmd in ("pause", "resume", "terminate"):
                self.entries.append((step, cmd, "", 0.0))
            else:
                raise ValueError(f"steering script line {lineno}: unknown command {cmd!r}")
        self.entries.sort(key=lambda e: e[0])

    def run(self) -> None:
        for step, kind, name, value in self.entries:
            while self.head._observed_step < step:
                time.sleep(0.001)
            try:
                self.head.submit(kind, name, value)
            except Exception as exc:
                log.warning("script: %s", exc)


def render_process_main(spec: RunSpec, rank: int, rdv_port: int, checksum: str) -> int:
    if spec.checksum() != checksum:
        log.error("render %d: RunSpec checksum mismatch, aborting", rank)
        return EXIT_CONFIG
    k = spec.sim.rank_count
    mesh_listener = listen_local(0)
    entries = {f"render{rank}": mesh_listener.getsockname()[1]}

    viz_inbox = RenderInbox()
    mesh = SocketMeshEndpoint(rank, timeout_s=spec.stage_timeout_s,
                              viz_callback=viz_inbox.feed_bytes)

    head: _HeadState | None = None
    if rank == 0:
        head = _HeadState(spec, mesh, viz_inbox)
        entries["steer"] = head.steer_port
        if head.server is not None:
            entries["stream"] = head.server.port

    ports = rendezvous_register(rdv_port, entries)

    # mesh wiring: dial every lower rank, accept every higher rank
    pending = k - 1 - rank

    def _accept_peers():
        for _ in range(pending):
            conn, _ = mesh_listener.accept()
            role, peer = recv_hello(conn)
            mesh.add_peer(peer, FrameSocket(conn))

    acceptor = threading.Thread(target=_accept_peers, daemon=True)
    acceptor.start()
    for peer in range(rank):
        sock = dial(ports[f"render{peer}"])
        send_hello(sock, 2, rank)
        mesh.add_peer(peer, FrameSocket(sock))
    acceptor.join(timeout=15.0)
    mesh_listener.close()
    if len(mesh.peers) != k - 1:
        log.error("render %d: mesh incomplete (%d/%d)", rank, len(mesh.peers), k - 1)
        return EXIT_ERROR

    if rank == 0 and head is not None and spec.steering_script:
        with open(spec.steering_script) as fh:
            _ScriptDriver(head.head, fh.read()).start()

    topology = CompositeTopology(k)
    camera = default_camera(spec.sim.box_length)
    cmap = ColorMap(vmin=0.0, vmax=3.0)
    radius = spec.sphere_radius
    mode = spec.mode
    status = EXIT_OK
    frame_seq = 1
    frames_done = 0
    frames_abandoned = 0
    bench_terminated = False
    snap: ParticleSnapshot | None = None
    started = time.monotonic()

    chain = SnapshotChainReader(SegmentName(rank, 0, spec.shm_prefix))
    try:
        while True:
            for param in viz_inbox.poll(frame_seq):
                if param.kind == VIZ_SET_CAMERA:
                    camera = CameraPose.unpack(np.array(param.values))
                elif param.kind == VIZ_SET_COLOR_RANGE:
                    cmap = ColorMap(vmin=param.values[0], vmax=param.values[1])
                elif param.kind == VIZ_SET_RADIUS:
                    if param.values[0] > 0:
                        radius = float(param.values[0])
                elif param.kind == VIZ_SET_MODE:
                    mode = "vdi" if param.values[0] == 1.0 else "opaque"

            newest = chain.poll()
            if newest is not None and (snap is None or newest.sim_step > snap.sim_step):
                snap = newest
            if chain.terminated:
                break
            if snap is None:
                time.sleep(0.002)
                continue

            size = (spec.width, spec.height)
            try:
                if mode == "vdi":
                    vdi = build_vdi(snap, camera, size, radius, cmap,
                                    opacity=spec.opacity, s_max=spec.s_max)
                    start, frag = binary_swap(VdiFragment.from_vdi(vdi), rank,
                                              topology, mesh, frame_seq)
                    pieces = gather_frame(frag, start, rank, topology, mesh, frame_seq)
                    if rank == 0:
                        full = assemble_vdi(pieces, camera, spec.width, spec.height, spec.s_max)
                        content = full
                else:
                    img = render_spheres(snap, camera, size, radius, cmap)
                    start, frag = binary_swap(DepthFragment.from_image(img), rank,
                                              topology, mesh, frame_seq)
                    pieces = gather_frame(frag, start, rank, topology, mesh, frame_seq)
                    if rank == 0:
                        content = assemble_depth_image(pieces, spec.width, spec.height)
            except CompositeAhead as exc:
                # partners moved on (this rank fell behind); rejoin them
                frame_seq = exc.seq
                continue
            except CompositeError as exc:
                chain.poll()  # refresh the terminated flag
                if chain.terminated:
                    break
                log.warning("render %d: frame %d abandoned: %s", rank, frame_seq, exc)
                frames_abandoned += 1
                if spec.abort_on_peer_loss:
                    status = EXIT_ERROR
                    break
                frame_seq += 1
                continue

            if rank == 0 and head is not None:
                if frames_done % 25 == 0:
                    log.debug("head: frame %d (seq %d) at sim step %d",
                              frames_done, frame_seq, snap.sim_step)
                encoding = ENC_VDI if mode == "vdi" else spec.encoding
                msg = encode_frame(content, encoding, frame_seq, snap.sim_step)
                if head.server is not None:
                    head.server.offer_frame(msg)
                head.note_frame(frame_seq, snap.sim_step)
                if spec.benchmark:
                    if frames_done and frames_done % 30 == 0:
                        az = (frames_done / 30) * 3.0
                        pose = orbit_pose((spec.sim.box_length / 2,) * 3, az, 12.0,
                                          2.1 * spec.sim.box_length, 50.0,
                                          0.05, 20.0 * spec.sim.box_length)
                        head.submit_viz(_camera_param(pose, spec.width, spec.height))
                    if frames_done and frames_done % 90 == 45:
                        head.measure_steer_latency(spec.sim.dt)
                    if frames_done >= spec.bench_frames and not bench_terminated:
                        bench_terminated = True
                        cmd = head.head.submit("terminate")
                        log.info("head: benchmark done, terminate seq %d at step %d",
                                 cmd.seq, cmd.apply_at_step)
            frame_seq += 1
            frames_done += 1
    except (ConnectionError, OSError) as exc:
        log.error("render %d: %s", rank, exc)
        status = EXIT_ERROR
    finally:
        elapsed = time.monotonic() - started
        stats = {
            "rank": rank,
            "frames": frames_done,
            "frames_abandoned": frames_abandoned,
            "swap_bytes_sent": mesh.swap_bytes_sent,
            "wall_s": elapsed,
            "fps": frames_done / elapsed if elapsed > 0 else 0.0,
        }
        if head is not None:
            stats["frame_intervals_ms"] = head.frame_intervals_ms
            samples = head.steer_samples_ms
            stats["steer_latency_ms"] = float(np.mean(samples)) if samples else -1.0
            stats["command_log"] = [
                [c.seq, c.kind, c.apply_at_step, c.name, c.value]
                for c in head.head.command_log
            ]
        _write_stats(spec, f"render{rank}.json", stats)
        chain.close()
        if head is not None:
            head.close()
        mesh.close()
    return status


def _camera_param(pose: CameraPose, width: int, height: int):
    from insitu.steering import VizParam
    return VizParam(VIZ_SET_CAMERA, tuple(pose.pack(width / height)))


# ---------------------------------------------------------------------------
# launcher
# ---------------------------------------------------------------------------

def _child_entry(target_name: str, spec: RunSpec, rank: int, rdv_port: int, checksum: str):
    import faulthandler
    import signal

    stack_dir = os.environ.get("INSITU_STACK_DIR")
    if stack_dir:
        sink = open(os.path.join(stack_dir, f"stacks-{target_name}{rank}.txt"), "w")
        faulthandler.register(signal.SIGUSR1, file=sink, all_threads=True)
    else:
        faulthandler.register(signal.SIGUSR1, all_threads=True)  # live-stack dumps
    logging.basicConfig(level=logging.INFO,
                        format=f"%(asctime)s {target_name}{rank} %(levelname)s %(message)s")
    target = sim_process_main if target_name == "sim" else render_process_main
    raise SystemExit(target(spec, rank, rdv_port, checksum))


def run(spec: RunSpec, print_ports: bool = False) -> int:
    """Launch 2k rank processes, wait for completion; the `insitu run` core."""
    spec.validate()
    k = spec.sim.rank_count
    rdv = listen_local(0)
    rdv_port = rdv.getsockname()[1]
    checksum = spec.checksum()
    ctx = mp.get_context("spawn")
    procs = []
    for rank in range(k):
        procs.append(ctx.Process(target=_child_entry,
                                 args=("sim", spec, rank, rdv_port, checksum),
                                 name=f"sim{rank}"))
    for rank in range(k):
        procs.append(ctx.Process(target=_child_entry,
                                 args=("render", spec, rank, rdv_port, checksum),
                                 name=f"render{rank}"))
    for p in procs:
        p.start()
    try:
        rdv.settimeout(60.0)
        rendezvous_serve(rdv, expected=2 * k)
    except (OSError, TimeoutError) as exc:
        log.error("rendezvous failed: %s; terminating children", exc)
        for p in procs:
            p.terminate()
    finally:
        rdv.close()
    status = EXIT_OK
    for p in procs:
        p.join()
        if p.exitcode != 0:
            status = max(status, abs(p.exitcode or EXIT_ERROR))
    leftovers = list_segments(spec.shm_prefix)
    for seg in leftovers:
        log.warning("reaping leaked segment %s", seg)
        try:
            os.unlink(seg.path())
        except OSError:
            pass
    if leftovers and status == EXIT_OK:
        status = EXIT_ERROR
    return status


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchReport:
    backend: str
    rank_count: int
    particle_count: int
    width: int
    height: int
    frames: int
    fps_mean: float
    fps_std: float
    sim_steps_per_second: float
    steer_latency_ms: float
    render_ms: float
    reproject_ms: float
    bytes_exchanged_per_rank: int
    kernel_comparison: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def benchmark_reprojection(spec: RunSpec, repeats: int = 5) -> tuple[float, float]:
    """(fresh render ms, VDI reprojection ms) on a synthetic scene at the
    spec's frame size: the paper-motivated latency comparison."""
    from insitu.render.camera import orbit_pose

    rng = np.random.default_rng(0)
    n = spec.sim.particle_count
    box = spec.sim.box_length
    pos = rng.uniform(0, box, (n, 3)).astype(np.float32)
    vel = rng.normal(0, 1, (n, 3)).astype(np.float32)
    snap = ParticleSnapshot(1, 0.0, pos, vel)
    cam = default_camera(box)
    cam2 = orbit_pose((box / 2,) * 3, 1.0, 12.0, 2.1 * box, 50.0, 0.05, 20.0 * box)
    size = (spec.width, spec.height)
    cmap = ColorMap(vmin=0.0, vmax=3.0)
    vdi = build_vdi(snap, cam, size, spec.sphere_radius, cmap,
                    opacity=spec.opacity, s_max=spec.s_max)

    render_spheres(snap, cam2, size, spec.sphere_radius, cmap)  # warm
    t0 = time.perf_counter()
    for _ in range(repeats):
        render_spheres(snap, cam2, size, spec.sphere_radius, cmap)
    render_ms = (time.perf_counter() - t0) / repeats * 1000

    composite_vdi_to_image(vdi, cam2)  # warm
    t0 = time.perf_counter()
    for _ in range(repeats):
        composite_vdi_to_image(vdi, cam2)
    reproject_ms = (time.perf_counter() - t0) / repeats * 1000
    return render_ms, reproject_ms


def benchmark_kernels(spec: RunSpec, repeats: int = 3) -> dict:
    """Times the hot kernels on every available backend (native vs numpy)."""
    from insitu._kernels import available_backends, get_backend

    rng = np.random.default_rng(1)
    n = spec.sim.particle_count
    box = spec.sim.box_length
    pos32 = rng.uniform(0, box, (n, 3)).astype(np.float32)
    colors = rng.uniform(0, 1, (n, 3)).astype(np.float32)
    pos64 = np.ascontiguousarray(np.sort(pos32.astype(np.float64), axis=0))
    cam = default_camera(box)
    w, h = spec.width, spec.height
    args = (pos32, colors, cam.position, cam.rotation(), cam.tan_half_fov(),
            w / h, cam.near, cam.far, w, h, spec.sphere_radius,
            max(spec.sphere_radius, 2.5))
    out = {}
    for name in available_backends():
        backend = get_backend(name)
        timings = {}
        t0 = time.perf_counter()
        for _ in range(repeats):
            backend.render_spheres(*args)
        timings["render_spheres_ms"] = (time.perf_counter() - t0) / repeats * 1000
        t0 = time.perf_counter()
        for _ in range(repeats):
            counts, segs = backend.build_vdi(*args, spec.opacity, spec.s_max, 16 / 255)
        timings["build_vdi_ms"] = (time.perf_counter() - t0) / repeats * 1000
        cam2 = orbit_pose((box / 2,) * 3, 2.0, 12.0, 2.1 * box, 50.0, 0.05, 20.0 * box)
        rp = (cam.position, cam.rotation(), cam.tan_half_fov(), w / h,
              cam2.position, cam2.rotation(), cam2.tan_half_fov(), w / h,
              cam2.near, cam2.far, w, h)
        t0 = time.perf_counter()
        for _ in range(repeats):
            backend.reproject_vdi(counts, segs, *rp)
        timings["reproject_vdi_ms"] = (time.perf_counter() - t0) / repeats * 1000
        t0 = time.perf_counter()
        for _ in range(repeats):
            backend.lj_forces(pos64, n, spec.sim.cutoff, box, box)
        timings["lj_forces_ms"] = (time.perf_counter() - t0) / repeats * 1000
        out[name] = timings
    return out


def run_benchmark(spec: RunSpec, skip_kernels: bool = False) -> BenchReport:
    """Scripted benchmark run emitting the machine-readable report."""
    import tempfile

    with tempfile.TemporaryDirectory(prefix="insitu-bench-") as stats_dir:
        bench_spec = spec.with_(benchmark=True, stats_dir=stats_dir, headless=True)
        status = run(bench_spec)
        if status != EXIT_OK:
            log.warning("benchmark run exited with status %d", status)
        render_stats = []
        sim_stats = []
        for rank in range(spec.sim.rank_count):
            rpath = os.path.join(stats_dir, f"render{rank}.json")
            spath = os.path.join(stats_dir, f"sim{rank}.json")
            if os.path.exists(rpath):
                render_stats.append(json.load(open(rpath)))
            if os.path.exists(spath):
                sim_stats.append(json.load(open(spath)))

    head = next((s for s in render_stats if s["rank"] == 0), {"frames": 0, "wall_s": 1})
    frame_times = head.get("frame_intervals_ms", [])
    if frame_times:
        arr = np.array(frame_times)
        fps_inst = 1000.0 / np.maximum(arr, 1e-6)
        fps_mean, fps_std = float(fps_inst.mean()), float(fps_inst.std())
    else:
        fps_mean = head["frames"] / head["wall_s"] if head["wall_s"] else 0.0
        fps_std = 0.0
    sps = 0.0
    if sim_stats:
        sps = float(np.mean([s["steps"] / s["wall_s"] for s in sim_stats if s["wall_s"]]))
    steer_ms = head.get("steer_latency_ms", -1.0)
    render_ms, reproject_ms = benchmark_reprojection(spec)
    kernels = {} if skip_kernels else benchmark_kernels(spec)
    bytes_per_rank = render_stats[0]["swap_bytes_sent"] if render_stats else 0
    return BenchReport(
        backend=_kernels.BACKEND,
        rank_count=spec.sim.rank_count,
        particle_count=spec.sim.particle_count,
        width=spec.width,
        height=spec.height,
        frames=head["frames"],
        fps_mean=fps_mean,
        fps_std=fps_std,
        sim_steps_per_second=sps,
        steer_latency_ms=steer_ms,
        render_ms=render_ms,
        reproject_ms=reproject_ms,
        bytes_exchanged_per_rank=bytes_per_rank,
        kernel_comparison=kernels,
    )
