"""Volumetric depth image: per-pixel depth-bounded supersegment lists.

Storage is dense: counts (h, w) uint16 and segments (h, w, s_max, 6) float32
with columns (depth_front, depth_back, r, g, b, a); colors are premultiplied
and opacity-weighted.  Unused slots are zero.  The wire/file form flattens to
per-pixel counts followed by only the used segments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraPose

VDI_MAGIC = b"VDIF"
VDI_VERSION = 1
DEFAULT_S_MAX = 8
DEFAULT_MERGE_TOL = 16.0 / 255.0


@dataclass
class VDI:
    camera: CameraPose
    counts: np.ndarray  # (h, w) uint16
    segments: np.ndarray  # (h, w, s_max, 6) float32

    def __post_init__(self):
        if self.counts.shape != self.segments.shape[:2]:
            raise ValueError("counts/segments shape mismatch")
        if self.segments.ndim != 4 or self.segments.shape[3] != 6:
            raise ValueError(f"bad segments shape {self.segments.shape}")

    @property
    def width(self) -> int:
        return self.counts.shape[1]

    @property
    def height(self) -> int:
        return self.counts.shape[0]

    @property
    def s_max(self) -> int:
        return self.segments.shape[2]

    @staticmethod
    def empty(camera: CameraPose, width: int, height: int, s_max: int = DEFAULT_S_MAX) -> "VDI":
        return VDI(
            camera,
            np.zeros((height, width), dtype=np.uint16),
            np.zeros((height, width, s_max, 6), dtype=np.float32),
        )

    def check_invariants(self) -> None:
        """Depth ordering, non-overlap and alpha range for every pixel."""
        cnt = self.counts.astype(np.int64)
        if cnt.max(initial=0) > self.s_max:
            raise AssertionError("count exceeds s_max")
        slot = np.arange(self.s_max)[None, None, :]
        used = slot < cnt[:, :, None]
        front = self.segments[:, :, :, 0]
        back = self.segments[:, :, :, 1]
        alpha = self.segments[:, :, :, 5]
        if np.any(used & (back < front)):
            raise AssertionError("segment with depth_back < depth_front")
        if np.any(used & ((alpha < 0) | (alpha > 1.0000001))):
            raise AssertionError("alpha outside [0, 1]")
        both = used[:, :, 1:] & used[:, :, :-1]
        if np.any(both & (front[:, :, 1:] < back[:, :, :-1])):
            raise AssertionError("overlapping supersegments")

    def total_segments(self) -> int:
        return int(self.counts.sum())


def vdi_to_bytes(vdi: VDI) -> bytes:
    """Little-endian file serialization (also the encoding-2 frame payload)."""
    aspect = vdi.width / vdi.height
    header = VDI_MAGIC + struct.pack(
        "<IHHH", VDI_VERSION, vdi.width, vdi.height, vdi.s_max
    )
    header += vdi.camera.pack(aspect).astype("<f8").tobytes()
    counts = vdi.counts.astype("<u2")
    flat = vdi.segments.reshape(-1, vdi.s_max, 6)
    mask = np.arange(vdi.s_max)[None, :] < counts.reshape(-1)[:, None]
    used = flat[mask].astype("<f4")
    return header + counts.tobytes() + used.tobytes()


def vdi_from_bytes(data: bytes) -> VDI:
    if data[:4] != VDI_MAGIC:
        raise ValueError("bad VDI magic")
    version, w, h, s_max = struct.unpack_from("<IHHH", data, 4)
    if version != VDI_VERSION:
        raise ValueError(f"unsupported VDI version {version}")
    off = 4 + 10
    cam_vals = np.frombuffer(data, dtype="<f8", count=11, offset=off)
    camera = CameraPose.unpack(cam_vals)
    off += 11 * 8
    counts = np.frombuffer(data, dtype="<u2", count=w * h, offset=off).reshape(h, w)
    off += w * h * 2
    total = int(counts.sum())
    used = np.frombuffer(data, dtype="<f4", count=total * 6, offset=off).reshape(total, 6)
    segments = np.zeros((h * w, s_max, 6), dtype=np.float32)
    mask = np.arange(s_max)[None, :] < counts.reshape(-1).astype(np.int64)[:, None]
    segments[mask] = used
    return VDI(camera, counts.astype(np.uint16).copy(), segments.reshape(h, w, s_max, 6))


def write_vdi(vdi: VDI, path: str | Path) -> None:
    Path(path).write_bytes(vdi_to_bytes(vdi))


def read_vdi(path: str | Path) -> VDI:
    return vdi_from_bytes(Path(path).read_bytes())


def over_accumulate(acc_rgba: np.ndarray, src_rgba: np.ndarray) -> np.ndarray:
    """Front-to-back over for premultiplied colors: acc is in front."""
    t = 1.0 - acc_rgba[..., 3:4]
    return acc_rgba + t * src_rgba


def merge_segment_lists(
    fronts: np.ndarray,
    backs: np.ndarray,
    rgbas: np.ndarray,
    base_colors: np.ndarray | None = None,
    s_max: int | None = None,
    merge_tol: float = DEFAULT_MERGE_TOL,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Greedy front-to-back merge of front-sorted intervals into supersegments.

    An interval is merged into the current supersegment when it overlaps it
    (mandatory: keeps the output non-overlapping), when its base color is
    within merge_tol of the previous interval's (only if base_colors given),
    or when the output already holds s_max entries (only if s_max given).
    Merged color/alpha is the front-to-back composite of the members; the
    span is the union of the members' spans.
    """
    n = len(fronts)
    out_f: list[float] = []
    out_b: list[float] = []
    out_c: list[np.ndarray] = []
    last_base = None
    for i in range(n):
        merged = False
        if out_f:
            overlap = float(fronts[i]) < out_b[-1]
            full = s_max is not None and len(out_f) == s_max
            similar = False
            if base_colors is not None and last_base is not None:
                similar = float(np.max(np.abs(base_colors[i] - last_base))) <= merge_tol
            if overlap or full or similar:
                out_b[-1] = max(out_b[-1], float(backs[i]))
                out_c[-1] = over_accumulate(out_c[-1], rgbas[i].astype(np.float32))
                merged = True
        if not merged:
            out_f.append(float(fronts[i]))
            out_b.append(float(backs[i]))
            out_c.append(rgbas[i].astype(np.float32).copy())
        if base_colors is not None:
            last_base = base_colors[i]
    return (
        np.asarray(out_f, dtype=np.float32),
        np.asarray(out_b, dtype=np.float32),
        np.asarray(out_c, dtype=np.float32).reshape(-1, 4),
    )
