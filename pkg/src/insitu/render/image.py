"""Color+depth raster: the unit the compositor exchanges."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class DepthImage:
    """Per-pixel rgba (uint8, premultiplied alpha) and eye-space depth
    (float32, +inf for background)."""

    rgba: np.ndarray  # (h, w, 4) uint8
    depth: np.ndarray  # (h, w) float32

    def __post_init__(self):
        if self.rgba.shape[:2] != self.depth.shape or self.rgba.shape[2] != 4:
            raise ValueError(
                f"shape mismatch: rgba {self.rgba.shape} vs depth {self.depth.shape}"
            )

    @property
    def width(self) -> int:
        return self.rgba.shape[1]

    @property
    def height(self) -> int:
        return self.rgba.shape[0]

    @staticmethod
    def background(width: int, height: int) -> "DepthImage":
        return DepthImage(
            np.zeros((height, width, 4), dtype=np.uint8),
            np.full((height, width), np.inf, dtype=np.float32),
        )

    def copy(self) -> "DepthImage":
        return DepthImage(self.rgba.copy(), self.depth.copy())

    def equal(self, other: "DepthImage") -> bool:
        return bool(
            np.array_equal(self.rgba, other.rgba)
            and np.array_equal(self.depth, other.depth)
        )

    # flat-pixel views used by the compositor exchange
    def flat_rgba(self) -> np.ndarray:
        return self.rgba.reshape(-1, 4)

    def flat_depth(self) -> np.ndarray:
        return self.depth.reshape(-1)


PIXEL_BYTES = 8  # 4 x u8 rgba + f32 depth, the compositor's exchange unit


def pack_pixels(img: DepthImage, start: int, stop: int) -> bytes:
    """Serialize a flat pixel range as rgba bytes followed by depth bytes."""
    rgba = img.flat_rgba()[start:stop]
    depth = img.flat_depth()[start:stop].astype("<f4")
    return rgba.tobytes() + depth.tobytes()

def unpack_pixels(payload: bytes, count: int) -> tuple[np.ndarray, np.ndarray]:
    expected = count * PIXEL_BYTES
    if len(payload) != expected:
        raise ValueError(f"pixel payload is {len(payload)} bytes, expected {expected}")
    rgba = np.frombuffer(payload[: count * 4], dtype=np.uint8).reshape(count, 4)
    depth = np.frombuffer(payload[count * 4 :], dtype="<f4")
    return rgba, depth


def write_ppm(img: DepthImage, path: str | Path) -> None:
    """P6 export (drops alpha and depth) for golden-file comparisons."""
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode())
        fh.write(np.ascontiguousarray(img.rgba[:, :, :3]).tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise ValueError("not a P6 ppm")
    w, h = int(fields[1]), int(fields[2])
    pos += 1  # single whitespace after maxval
    return np.frombuffer(data[pos : pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
