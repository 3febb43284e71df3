#!/usr/bin/env python3
"""Generate the golden fixtures the browser cockpit is tested against.

Everything here comes from the primary implementation; the cockpit must
round-trip the frame fixtures byte-exactly and reproduce the reprojection
images within 1/255 per channel.  Rerun after any wire-format change:

    python tools/gen_goldens.py
"""

import json
import struct
from pathlib import Path

import numpy as np

from insitu.render.camera import orbit_pose
from insitu.render.colormap import ColorMap
from insitu.render.render import build_vdi, composite_vdi_to_image, render_spheres
from insitu.render.vdi import vdi_to_bytes
from insitu.snapshot import ParticleSnapshot
from insitu.stream import ENC_RAW, ENC_RLE, ENC_VDI, StatsMessage, encode_frame

OUT = Path(__file__).resolve().parent.parent / "frontend" / "fixtures"

CENTER = (5.0, 5.0, 5.0)
SIZE = (96, 72)
RADIUS = 0.45


def scene():
    rng = np.random.default_rng(2718)
    pos = rng.uniform(1.0, 9.0, (90, 3)).astype(np.float32)
    vel = rng.normal(0, 1, (90, 3)).astype(np.float32)
    return ParticleSnapshot(42, 0.042, pos, vel)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    snap = scene()
    cmap = ColorMap(vmin=0.0, vmax=3.0)
    cam_a = orbit_pose(CENTER, 0.0, 12.0, 21.0, vertical_fov=45)
    cam_b = orbit_pose(CENTER, 1.5, 10.0, 20.5, vertical_fov=45)

    # frame-message fixtures, one per encoding
    opaque = render_spheres(snap, cam_a, SIZE, RADIUS, cmap)
    (OUT / "frame_raw.bin").write_bytes(
        encode_frame(opaque, ENC_RAW, 7, 42, 1000001).encode())
    (OUT / "frame_rle.bin").write_bytes(
        encode_frame(opaque, ENC_RLE, 8, 42, 1000002).encode())
    (OUT / "frame_rgba.bin").write_bytes(opaque.rgba.tobytes())

    vdi_opaque = build_vdi(snap, cam_a, SIZE, RADIUS, cmap, opacity=1.0)
    (OUT / "frame_vdi.bin").write_bytes(
        encode_frame(vdi_opaque, ENC_VDI, 9, 42, 1000003).encode())

    # semi-transparent VDI plus primary-rendered reprojections
    vdi = build_vdi(snap, cam_a, SIZE, RADIUS, cmap, opacity=0.8)
    (OUT / "vdi_golden.bin").write_bytes(vdi_to_bytes(vdi))
    identity = composite_vdi_to_image(vdi, cam_a)
    (OUT / "vdi_identity_rgba.bin").write_bytes(identity.rgba.tobytes())
    reproj = composite_vdi_to_image(vdi, cam_b)
    (OUT / "vdi_reproject_rgba.bin").write_bytes(reproj.rgba.tobytes())
    (OUT / "camera_b.bin").write_bytes(
        cam_b.pack(SIZE[0] / SIZE[1]).astype("<f8").tobytes())

    # opaque identity pair: composite(vdi_opaque, cam_a) must equal the render
    (OUT / "vdi_opaque.bin").write_bytes(vdi_to_bytes(vdi_opaque))

    (OUT / "stats.bin").write_bytes(
        StatsMessage(58.5, 970.25, 4.125, (True, True, False, True)).encode())

    meta = {
        "width": SIZE[0],
        "height": SIZE[1],
        "frame_raw_seq": 7,
        "frame_sim_step": 42,
        "session_commands": [
            ["set", "dt", 0.002],
            ["set", "target_temperature", 1.1],
            ["pause"],
            ["resume"],
            ["radius", 0.35],
            ["color_range", 0.0, 2.5],
            ["mode", "vdi"],
            ["echo", 123456789],
        ],
    }
    (OUT / "meta.json").write_text(json.dumps(meta, indent=2))
    print(f"wrote fixtures to {OUT}")
    for p in sorted(OUT.iterdir()):
        print(f"  {p.name:26} {p.stat().st_size} bytes")


if __name__ == "__main__":
    main()
