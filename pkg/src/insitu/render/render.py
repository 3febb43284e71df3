"""Per-rank software renderer: sphere ray casting and VDI operations."""

from __future__ import annotations

import numpy as np

from insitu import _kernels as K
from insitu.render.camera import CameraPose
from insitu.render.colormap import ColorMap
from insitu.render.image import DepthImage
from insitu.render.vdi import DEFAULT_MERGE_TOL, DEFAULT_S_MAX, VDI
from insitu.snapshot import ParticleSnapshot

DEFAULT_RADIUS = 0.3
# grid cells at least as coarse as the interaction cutoff keeps sphere lists
# short without missing geometry
DEFAULT_GRID_COARSENESS = 2.5


def particle_colors(velocities: np.ndarray, cmap: ColorMap) -> np.ndarray:
    """(n, 3) float32 colors in [0, 1] from velocity magnitudes."""
    v = np.asarray(velocities, dtype=np.float64)
    mag = np.sqrt((v * v).sum(axis=1)) if len(v) else np.zeros(0)
    return cmap.lookup_f32(mag)


def _check_size(size) -> tuple[int, int]:
    w, h = int(size[0]), int(size[1])
    if w < 1 or h < 1:
        raise ValueError(f"image size must be positive, got {size}")
    return w, h


def _cam_args(cam: CameraPose, w: int, h: int):
    return (cam.position, cam.rotation(), cam.tan_half_fov(), w / h, cam.near, cam.far)


def render_spheres(snap: ParticleSnapshot, cam: CameraPose, size, radius: float = DEFAULT_RADIUS,
                   cmap: ColorMap | None = None, cell_size: float | None = None) -> DepthImage:
    """Nearest-hit opaque render; colors by velocity magnitude, Lambert-shaded
    against a headlight."""
    w, h = _check_size(size)
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    cmap = cmap or ColorMap()
    cell = cell_size if cell_size is not None else max(radius, DEFAULT_GRID_COARSENESS)
    colors = particle_colors(snap.velocities, cmap)
    rgba, depth = K.render_spheres(
        snap.positions, colors, *_cam_args(cam, w, h), w, h, float(radius), float(cell))
    return DepthImage(rgba, depth)


def build_vdi(snap: ParticleSnapshot, cam: CameraPose, size, radius: float = DEFAULT_RADIUS,
              cmap: ColorMap | None = None, opacity: float = 0.7,
              s_max: int = DEFAULT_S_MAX, merge_tol: float = DEFAULT_MERGE_TOL,
              cell_size: float | None = None) -> VDI:
    """Collect every sphere interval per pixel into depth-sorted supersegments."""
    w, h = _check_size(size)
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    if not 0 < opacity <= 1:
        raise ValueError(f"opacity must be in (0, 1], got {opacity}")
    if s_max < 1:
        raise ValueError(f"s_max must be >= 1, got {s_max}")
    cmap = cmap or ColorMap()
    cell = cell_size if cell_size is not None else max(radius, DEFAULT_GRID_COARSENESS)
    colors = particle_colors(snap.velocities, cmap)
    counts, segments = K.build_vdi(
        snap.positions, colors, *_cam_args(cam, w, h), w, h,
        float(radius), float(cell), float(opacity), int(s_max), float(merge_tol))
    return VDI(cam, counts, segments)


def composite_vdi_to_image(vdi: VDI, cam: CameraPose) -> DepthImage:
    """Composite at the VDI's own camera, or reproject supersegment splats
    into a new one (1-pixel footprint, depth-ordered over)."""
    if cam.same_pose(vdi.camera):
        rgba, depth = K.composite_vdi(vdi.counts, vdi.segments)
        return DepthImage(rgba, depth)
    src = vdi.camera
    w, h = vdi.width, vdi.height
    rgba, depth = K.reproject_vdi(
        vdi.counts, vdi.segments,
        src.position, src.rotation(), src.tan_half_fov(), w / h,
        cam.position, cam.rotation(), cam.tan_half_fov(), w / h, cam.near, cam.far,
        w, h)
    return DepthImage(rgba, depth)
