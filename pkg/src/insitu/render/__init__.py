from insitu.render.camera import CameraPose, look_at, orbit_pose, camera_rays
from insitu.render.colormap import ColorMap, velocity_color
from insitu.render.image import DepthImage, write_ppm, read_ppm
from insitu.render.render import render_spheres, build_vdi, composite_vdi_to_image
from insitu.render.vdi import VDI, read_vdi, write_vdi, vdi_to_bytes, vdi_from_bytes

__all__ = [
    "CameraPose", "look_at", "orbit_pose", "camera_rays",
    "ColorMap", "velocity_color",
    "DepthImage", "write_ppm", "read_ppm",
    "render_spheres", "build_vdi", "composite_vdi_to_image",
    "VDI", "read_vdi", "write_vdi", "vdi_to_bytes", "vdi_from_bytes",
]
