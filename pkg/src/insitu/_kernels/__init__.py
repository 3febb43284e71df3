"""Kernel backend selection.

The compiled extension is preferred; the numpy implementation is the
fallback.  INSITU_KERNELS=native|numpy forces a choice (native raises if the
extension is missing).  Both backends expose the same functions and, for the
image kernels, produce bit-identical output.
"""

import os

_requested = os.environ.get("INSITU_KERNELS", "").strip().lower()

if _requested not in ("", "native", "numpy"):
    raise ImportError(f"INSITU_KERNELS must be 'native' or 'numpy', got {_requested!r}")

if _requested in ("", "native"):
    try:
        from . import _native as _impl
    except ImportError:
        if _requested == "native":
            raise
        from . import numpy_backend as _impl
else:
    from . import numpy_backend as _impl

BACKEND = _impl.BACKEND

lj_forces = _impl.lj_forces
render_spheres = _impl.render_spheres
build_vdi = _impl.build_vdi
composite_vdi = _impl.composite_vdi
reproject_vdi = _impl.reproject_vdi

hdr_load_u64 = _impl.hdr_load_u64
hdr_store_u64 = _impl.hdr_store_u64
hdr_load_u32 = _impl.hdr_load_u32
hdr_store_u32 = _impl.hdr_store_u32
hdr_add_u32 = _impl.hdr_add_u32
read_fence = _impl.read_fence


def available_backends() -> list[str]:
    names = []
    try:
        from . import _native  # noqa: F401
        names.append("native")
    except ImportError:
        pass
    names.append("numpy")
    return names


def get_backend(name: str):
    """Load a specific backend module (used by the comparison benchmark)."""
    if name == "native":
        from . import _native
        return _native
    if name == "numpy":
        from . import numpy_backend
        return numpy_backend
    raise ValueError(f"unknown backend {name!r}")
