"""insitu: a desk-scale in-situ visualization and steering framework.

A distributed particle simulation publishes snapshots to per-rank renderers
through lock-free shared memory; per-rank images are combined by binary-swap
compositing; the head node streams frames (or reprojectable VDIs) to a
browser cockpit and fans steering commands back out to every rank.
"""

from insitu._kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
