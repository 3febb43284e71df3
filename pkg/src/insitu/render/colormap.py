"""Scalar-to-color mapping for velocity-magnitude coloring."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# default stops: blue -> white -> red
DEFAULT_STOPS = ((0.0, (0, 0, 255)), (0.5, (255, 255, 255)), (1.0, (255, 0, 0)))


@dataclass
class ColorMap:
    """Piecewise-linear map from a scalar range to rgb.

    Values are clamped to [vmin, vmax]; vmin == vmax degenerates to the
    midpoint color.  vmin/vmax are runtime-settable (steerable).
    """

    vmin: float = 0.0
    vmax: float = 1.0
    stops: tuple = DEFAULT_STOPS

    def normalized(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.vmax == self.vmin:
            return np.full_like(values, 0.5)
        t = (values - self.vmin) / (self.vmax - self.vmin)
        return np.clip(t, 0.0, 1.0)

    def lookup_u8(self, values) -> np.ndarray:
        """(..., 3) uint8 colors for scalar values."""
        t = self.normalized(values)
        pos = np.array([s[0] for s in self.stops])
        cols = np.array([s[1] for s in self.stops], dtype=np.float64)
        out = np.empty(t.shape + (3,), dtype=np.float64)
        for ch in range(3):
            out[..., ch] = np.interp(t, pos, cols[:, ch])
        return np.floor(out + 0.5).astype(np.uint8)

    def lookup_f32(self, values) -> np.ndarray:
        """(..., 3) float32 colors in [0, 1] (the renderer's working format)."""
        return (self.lookup_u8(values).astype(np.float64) / 255.0).astype(np.float32)


def velocity_color(v_mag: float, cmap: ColorMap) -> tuple[int, int, int]:
    """Clamped piecewise-linear lookup of one velocity magnitude."""
    r, g, b = cmap.lookup_u8(np.array([v_mag]))[0]
    return int(r), int(g), int(b)
