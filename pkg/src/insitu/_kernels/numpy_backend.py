"""Pure-numpy implementations of the hot kernels.

Selected at import when the compiled extension is unavailable (or forced via
INSITU_KERNELS=numpy).  Every function mirrors the native kernel's arithmetic
operation-for-operation so the two backends produce identical images; only
force accumulation order differs (within float64 rounding noise).

Shared-memory header accessors here are plain struct reads/writes: on x86-64
(total store order, 8-byte aligned single-move copies) this preserves the
seqlock discipline, but only the native backend carries real compiler
atomics.
"""

from __future__ import annotations

import struct

import numpy as np

from insitu.render.camera import ray_directions

BACKEND = "numpy"

_TILE = 32


# ---------------------------------------------------------------------------
# Lennard-Jones forces via cell lists (x non-periodic, y/z minimum image)
# ---------------------------------------------------------------------------

def _axis_offsets(ncells: int, periodic: bool):
    if ncells == 1:
        return [0]
    if periodic and ncells == 2:
        return [0, 1]
    return [-1, 0, 1]


def lj_forces(pos: np.ndarray, n_owned: int, cutoff: float, ly: float, lz: float):
    """Forces on the first n_owned particles and their potential-energy share.

    pos holds owned particles first, then ghosts.  x is treated as
    non-periodic (ghosts materialize cross-boundary neighbors); y and z use
    minimum-image wrapping.  The potential counts owned-owned pairs once and
    owned-ghost pairs half (so per-rank shares sum to the global potential).
    """
    pos = np.asarray(pos, dtype=np.float64)
    n = len(pos)
    forces = np.zeros((n_owned, 3), dtype=np.float64)
    if n_owned == 0 or n < 2:
        return forces, 0.0
    rc2 = cutoff * cutoff
    u_shift = 4.0 * (cutoff**-12 - cutoff**-6)

    xmin = float(pos[:, 0].min())
    extent = float(pos[:, 0].max()) - xmin
    ncx = max(1, int(extent / cutoff))
    cwx = extent / ncx if extent > 0 else 1.0
    ncy = max(1, int(ly / cutoff))
    ncz = max(1, int(lz / cutoff))

    ix = np.minimum(((pos[:, 0] - xmin) / cwx).astype(np.int64), ncx - 1)
    iy = np.minimum((pos[:, 1] / (ly / ncy)).astype(np.int64), ncy - 1) % ncy
    iz = np.minimum((pos[:, 2] / (lz / ncz)).astype(np.int64), ncz - 1) % ncz
    cell = (ix * ncy + iy) * ncz + iz
    ncells = ncx * ncy * ncz

    order = np.argsort(cell, kind="stable")
    sorted_cell = cell[order]
    starts = np.searchsorted(sorted_cell, np.arange(ncells), side="left")
    ends = np.searchsorted(sorted_cell, np.arange(ncells), side="right")

    own = np.arange(n_owned)
    potential = 0.0
    for dx_c in _axis_offsets(ncx, periodic=False):
        nx = ix[:n_owned] + dx_c
        x_ok = (nx >= 0) & (nx < ncx)
        for dy_c in _axis_offsets(ncy, periodic=True):
            ny = (iy[:n_owned] + dy_c) % ncy
            for dz_c in _axis_offsets(ncz, periodic=True):
                nz = (iz[:n_owned] + dz_c) % ncz
                ncell = (nx * ncy + ny) * ncz + nz
                cnt = np.where(x_ok, ends[np.clip(ncell, 0, ncells - 1)]
                               - starts[np.clip(ncell, 0, ncells - 1)], 0)
                total = int(cnt.sum())
                if total == 0:
                    continue
                ii = np.repeat(own, cnt)
                base = np.repeat(starts[np.clip(ncell, 0, ncells - 1)], cnt)
                csum = np.cumsum(cnt) - cnt
                local = np.arange(total) - np.repeat(csum, cnt)
                jj = order[base + local]
                keep = ii != jj
                ii, jj = ii[keep], jj[keep]
                if len(ii) == 0:
                    continue
                dx = pos[ii, 0] - pos[jj, 0]
                dy = pos[ii, 1] - pos[jj, 1]
                dz = pos[ii, 2] - pos[jj, 2]
                dy = dy - ly * np.round(dy / ly)
                dz = dz - lz * np.round(dz / lz)
                r2 = (dx * dx + dy * dy) + dz * dz
                within = r2 < rc2
                ii, dx, dy, dz, r2 = ii[within], dx[within], dy[within], dz[within], r2[within]
                if len(ii) == 0:
                    continue
                inv_r2 = 1.0 / r2
                inv_r6 = inv_r2 * inv_r2 * inv_r2
                fs = 24.0 * (inv_r2 * inv_r6) * (2.0 * inv_r6 - 1.0)
                np.add.at(forces[:, 0], ii, fs * dx)
                np.add.at(forces[:, 1], ii, fs * dy)
                np.add.at(forces[:, 2], ii, fs * dz)
                potential += 0.5 * float(np.sum(4.0 * inv_r6 * (inv_r6 - 1.0) - u_shift))
    return forces, potential


# ---------------------------------------------------------------------------
# sphere ray casting
# ---------------------------------------------------------------------------

def _screen_rects(pos64, radius, origin, rot, tan_half, aspect, near, width, height):
    """Conservative per-sphere pixel rectangles (x0, x1, y0, y1), inclusive.

    Spheres that cannot intersect any forward ray get empty rects.  Bounds are
    generously padded; exactness comes from the per-ray test, not the rect.
    """
    n = len(pos64)
    rel = pos64 - origin[None, :]
    pc = rel @ rot  # camera coords, row-wise R^T
    zneg = -pc[:, 2]
    x0 = np.zeros(n, dtype=np.int64)
    x1 = np.full(n, -1, dtype=np.int64)
    y0 = np.zeros(n, dtype=np.int64)
    y1 = np.full(n, -1, dtype=np.int64)

    visible = zneg > -radius
    straddle = visible & (zneg <= radius + near)
    deep = visible & ~straddle
    # straddling spheres: no cheap bound, test against the whole screen
    x1[straddle] = width - 1
    y1[straddle] = height - 1

    if np.any(deep):
        z = zneg[deep]
        fx = width / (2.0 * tan_half * aspect)
        fy = height / (2.0 * tan_half)
        u = pc[deep, 0] / z / (tan_half * aspect)
        v = pc[deep, 1] / z / tan_half
        px = (u + 1.0) * 0.5 * width - 0.5
        py = (1.0 - v) * 0.5 * height - 0.5
        pr = 2.0 * radius * max(fx, fy) / np.maximum(z - radius, 1e-9) + 2.0
        x0[deep] = np.clip(np.floor(px - pr), 0, width - 1).astype(np.int64)
        x1[deep] = np.clip(np.ceil(px + pr), -1, width - 1).astype(np.int64)
        y0[deep] = np.clip(np.floor(py - pr), 0, height - 1).astype(np.int64)
        y1[deep] = np.clip(np.ceil(py + pr), -1, height - 1).astype(np.int64)
        offscreen = deep.copy()
        offscreen[deep] = (px + pr < 0) | (px - pr > width - 1) | (py + pr < 0) | (py - pr > height - 1)
        x1[offscreen] = -1
    return x0, x1, y0, y1


def _tile_sphere_lists(x0, x1, y0, y1, width, height):
    tiles_x = (width + _TILE - 1) // _TILE
    tiles_y = (height + _TILE - 1) // _TILE
    lists = [[] for _ in range(tiles_x * tiles_y)]
    for j in range(len(x0)):
        if x1[j] < x0[j] or y1[j] < y0[j]:
            continue
        for ty in range(y0[j] // _TILE, y1[j] // _TILE + 1):
            for tx in range(x0[j] // _TILE, x1[j] // _TILE + 1):
                lists[ty * tiles_x + tx].append(j)
    return lists, tiles_x, tiles_y


def _intersect(pos64, radius, origin, dirs_flat, sphere_idx):
    """Ray-sphere entry/exit for every (ray, sphere) pair; pinned arithmetic."""
    ox = pos64[sphere_idx, 0][None, :] - origin[0]
    oy = pos64[sphere_idx, 1][None, :] - origin[1]
    oz = pos64[sphere_idx, 2][None, :] - origin[2]
    dx = dirs_flat[:, 0][:, None]
    dy = dirs_flat[:, 1][:, None]
    dz = dirs_flat[:, 2][:, None]
    b = (ox * dx + oy * dy) + oz * dz
    cc = ((ox * ox + oy * oy) + oz * oz) - radius * radius
    disc = b * b - cc
    hit = disc >= 0.0
    s = np.sqrt(np.where(hit, disc, 0.0))
    return b - s, b + s, hit, dx, dy, dz


def _shade(pos64, radius, origin, t, dx, dy, dz, colors, sphere_idx):
    """Lambert headlight shading at the hit point, float32 rgb in [0, 1]."""
    cx = pos64[sphere_idx, 0][None, :]
    cy = pos64[sphere_idx, 1][None, :]
    cz = pos64[sphere_idx, 2][None, :]
    inv_r = 1.0 / radius
    nx = ((origin[0] + t * dx) - cx) * inv_r
    ny = ((origin[1] + t * dy) - cy) * inv_r
    nz = ((origin[2] + t * dz) - cz) * inv_r
    lam = -((nx * dx + ny * dy) + nz * dz)
    lam = np.maximum(lam, 0.0)
    base = colors[sphere_idx].astype(np.float64)[None, :, :]
    return (base * lam[:, :, None]).astype(np.float32)


def _quantize(rgba_f32: np.ndarray) -> np.ndarray:
    c = np.clip(rgba_f32, np.float32(0.0), np.float32(1.0))
    return (c * np.float32(255.0) + np.float32(0.5)).astype(np.uint8)


def render_spheres(pos, colors, origin, rot, tan_half, aspect, near, far,
                   width, height, radius, cell_size):
    """Nearest-hit opaque sphere render.  cell_size is unused here (the tile
    culling plays the native grid's role); kept for interface parity."""
    pos64 = np.asarray(pos, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    rgba = np.zeros((height, width, 4), dtype=np.uint8)
    depth = np.full((height, width), np.inf, dtype=np.float32)
    if len(pos64) == 0:
        return rgba, depth
    dirs = ray_directions(width, height, rot, tan_half, aspect)
    x0, x1, y0, y1 = _screen_rects(pos64, radius, origin, rot, tan_half, aspect, near, width, height)
    lists, tiles_x, tiles_y = _tile_sphere_lists(x0, x1, y0, y1, width, height)

    for ty in range(tiles_y):
        for tx in range(tiles_x):
            spheres = lists[ty * tiles_x + tx]
            if not spheres:
                continue
            sphere_idx = np.asarray(spheres, dtype=np.int64)
            ys = slice(ty * _TILE, min((ty + 1) * _TILE, height))
            xs = slice(tx * _TILE, min((tx + 1) * _TILE, width))
            tile_dirs = dirs[ys, xs].reshape(-1, 3)
            t_in, _, hit, dx, dy, dz = _intersect(pos64, radius, origin, tile_dirs, sphere_idx)
            valid = hit & (t_in >= near) & (t_in <= far)
            t_masked = np.where(valid, t_in, np.inf)
            best = np.argmin(t_masked, axis=1)
            rows = np.arange(len(tile_dirs))
            best_t = t_masked[rows, best]
            got = np.isfinite(best_t)
            if not np.any(got):
                continue
            shaded = _shade(pos64, radius, origin, t_in, dx, dy, dz, colors, sphere_idx)
            tile_rgba = np.zeros((len(tile_dirs), 4), dtype=np.uint8)
            tile_rgba[got, :3] = _quantize(shaded[rows, best][got])
            tile_rgba[got, 3] = 255
            th, tw = ys.stop - ys.start, xs.stop - xs.start
            rgba[ys, xs] = tile_rgba.reshape(th, tw, 4)
            depth[ys, xs] = np.where(got, best_t, np.inf).astype(np.float32).reshape(th, tw)
    return rgba, depth


def build_vdi(pos, colors, origin, rot, tan_half, aspect, near, far,
              width, height, radius, cell_size, opacity, s_max, merge_tol):
    """Collect per-pixel sphere intervals and merge them into supersegments."""
    from insitu.render.vdi import merge_segment_lists

    pos64 = np.asarray(pos, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    counts = np.zeros((height, width), dtype=np.uint16)
    segments = np.zeros((height, width, s_max, 6), dtype=np.float32)
    if len(pos64) == 0:
        return counts, segments
    dirs = ray_directions(width, height, rot, tan_half, aspect)
    x0, x1, y0, y1 = _screen_rects(pos64, radius, origin, rot, tan_half, aspect, near, width, height)
    lists, tiles_x, tiles_y = _tile_sphere_lists(x0, x1, y0, y1, width, height)

    op32 = np.float32(opacity)
    for ty in range(tiles_y):
        for tx in range(tiles_x):
            spheres = lists[ty * tiles_x + tx]
            if not spheres:
                continue
            sphere_idx = np.asarray(spheres, dtype=np.int64)
            ys = slice(ty * _TILE, min((ty + 1) * _TILE, height))
            xs = slice(tx * _TILE, min((tx + 1) * _TILE, width))
            tile_dirs = dirs[ys, xs].reshape(-1, 3)
            tw = xs.stop - xs.start
            t_in, t_out, hit, dx, dy, dz = _intersect(pos64, radius, origin, tile_dirs, sphere_idx)
            valid = hit & (t_in >= near) & (t_in <= far)
            if not np.any(valid):
                continue
            shaded = _shade(pos64, radius, origin, t_in, dx, dy, dz, colors, sphere_idx)
            ray_i, sph_i = np.nonzero(valid)
            fronts = t_in[ray_i, sph_i].astype(np.float32)
            backs = t_out[ray_i, sph_i].astype(np.float32)
            base = shaded[ray_i, sph_i]  # (k, 3) float32
            prem = np.empty((len(ray_i), 4), dtype=np.float32)
            prem[:, :3] = base * op32
            prem[:, 3] = op32
            global_sph = sphere_idx[sph_i]
            # group by pixel, then front depth, then sphere index
            sort = np.lexsort((global_sph, fronts, ray_i))
            ray_i, fronts, backs, base, prem = (
                ray_i[sort], fronts[sort], backs[sort], base[sort], prem[sort])
            bounds = np.flatnonzero(np.diff(ray_i)) + 1
            for seg in np.split(np.arange(len(ray_i)), bounds):
                r = ray_i[seg[0]]
                f, b, c = merge_segment_lists(
                    fronts[seg], backs[seg], prem[seg], base[seg], s_max, merge_tol)
                py, px = ys.start + r // tw, xs.start + r % tw
                k = len(f)
                counts[py, px] = k
                segments[py, px, :k, 0] = f
                segments[py, px, :k, 1] = b
                segments[py, px, :k, 2:6] = c
    return counts, segments


def composite_vdi(counts, segments):
    """Front-to-back over at the VDI's own camera."""
    height, width, s_max, _ = segments.shape
    acc = np.zeros((height, width, 4), dtype=np.float32)
    cnt = counts.astype(np.int64)
    for s in range(s_max):
        m = s < cnt
        if not np.any(m):
            break
        src = segments[:, :, s, 2:6]
        contrib = (np.float32(1.0) - acc[:, :, 3:4]) * src
        acc[m] += contrib[m]
    rgba = _quantize(acc)
    depth = np.where(cnt > 0, segments[:, :, 0, 0], np.float32(np.inf)).astype(np.float32)
    return rgba, depth


def reproject_vdi(counts, segments, src_origin, src_rot, src_tan_half, src_aspect,
                  dst_origin, dst_rot, dst_tan_half, dst_aspect, dst_near, dst_far,
                  width, height):
    """Splat supersegments (1-pixel footprint, anchored at their front) into a
    new camera and over-composite per destination pixel in depth order."""
    height_s, width_s, s_max, _ = segments.shape
    rgba = np.zeros((height, width, 4), dtype=np.uint8)
    depth_out = np.full((height, width), np.inf, dtype=np.float32)
    cnt = counts.astype(np.int64)
    slot = np.arange(s_max)[None, None, :]
    used = slot < cnt[:, :, None]
    total = int(used.sum())
    if total == 0:
        return rgba, depth_out

    dirs = ray_directions(width_s, height_s, src_rot, src_tan_half, src_aspect).reshape(-1, 3)
    pix_flat = np.broadcast_to(np.arange(height_s * width_s).reshape(height_s, width_s, 1),
                               used.shape)[used]
    segs = segments[used]  # (total, 6)
    front = segs[:, 0].astype(np.float64)

    src_origin = np.asarray(src_origin, dtype=np.float64)
    dst_origin = np.asarray(dst_origin, dtype=np.float64)
    wx = src_origin[0] + dirs[pix_flat, 0] * front
    wy = src_origin[1] + dirs[pix_flat, 1] * front
    wz = src_origin[2] + dirs[pix_flat, 2] * front
    rx = wx - dst_origin[0]
    ry = wy - dst_origin[1]
    rz = wz - dst_origin[2]
    r = dst_rot
    pcx = (r[0, 0] * rx + r[1, 0] * ry) + r[2, 0] * rz
    pcy = (r[0, 1] * rx + r[1, 1] * ry) + r[2, 1] * rz
    pcz = (r[0, 2] * rx + r[1, 2] * ry) + r[2, 2] * rz
    zneg = -pcz
    ok = zneg > 1e-12
    thx = dst_tan_half * dst_aspect
    safe = np.where(ok, zneg, 1.0)
    u = pcx / safe / thx
    v = pcy / safe / dst_tan_half
    fx = (u + 1.0) * 0.5 * width - 0.5
    fy = (1.0 - v) * 0.5 * height - 0.5
    ix = np.floor(fx + 0.5)
    iy = np.floor(fy + 0.5)
    d = np.sqrt((pcx * pcx + pcy * pcy) + pcz * pcz)
    ok &= (ix >= 0) & (ix < width) & (iy >= 0) & (iy < height)
    ok &= (d >= dst_near) & (d <= dst_far)
    if not np.any(ok):
        return rgba, depth_out

    dest = (iy[ok].astype(np.int64) * width + ix[ok].astype(np.int64))
    d = d[ok]
    color = segs[ok, 2:6]
    seq = np.arange(len(dest))
    order = np.lexsort((seq, d, dest))
    dest, d, color = dest[order], d[order], color[order]

    group_start = np.zeros(len(dest), dtype=bool)
    group_start[0] = True
    group_start[1:] = dest[1:] != dest[:-1]
    start_idx = np.flatnonzero(group_start)
    rank = np.arange(len(dest)) - np.repeat(start_idx, np.diff(np.append(start_idx, len(dest))))

    acc = np.zeros((height * width, 4), dtype=np.float32)
    first = group_start
    depth_flat = depth_out.reshape(-1)
    depth_flat[dest[first]] = d[first].astype(np.float32)
    max_rank = int(rank.max())
    for layer in range(max_rank + 1):
        sel = rank == layer
        pix = dest[sel]
        src = color[sel].astype(np.float32)
        acc[pix] += (np.float32(1.0) - acc[pix, 3:4]) * src
    rgba.reshape(-1, 4)[:] = _quantize(acc)
    return rgba, depth_out


# ---------------------------------------------------------------------------
# shared-memory header accessors (best-effort fallback; see module docstring)
# ---------------------------------------------------------------------------

def hdr_load_u64(buf, off: int) -> int:
    return struct.unpack_from("<Q", buf, off)[0]


def hdr_store_u64(buf, off: int, value: int) -> None:
    struct.pack_into("<Q", buf, off, value)


def hdr_load_u32(buf, off: int) -> int:
    return struct.unpack_from("<I", buf, off)[0]


def hdr_store_u32(buf, off: int, value: int) -> None:
    struct.pack_into("<I", buf, off, value)


def hdr_add_u32(buf, off: int, delta: int) -> int:
    # not atomic; adequate for the single-adjuster uses in this package
    value = (hdr_load_u32(buf, off) + delta) & 0xFFFFFFFF
    hdr_store_u32(buf, off, value)
    return value


def read_fence() -> None:
    pass
