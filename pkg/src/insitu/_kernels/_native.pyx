# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: LJ cell-list forces, sphere ray casting, VDI
construction/compositing/reprojection, and the shared-memory header atomics.

Arithmetic mirrors numpy_backend.py operation-for-operation (compiled with
fp-contract off) so both backends emit bit-identical images.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport sqrt, rint, floor, ceil, INFINITY, fabs
from libc.stdlib cimport malloc, free
from libc.string cimport memset

cnp.import_array()

BACKEND = "native"


cdef extern from *:
    """
    #include <stdint.h>
    static inline uint64_t ins_load_u64(const uint8_t *p) {
        return __atomic_load_n((const uint64_t *)p, __ATOMIC_ACQUIRE);
    }
    static inline void ins_store_u64(uint8_t *p, uint64_t v) {
        __atomic_store_n((uint64_t *)p, v, __ATOMIC_RELEASE);
    }
    static inline uint32_t ins_load_u32(const uint8_t *p) {
        return __atomic_load_n((const uint32_t *)p, __ATOMIC_ACQUIRE);
    }
    static inline void ins_store_u32(uint8_t *p, uint32_t v) {
        __atomic_store_n((uint32_t *)p, v, __ATOMIC_RELEASE);
    }
    static inline uint32_t ins_add_u32(uint8_t *p, uint32_t d) {
        return __atomic_add_fetch((uint32_t *)p, d, __ATOMIC_ACQ_REL);
    }
    static inline void ins_fence_acquire(void) {
        __atomic_thread_fence(__ATOMIC_ACQUIRE);
    }
    """
    ctypedef unsigned long long u64_t "uint64_t"
    ctypedef unsigned int u32_t "uint32_t"
    u64_t ins_load_u64(const unsigned char *p) nogil
    void ins_store_u64(unsigned char *p, u64_t v) nogil
    u32_t ins_load_u32(const unsigned char *p) nogil
    void ins_store_u32(unsigned char *p, u32_t v) nogil
    u32_t ins_add_u32(unsigned char *p, u32_t d) nogil
    void ins_fence_acquire() nogil


# ---------------------------------------------------------------------------
# shared-memory header atomics
# ---------------------------------------------------------------------------

def hdr_load_u64(const unsigned char[:] buf, Py_ssize_t off):
    return ins_load_u64(&buf[off])

def hdr_store_u64(unsigned char[:] buf, Py_ssize_t off, value):
    ins_store_u64(&buf[off], <u64_t> value)

def hdr_load_u32(const unsigned char[:] buf, Py_ssize_t off):
    return ins_load_u32(&buf[off])

def hdr_store_u32(unsigned char[:] buf, Py_ssize_t off, value):
    ins_store_u32(&buf[off], <u32_t> value)

def hdr_add_u32(unsigned char[:] buf, Py_ssize_t off, delta):
    return ins_add_u32(&buf[off], <u32_t> (delta & 0xFFFFFFFF))

def read_fence():
    ins_fence_acquire()


# ---------------------------------------------------------------------------
# Lennard-Jones forces via cell lists (x non-periodic, y/z minimum image)
# ---------------------------------------------------------------------------

cdef inline int _axis_offs(int ncells, bint periodic, int *offs) nogil:
    if ncells == 1:
        offs[0] = 0
        return 1
    if periodic and ncells == 2:
        offs[0] = 0; offs[1] = 1
        return 2
    offs[0] = -1; offs[1] = 0; offs[2] = 1
    return 3


def lj_forces(double[:, ::1] pos, Py_ssize_t n_owned, double cutoff,
              double ly, double lz):
    """Forces on the first n_owned particles plus this rank's potential share
    (owned-owned pairs once, owned-ghost pairs half)."""
    cdef Py_ssize_t n = pos.shape[0]
    forces_arr = np.zeros((n_owned, 3), dtype=np.float64)
    cdef double[:, ::1] forces = forces_arr
    if n_owned == 0 or n < 2:
        return forces_arr, 0.0

    cdef double rc2 = cutoff * cutoff
    cdef double u_shift = 4.0 * (cutoff ** -12 - cutoff ** -6)
    cdef double xmin = pos[0, 0], xmax = pos[0, 0]
    cdef Py_ssize_t i, j, k
    for i in range(n):
        if pos[i, 0] < xmin: xmin = pos[i, 0]
        if pos[i, 0] > xmax: xmax = pos[i, 0]
    cdef double extent = xmax - xmin
    cdef int ncx = <int> (extent / cutoff)
    if ncx < 1: ncx = 1
    cdef double cwx = extent / ncx if extent > 0 else 1.0
    cdef int ncy = <int> (ly / cutoff)
    if ncy < 1: ncy = 1
    cdef int ncz = <int> (lz / cutoff)
    if ncz < 1: ncz = 1
    cdef double cwy = ly / ncy, cwz = lz / ncz
    cdef int ncells = ncx * ncy * ncz

    cell_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] cell = cell_arr
    count_arr = np.zeros(ncells + 1, dtype=np.int64)
    cdef long long[::1] starts = count_arr
    sorted_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] sorted_idx = sorted_arr
    cursor_arr = np.empty(ncells, dtype=np.int64)
    cdef long long[::1] cursor = cursor_arr

    cdef int cx, cy, cz
    with nogil:
        for i in range(n):
            cx = <int> ((pos[i, 0] - xmin) / cwx)
            if cx > ncx - 1: cx = ncx - 1
            if cx < 0: cx = 0
            cy = <int> (pos[i, 1] / cwy)
            if cy > ncy - 1: cy = ncy - 1
            if cy < 0: cy = 0
            cz = <int> (pos[i, 2] / cwz)
            if cz > ncz - 1: cz = ncz - 1
            if cz < 0: cz = 0
            cell[i] = (<long long> cx * ncy + cy) * ncz + cz
            starts[cell[i] + 1] += 1
        for k in range(ncells):
            starts[k + 1] += starts[k]
        for k in range(ncells):
            cursor[k] = starts[k]
        for i in range(n):
            sorted_idx[cursor[cell[i]]] = i
            cursor[cell[i]] += 1

    cdef int offs_x[3]
    cdef int offs_y[3]
    cdef int offs_z[3]
    cdef int nox = _axis_offs(ncx, False, offs_x)
    cdef int noy = _axis_offs(ncy, True, offs_y)
    cdef int noz = _axis_offs(ncz, True, offs_z)

    cdef double potential = 0.0
    cdef double xi, yi, zi, dx, dy, dz, r2, inv_r2, inv_r6, fs
    cdef double fxi, fyi, fzi
    cdef int icx, icy, icz, ox, oy, oz, nx2, ny2, nz2
    cdef long long c2, s0, s1
    cdef Py_ssize_t jj
    with nogil:
        for i in range(n_owned):
            xi = pos[i, 0]; yi = pos[i, 1]; zi = pos[i, 2]
            c2 = cell[i]
            icz = <int> (c2 % ncz)
            icy = <int> ((c2 // ncz) % ncy)
            icx = <int> (c2 // (<long long> ncy * ncz))
            fxi = 0.0; fyi = 0.0; fzi = 0.0
            for ox in range(nox):
                nx2 = icx + offs_x[ox]
                if nx2 < 0 or nx2 >= ncx:
                    continue
                for oy in range(noy):
                    ny2 = (icy + offs_y[oy] + ncy) % ncy
                    for oz in range(noz):
                        nz2 = (icz + offs_z[oz] + ncz) % ncz
                        c2 = (<long long> nx2 * ncy + ny2) * ncz + nz2
                        s0 = starts[c2]; s1 = starts[c2 + 1]
                        for k in range(s0, s1):
                            jj = sorted_idx[k]
                            if jj == i:
                                continue
                            dx = xi - pos[jj, 0]
                            dy = yi - pos[jj, 1]
                            dz = zi - pos[jj, 2]
                            dy = dy - ly * rint(dy / ly)
                            dz = dz - lz * rint(dz / lz)
                            r2 = (dx * dx + dy * dy) + dz * dz
                            if r2 >= rc2:
                                continue
                            inv_r2 = 1.0 / r2
                            inv_r6 = inv_r2 * inv_r2 * inv_r2
                            fs = 24.0 * (inv_r2 * inv_r6) * (2.0 * inv_r6 - 1.0)
                            fxi += fs * dx
                            fyi += fs * dy
                            fzi += fs * dz
                            potential += 0.5 * (4.0 * inv_r6 * (inv_r6 - 1.0) - u_shift)
            forces[i, 0] = fxi
            forces[i, 1] = fyi
            forces[i, 2] = fzi
    return forces_arr, potential


# ---------------------------------------------------------------------------
# uniform grid used by the render kernels
# ---------------------------------------------------------------------------

cdef struct Grid:
    double gmin[3]
    double cw[3]
    int dims[3]
    long long *starts   # dims^3 + 1
    long long *items    # entries: sphere index per overlapped cell
    long long n_items

cdef int _grid_build(Grid *g, const float[:, ::1] pos, double radius,
                     double cell_size) except -1:
    cdef Py_ssize_t n = pos.shape[0]
    cdef int ax, d
    cdef double lo, hi, extent
    cdef Py_ssize_t i
    for ax in range(3):
        lo = pos[0, ax]; hi = pos[0, ax]
        for i in range(n):
            if pos[i, ax] < lo: lo = pos[i, ax]
            if pos[i, ax] > hi: hi = pos[i, ax]
        g.gmin[ax] = lo - radius
        extent = (hi + radius) - g.gmin[ax]
        d = <int> ceil(extent / cell_size)
        if d < 1: d = 1
        if d > 128: d = 128
        g.dims[ax] = d
        g.cw[ax] = extent / d if extent > 0 else 1.0
    cdef long long ncells = <long long> g.dims[0] * g.dims[1] * g.dims[2]
    g.starts = <long long *> malloc((ncells + 1) * sizeof(long long))
    if g.starts == NULL:
        raise MemoryError()
    memset(g.starts, 0, (ncells + 1) * sizeof(long long))

    cdef int lo_c[3]
    cdef int hi_c[3]
    cdef int cx, cy, cz
    cdef long long cid
    for i in range(n):
        for ax in range(3):
            lo_c[ax] = <int> ((pos[i, ax] - radius - g.gmin[ax]) / g.cw[ax])
            hi_c[ax] = <int> ((pos[i, ax] + radius - g.gmin[ax]) / g.cw[ax])
            if lo_c[ax] < 0: lo_c[ax] = 0
            if hi_c[ax] > g.dims[ax] - 1: hi_c[ax] = g.dims[ax] - 1
        for cx in range(lo_c[0], hi_c[0] + 1):
            for cy in range(lo_c[1], hi_c[1] + 1):
                for cz in range(lo_c[2], hi_c[2] + 1):
                    cid = (<long long> cx * g.dims[1] + cy) * g.dims[2] + cz
                    g.starts[cid + 1] += 1
    cdef long long c
    for c in range(ncells):
        g.starts[c + 1] += g.starts[c]
    g.n_items = g.starts[ncells]
    g.items = <long long *> malloc(g.n_items * sizeof(long long) if g.n_items > 0 else 8)
    if g.items == NULL:
        free(g.starts)
        raise MemoryError()
    cdef long long *cur = <long long *> malloc(ncells * sizeof(long long))
    if cur == NULL:
        free(g.starts); free(g.items)
        raise MemoryError()
    for c in range(ncells):
        cur[c] = g.starts[c]
    for i in range(n):
        for ax in range(3):
            lo_c[ax] = <int> ((pos[i, ax] - radius - g.gmin[ax]) / g.cw[ax])
            hi_c[ax] = <int> ((pos[i, ax] + radius - g.gmin[ax]) / g.cw[ax])
            if lo_c[ax] < 0: lo_c[ax] = 0
            if hi_c[ax] > g.dims[ax] - 1: hi_c[ax] = g.dims[ax] - 1
        for cx in range(lo_c[0], hi_c[0] + 1):
            for cy in range(lo_c[1], hi_c[1] + 1):
                for cz in range(lo_c[2], hi_c[2] + 1):
                    cid = (<long long> cx * g.dims[1] + cy) * g.dims[2] + cz
                    g.items[cur[cid]] = i
                    cur[cid] += 1
    free(cur)
    return 0

cdef void _grid_free(Grid *g) nogil:
    free(g.starts)
    free(g.items)


cdef inline double _ray_dir(double px, double py, Py_ssize_t w, Py_ssize_t h,
                            const double[:, ::1] rot, double thx, double thy,
                            double *out) nogil:
    """World-space normalized ray through pixel center; mirrors ray_directions."""
    cdef double u = (px + 0.5) * 2.0 / w - 1.0
    cdef double v = 1.0 - (py + 0.5) * 2.0 / h
    cdef double dx = u * thx
    cdef double dy = v * thy
    cdef double dz = -1.0
    cdef double wx = rot[0, 0] * dx + rot[0, 1] * dy + rot[0, 2] * dz
    cdef double wy = rot[1, 0] * dx + rot[1, 1] * dy + rot[1, 2] * dz
    cdef double wz = rot[2, 0] * dx + rot[2, 1] * dy + rot[2, 2] * dz
    cdef double inv = 1.0 / sqrt(wx * wx + wy * wy + wz * wz)
    out[0] = wx * inv
    out[1] = wy * inv
    out[2] = wz * inv
    return inv


cdef struct DDA:
    int cell[3]
    int step[3]
    double tmax[3]
    double tdelta[3]
    bint alive

cdef void _dda_init(DDA *s, Grid *g, const double *o, const double *d) nogil:
    """Clip the ray to the grid box and set up traversal from the entry point."""
    cdef double t0 = 0.0, t1 = INFINITY
    cdef double inv, ta, tb, tmp, gmax
    cdef int ax
    for ax in range(3):
        gmax = g.gmin[ax] + g.cw[ax] * g.dims[ax]
        if d[ax] != 0.0:
            inv = 1.0 / d[ax]
            ta = (g.gmin[ax] - o[ax]) * inv
            tb = (gmax - o[ax]) * inv
            if ta > tb:
                tmp = ta; ta = tb; tb = tmp
            if ta > t0: t0 = ta
            if tb < t1: t1 = tb
        elif o[ax] < g.gmin[ax] or o[ax] > gmax:
            s.alive = False
            return
    if t0 > t1:
        s.alive = False
        return
    cdef double px
    cdef int c
    for ax in range(3):
        px = o[ax] + d[ax] * (t0 + 1e-12)
        c = <int> ((px - g.gmin[ax]) / g.cw[ax])
        if c < 0: c = 0
        if c > g.dims[ax] - 1: c = g.dims[ax] - 1
        s.cell[ax] = c
        if d[ax] > 0.0:
            s.step[ax] = 1
            s.tmax[ax] = (g.gmin[ax] + (c + 1) * g.cw[ax] - o[ax]) / d[ax]
            s.tdelta[ax] = g.cw[ax] / d[ax]
        elif d[ax] < 0.0:
            s.step[ax] = -1
            s.tmax[ax] = (g.gmin[ax] + c * g.cw[ax] - o[ax]) / d[ax]
            s.tdelta[ax] = -g.cw[ax] / d[ax]
        else:
            s.step[ax] = 0
            s.tmax[ax] = INFINITY
            s.tdelta[ax] = INFINITY
    s.alive = True

cdef inline double _dda_cell_exit(DDA *s) nogil:
    cdef double m = s.tmax[0]
    if s.tmax[1] < m: m = s.tmax[1]
    if s.tmax[2] < m: m = s.tmax[2]
    return m

cdef inline void _dda_advance(DDA *s, Grid *g) nogil:
    cdef int ax = 0
    if s.tmax[1] < s.tmax[ax]: ax = 1
    if s.tmax[2] < s.tmax[ax]: ax = 2
    s.cell[ax] += s.step[ax]
    if s.cell[ax] < 0 or s.cell[ax] >= g.dims[ax]:
        s.alive = False
        return
    s.tmax[ax] += s.tdelta[ax]


# ---------------------------------------------------------------------------
# opaque sphere render
# ---------------------------------------------------------------------------

def render_spheres(const float[:, ::1] pos, const float[:, ::1] colors,
                   const double[::1] origin, const double[:, ::1] rot,
                   double tan_half, double aspect, double near, double far,
                   Py_ssize_t width, Py_ssize_t height, double radius,
                   double cell_size):
    rgba_arr = np.zeros((height, width, 4), dtype=np.uint8)
    depth_arr = np.full((height, width), np.inf, dtype=np.float32)
    cdef unsigned char[:, :, ::1] rgba = rgba_arr
    cdef float[:, ::1] depth = depth_arr
    cdef Py_ssize_t n = pos.shape[0]
    if n == 0:
        return rgba_arr, depth_arr

    cdef Grid g
    _grid_build(&g, pos, radius, cell_size)
    stamp_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] stamp = stamp_arr

    cdef double thx = tan_half * aspect
    cdef double o0 = origin[0], o1 = origin[1], o2 = origin[2]
    cdef double d[3]
    cdef double o[3]
    o[0] = o0; o[1] = o1; o[2] = o2
    cdef double rr = radius * radius
    cdef double inv_r = 1.0 / radius
    cdef Py_ssize_t px, py, k, j
    cdef long long ray_id = 0
    cdef DDA s
    cdef long long cid, s0, s1
    cdef double ox, oy, oz, b, cc, disc, sq, t, best_t, exit_t
    cdef long long best_j
    cdef double hx, hy, hz, nx, ny, nz, lam
    cdef float sr, sg, sb
    with nogil:
        for py in range(height):
            for px in range(width):
                ray_id += 1
                _ray_dir(<double> px, <double> py, width, height, rot, thx, tan_half, d)
                _dda_init(&s, &g, o, d)
                best_t = INFINITY
                best_j = -1
                while s.alive:
                    cid = (<long long> s.cell[0] * g.dims[1] + s.cell[1]) * g.dims[2] + s.cell[2]
                    s0 = g.starts[cid]; s1 = g.starts[cid + 1]
                    for k in range(s0, s1):
                        j = g.items[k]
                        if stamp[j] == ray_id:
                            continue
                        stamp[j] = ray_id
                        ox = (<double> pos[j, 0]) - o0
                        oy = (<double> pos[j, 1]) - o1
                        oz = (<double> pos[j, 2]) - o2
                        b = (ox * d[0] + oy * d[1]) + oz * d[2]
                        cc = ((ox * ox + oy * oy) + oz * oz) - rr
                        disc = b * b - cc
                        if disc < 0.0:
                            continue
                        t = b - sqrt(disc)
                        if t < near or t > far:
                            continue
                        if t < best_t or (t == best_t and j < best_j):
                            best_t = t
                            best_j = j
                    exit_t = _dda_cell_exit(&s)
                    if best_t <= exit_t:
                        break
                    _dda_advance(&s, &g)
                if best_j >= 0:
                    j = best_j
                    t = best_t
                    hx = ((o0 + t * d[0]) - <double> pos[j, 0]) * inv_r
                    hy = ((o1 + t * d[1]) - <double> pos[j, 1]) * inv_r
                    hz = ((o2 + t * d[2]) - <double> pos[j, 2]) * inv_r
                    lam = -((hx * d[0] + hy * d[1]) + hz * d[2])
                    if lam < 0.0:
                        lam = 0.0
                    sr = <float> ((<double> colors[j, 0]) * lam)
                    sg = <float> ((<double> colors[j, 1]) * lam)
                    sb = <float> ((<double> colors[j, 2]) * lam)
                    rgba[py, px, 0] = _q8(sr)
                    rgba[py, px, 1] = _q8(sg)
                    rgba[py, px, 2] = _q8(sb)
                    rgba[py, px, 3] = 255
                    depth[py, px] = <float> t
        _grid_free(&g)
    return rgba_arr, depth_arr


cdef inline unsigned char _q8(float v) nogil:
    if v < 0.0:
        v = 0.0
    if v > 1.0:
        v = 1.0
    return <unsigned char> (v * <float> 255.0 + <float> 0.5)


# ---------------------------------------------------------------------------
# VDI construction
# ---------------------------------------------------------------------------

def build_vdi(const float[:, ::1] pos, const float[:, ::1] colors,
              const double[::1] origin, const double[:, ::1] rot,
              double tan_half, double aspect, double near, double far,
              Py_ssize_t width, Py_ssize_t height, double radius,
              double cell_size, double opacity, Py_ssize_t s_max,
              double merge_tol):
    counts_arr = np.zeros((height, width), dtype=np.uint16)
    segs_arr = np.zeros((height, width, s_max, 6), dtype=np.float32)
    cdef unsigned short[:, ::1] counts = counts_arr
    cdef float[:, :, :, ::1] segs = segs_arr
    cdef Py_ssize_t n = pos.shape[0]
    if n == 0:
        return counts_arr, segs_arr

    cdef Grid g
    _grid_build(&g, pos, radius, cell_size)
    stamp_arr = np.zeros(n, dtype=np.int64)
    cdef long long[::1] stamp = stamp_arr
    # per-ray scratch: every sphere can hit at most once
    hit_f_arr = np.empty(n, dtype=np.float32)
    hit_b_arr = np.empty(n, dtype=np.float32)
    hit_j_arr = np.empty(n, dtype=np.int64)
    hit_t_arr = np.empty(n, dtype=np.float64)
    cdef float[::1] hit_f = hit_f_arr
    cdef float[::1] hit_b = hit_b_arr
    cdef long long[::1] hit_j = hit_j_arr
    cdef double[::1] hit_t = hit_t_arr

    cdef double thx = tan_half * aspect
    cdef double o0 = origin[0], o1 = origin[1], o2 = origin[2]
    cdef double o[3]
    o[0] = o0; o[1] = o1; o[2] = o2
    cdef double d[3]
    cdef double rr = radius * radius
    cdef double inv_r = 1.0 / radius
    cdef float opf = <float> opacity
    cdef Py_ssize_t px, py, k, j, m, nhits, w_i
    cdef long long ray_id = 0
    cdef DDA s
    cdef long long cid, s0, s1
    cdef double ox, oy, oz, b, cc, disc, sq, t
    cdef double hx, hy, hz, nx, ny, nz, lam
    cdef float keyf
    cdef long long keyj
    cdef float base_r, base_g, base_b
    cdef float last_r, last_g, last_b
    cdef float pm_r, pm_g, pm_b
    cdef int out_n
    cdef bint merged, overlap, full, similar
    cdef float ta, df, dg, db
    with nogil:
        for py in range(height):
            for px in range(width):
                ray_id += 1
                _ray_dir(<double> px, <double> py, width, height, rot, thx, tan_half, d)
                _dda_init(&s, &g, o, d)
                nhits = 0
                while s.alive:
                    cid = (<long long> s.cell[0] * g.dims[1] + s.cell[1]) * g.dims[2] + s.cell[2]
                    s0 = g.starts[cid]; s1 = g.starts[cid + 1]
                    for k in range(s0, s1):
                        j = g.items[k]
                        if stamp[j] == ray_id:
                            continue
                        stamp[j] = ray_id
                        ox = (<double> pos[j, 0]) - o0
                        oy = (<double> pos[j, 1]) - o1
                        oz = (<double> pos[j, 2]) - o2
                        b = (ox * d[0] + oy * d[1]) + oz * d[2]
                        cc = ((ox * ox + oy * oy) + oz * oz) - rr
                        disc = b * b - cc
                        if disc < 0.0:
                            continue
                        sq = sqrt(disc)
                        t = b - sq
                        if t < near or t > far:
                            continue
                        hit_f[nhits] = <float> t
                        hit_b[nhits] = <float> (b + sq)
                        hit_j[nhits] = j
                        hit_t[nhits] = t
                        nhits += 1
                    _dda_advance(&s, &g)
                if nhits == 0:
                    continue
                # insertion sort by (front f32, sphere index)
                for m in range(1, nhits):
                    keyf = hit_f[m]; keyj = hit_j[m]
                    ta = hit_b[m]
                    t = hit_t[m]
                    w_i = m
                    while w_i > 0 and (hit_f[w_i - 1] > keyf or
                                       (hit_f[w_i - 1] == keyf and hit_j[w_i - 1] > keyj)):
                        hit_f[w_i] = hit_f[w_i - 1]
                        hit_b[w_i] = hit_b[w_i - 1]
                        hit_j[w_i] = hit_j[w_i - 1]
                        hit_t[w_i] = hit_t[w_i - 1]
                        w_i -= 1
                    hit_f[w_i] = keyf
                    hit_b[w_i] = ta
                    hit_j[w_i] = keyj
                    hit_t[w_i] = t
                # greedy merge into supersegments
                out_n = 0
                last_r = 0; last_g = 0; last_b = 0
                for m in range(nhits):
                    j = hit_j[m]
                    t = hit_t[m]
                    hx = ((o0 + t * d[0]) - <double> pos[j, 0]) * inv_r
                    hy = ((o1 + t * d[1]) - <double> pos[j, 1]) * inv_r
                    hz = ((o2 + t * d[2]) - <double> pos[j, 2]) * inv_r
                    lam = -((hx * d[0] + hy * d[1]) + hz * d[2])
                    if lam < 0.0:
                        lam = 0.0
                    base_r = <float> ((<double> colors[j, 0]) * lam)
                    base_g = <float> ((<double> colors[j, 1]) * lam)
                    base_b = <float> ((<double> colors[j, 2]) * lam)
                    pm_r = base_r * opf
                    pm_g = base_g * opf
                    pm_b = base_b * opf
                    merged = False
                    if out_n > 0:
                        overlap = hit_f[m] < segs[py, px, out_n - 1, 1]
                        full = out_n == s_max
                        df = base_r - last_r
                        if df < 0: df = -df
                        dg = base_g - last_g
                        if dg < 0: dg = -dg
                        db = base_b - last_b
                        if db < 0: db = -db
                        if dg > df: df = dg
                        if db > df: df = db
                        similar = m > 0 and (<double> df) <= merge_tol
                        if overlap or full or similar:
                            if hit_b[m] > segs[py, px, out_n - 1, 1]:
                                segs[py, px, out_n - 1, 1] = hit_b[m]
                            ta = <float> 1.0 - segs[py, px, out_n - 1, 5]
                            segs[py, px, out_n - 1, 2] += ta * pm_r
                            segs[py, px, out_n - 1, 3] += ta * pm_g
                            segs[py, px, out_n - 1, 4] += ta * pm_b
                            segs[py, px, out_n - 1, 5] += ta * opf
                            merged = True
                    if not merged:
                        segs[py, px, out_n, 0] = hit_f[m]
                        segs[py, px, out_n, 1] = hit_b[m]
                        segs[py, px, out_n, 2] = pm_r
                        segs[py, px, out_n, 3] = pm_g
                        segs[py, px, out_n, 4] = pm_b
                        segs[py, px, out_n, 5] = opf
                        out_n += 1
                    last_r = base_r; last_g = base_g; last_b = base_b
                counts[py, px] = <unsigned short> out_n
        _grid_free(&g)
    return counts_arr, segs_arr


# ---------------------------------------------------------------------------
# VDI compositing and reprojection
# ---------------------------------------------------------------------------

def composite_vdi(const unsigned short[:, ::1] counts,
                  const float[:, :, :, ::1] segs):
    cdef Py_ssize_t height = segs.shape[0], width = segs.shape[1]
    cdef Py_ssize_t s_max = segs.shape[2]
    rgba_arr = np.zeros((height, width, 4), dtype=np.uint8)
    depth_arr = np.full((height, width), np.inf, dtype=np.float32)
    cdef unsigned char[:, :, ::1] rgba = rgba_arr
    cdef float[:, ::1] depth = depth_arr
    cdef Py_ssize_t py, px, s
    cdef float ar, ag, ab, aa, t
    with nogil:
        for py in range(height):
            for px in range(width):
                if counts[py, px] == 0:
                    continue
                ar = 0; ag = 0; ab = 0; aa = 0
                for s in range(counts[py, px]):
                    t = <float> 1.0 - aa
                    ar += t * segs[py, px, s, 2]
                    ag += t * segs[py, px, s, 3]
                    ab += t * segs[py, px, s, 4]
                    aa += t * segs[py, px, s, 5]
                rgba[py, px, 0] = _q8(ar)
                rgba[py, px, 1] = _q8(ag)
                rgba[py, px, 2] = _q8(ab)
                rgba[py, px, 3] = _q8(aa)
                depth[py, px] = segs[py, px, 0, 0]
    return rgba_arr, depth_arr


def reproject_vdi(const unsigned short[:, ::1] counts,
                  const float[:, :, :, ::1] segs,
                  const double[::1] src_origin, const double[:, ::1] src_rot,
                  double src_tan_half, double src_aspect,
                  const double[::1] dst_origin, const double[:, ::1] dst_rot,
                  double dst_tan_half, double dst_aspect,
                  double dst_near, double dst_far,
                  Py_ssize_t width, Py_ssize_t height):
    cdef Py_ssize_t hs = segs.shape[0], ws = segs.shape[1]
    cdef Py_ssize_t s_max = segs.shape[2]
    rgba_arr = np.zeros((height, width, 4), dtype=np.uint8)
    depth_arr = np.full((height, width), np.inf, dtype=np.float32)
    cdef unsigned char[:, :, ::1] rgba = rgba_arr
    cdef float[:, ::1] depth = depth_arr

    cdef long long total = 0
    cdef Py_ssize_t py, px, s
    for py in range(hs):
        for px in range(ws):
            total += counts[py, px]
    if total == 0:
        return rgba_arr, depth_arr

    dest_arr = np.empty(total, dtype=np.int64)
    d_arr = np.empty(total, dtype=np.float64)
    col_arr = np.empty((total, 4), dtype=np.float32)
    cdef long long[::1] dest = dest_arr
    cdef double[::1] dd = d_arr
    cdef float[:, ::1] col = col_arr

    cdef double sthx = src_tan_half * src_aspect
    cdef double dthx = dst_tan_half * dst_aspect
    cdef double so0 = src_origin[0], so1 = src_origin[1], so2 = src_origin[2]
    cdef double do0 = dst_origin[0], do1 = dst_origin[1], do2 = dst_origin[2]
    cdef double d3[3]
    cdef double front, wx, wy, wz, rx, ry, rz, pcx, pcy, pcz, zneg
    cdef double u, v, fx, fy, dist
    cdef long long ix, iy
    cdef long long nsplat = 0
    with nogil:
        for py in range(hs):
            for px in range(ws):
                if counts[py, px] == 0:
                    continue
                _ray_dir(<double> px, <double> py, ws, hs, src_rot, sthx, src_tan_half, d3)
                for s in range(counts[py, px]):
                    front = <double> segs[py, px, s, 0]
                    wx = so0 + d3[0] * front
                    wy = so1 + d3[1] * front
                    wz = so2 + d3[2] * front
                    rx = wx - do0
                    ry = wy - do1
                    rz = wz - do2
                    pcx = (dst_rot[0, 0] * rx + dst_rot[1, 0] * ry) + dst_rot[2, 0] * rz
                    pcy = (dst_rot[0, 1] * rx + dst_rot[1, 1] * ry) + dst_rot[2, 1] * rz
                    pcz = (dst_rot[0, 2] * rx + dst_rot[1, 2] * ry) + dst_rot[2, 2] * rz
                    zneg = -pcz
                    if zneg <= 1e-12:
                        continue
                    u = pcx / zneg / dthx
                    v = pcy / zneg / dst_tan_half
                    fx = (u + 1.0) * 0.5 * width - 0.5
                    fy = (1.0 - v) * 0.5 * height - 0.5
                    ix = <long long> floor(fx + 0.5)
                    iy = <long long> floor(fy + 0.5)
                    if ix < 0 or ix >= width or iy < 0 or iy >= height:
                        continue
                    dist = sqrt((pcx * pcx + pcy * pcy) + pcz * pcz)
                    if dist < dst_near or dist > dst_far:
                        continue
                    dest[nsplat] = iy * width + ix
                    dd[nsplat] = dist
                    col[nsplat, 0] = segs[py, px, s, 2]
                    col[nsplat, 1] = segs[py, px, s, 3]
                    col[nsplat, 2] = segs[py, px, s, 4]
                    col[nsplat, 3] = segs[py, px, s, 5]
                    nsplat += 1
    if nsplat == 0:
        return rgba_arr, depth_arr

    # stable counting sort by destination pixel, then insertion sort by depth
    cdef long long npix = <long long> width * height
    cnt_arr = np.zeros(npix + 1, dtype=np.int64)
    cdef long long[::1] cstarts = cnt_arr
    ord_arr = np.empty(nsplat, dtype=np.int64)
    cdef long long[::1] order = ord_arr
    cur_arr = np.empty(npix, dtype=np.int64)
    cdef long long[::1] cur = cur_arr
    cdef long long i2, p2, a, lo, hi, key
    cdef double keyd
    cdef float ar, ag, ab, aa, tt
    with nogil:
        for i2 in range(nsplat):
            cstarts[dest[i2] + 1] += 1
        for p2 in range(npix):
            cstarts[p2 + 1] += cstarts[p2]
            cur[p2] = cstarts[p2]
        for i2 in range(nsplat):
            order[cur[dest[i2]]] = i2
            cur[dest[i2]] += 1
        for p2 in range(npix):
            lo = cstarts[p2]; hi = cstarts[p2 + 1]
            if hi <= lo:
                continue
            # insertion sort on depth; stable, so arrival order breaks ties
            for a in range(lo + 1, hi):
                key = order[a]
                keyd = dd[key]
                i2 = a
                while i2 > lo and dd[order[i2 - 1]] > keyd:
                    order[i2] = order[i2 - 1]
                    i2 -= 1
                order[i2] = key
            ar = 0; ag = 0; ab = 0; aa = 0
            for a in range(lo, hi):
                key = order[a]
                tt = <float> 1.0 - aa
                ar += tt * col[key, 0]
                ag += tt * col[key, 1]
                ab += tt * col[key, 2]
                aa += tt * col[key, 3]
            rgba[p2 // width, p2 % width, 0] = _q8(ar)
            rgba[p2 // width, p2 % width, 1] = _q8(ag)
            rgba[p2 // width, p2 % width, 2] = _q8(ab)
            rgba[p2 // width, p2 % width, 3] = _q8(aa)
            depth[p2 // width, p2 % width] = <float> dd[order[lo]]
    return rgba_arr, depth_arr
