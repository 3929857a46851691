# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot kernels.

Mirrors _kernels.fallback semantically: identical update sets, identical
arithmetic per update (IEEE double ops in the same order), so results agree
with the pure-numpy backend to floating-point reassociation noise at most.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, ceil, floor, isfinite, isnan, sqrt

cnp.import_array()

from ..mc_tables import (CORNER_OFFSETS, EDGE_ANCHORS, EDGE_CORNERS,
                         EDGE_TABLE, TRI_TABLE)

# flattened immutable tables for nogil access
_CORNERS = np.ascontiguousarray(CORNER_OFFSETS, dtype=np.int32)
_ANCHORS = np.ascontiguousarray(EDGE_ANCHORS, dtype=np.int32)
_ECORN = np.ascontiguousarray(EDGE_CORNERS, dtype=np.int32)
_ETABLE = np.ascontiguousarray(EDGE_TABLE, dtype=np.int32)
_TTABLE = np.ascontiguousarray(TRI_TABLE, dtype=np.int32)
_TRI_COUNT = np.ascontiguousarray(
    np.count_nonzero(TRI_TABLE >= 0, axis=1) // 3, dtype=np.int32)

cdef const int[:, ::1] C_CORNERS = _CORNERS
cdef const int[:, ::1] C_ANCHORS = _ANCHORS
cdef const int[:, ::1] C_ECORN = _ECORN
cdef const int[::1] C_ETABLE = _ETABLE
cdef const int[:, ::1] C_TTABLE = _TTABLE
cdef const int[::1] C_TRI_COUNT = _TRI_COUNT

DEF T_MIN = 1e-9
DEF DET_EPS = 1e-12


# ---------------------------------------------------------------------------
# TSDF carving


cdef inline long _count_or_fill_point(
        double px, double py, double pz, double sx, double sy, double sz,
        double eps, double back, double voxel_size, double r_perp,
        long[:, ::1] out_vox, double[::1] out_d, long[::1] out_src,
        long src_index, long write_at, bint fill) noexcept nogil:
    cdef double rx = px - sx, ry = py - sy, rz = pz - sz
    cdef double norm = sqrt(rx * rx + ry * ry + rz * rz)
    if norm < 1e-12:
        return 0
    cdef double dx = rx / norm, dy = ry / norm, dz = rz / norm
    cdef double ax = px - back * dx, ay = py - back * dy, az = pz - back * dz
    cdef double bx = px + eps * dx, by = py + eps * dy, bz = pz + eps * dz
    cdef long lox = <long>floor(((ax if ax < bx else bx) - r_perp) / voxel_size)
    cdef long loy = <long>floor(((ay if ay < by else by) - r_perp) / voxel_size)
    cdef long loz = <long>floor(((az if az < bz else bz) - r_perp) / voxel_size)
    cdef long hix = <long>floor(((ax if ax > bx else bx) + r_perp) / voxel_size)
    cdef long hiy = <long>floor(((ay if ay > by else by) + r_perp) / voxel_size)
    cdef long hiz = <long>floor(((az if az > bz else bz) + r_perp) / voxel_size)
    cdef double r2 = r_perp * r_perp
    cdef long vx, vy, vz, n = 0
    cdef double cx, cy, cz, qx, qy, qz, d, perp2, dc
    for vx in range(lox, hix + 1):
        cx = (vx + 0.5) * voxel_size
        qx = px - cx
        for vy in range(loy, hiy + 1):
            cy = (vy + 0.5) * voxel_size
            qy = py - cy
            for vz in range(loz, hiz + 1):
                cz = (vz + 0.5) * voxel_size
                qz = pz - cz
                d = qx * dx + qy * dy + qz * dz
                perp2 = qx * qx + qy * qy + qz * qz - d * d
                if d >= -back and d <= eps and perp2 <= r2:
                    if fill:
                        out_vox[write_at + n, 0] = vx
                        out_vox[write_at + n, 1] = vy
                        out_vox[write_at + n, 2] = vz
                        dc = d
                        if dc < -back:
                            dc = -back
                        elif dc > eps:
                            dc = eps
                        out_d[write_at + n] = dc
                        out_src[write_at + n] = src_index
                    n += 1
    return n


def enumerate_updates(points, sensor, eps, back, double voxel_size,
                      double r_perp):
    """See fallback.enumerate_updates; identical contract and ordering."""
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] sen = np.ascontiguousarray(
        np.asarray(sensor, dtype=np.float64).reshape(3))
    cdef const double[::1] ee = np.ascontiguousarray(
        np.asarray(eps, dtype=np.float64).reshape(-1))
    cdef const double[::1] bb = np.ascontiguousarray(
        np.asarray(back, dtype=np.float64).reshape(-1))
    cdef long n = pts.shape[0]
    cdef long[::1] counts = np.zeros(n, dtype=np.int64)
    cdef long i
    cdef long[:, ::1] dummy_v = np.empty((1, 3), dtype=np.int64)
    cdef double[::1] dummy_d = np.empty(1)
    cdef long[::1] dummy_s = np.empty(1, dtype=np.int64)
    with nogil:
        for i in range(n):
            counts[i] = _count_or_fill_point(
                pts[i, 0], pts[i, 1], pts[i, 2], sen[0], sen[1], sen[2],
                ee[i], bb[i], voxel_size, r_perp, dummy_v, dummy_d, dummy_s,
                i, 0, 0)
    offsets = np.concatenate([[0], np.cumsum(np.asarray(counts))])
    cdef long total = offsets[-1]
    vox = np.empty((total, 3), dtype=np.int64)
    dd = np.empty(total, dtype=np.float64)
    src = np.empty(total, dtype=np.int64)
    cdef long[:, ::1] vox_v = vox
    cdef double[::1] dd_v = dd
    cdef long[::1] src_v = src
    cdef long[::1] offs = np.ascontiguousarray(offsets, dtype=np.int64)
    with nogil:
        for i in range(n):
            _count_or_fill_point(
                pts[i, 0], pts[i, 1], pts[i, 2], sen[0], sen[1], sen[2],
                ee[i], bb[i], voxel_size, r_perp, vox_v, dd_v, src_v, i,
                offs[i], 1)
    return vox, dd, src


def apply_updates(tsdf, weight, block_rows, local_idx, d, w):
    """Sequential weighted-average update; float32 state, float64 math."""
    cdef float[:, ::1] ts = tsdf
    cdef float[:, ::1] wt = weight
    cdef const long[::1] br = np.ascontiguousarray(block_rows, dtype=np.int64)
    cdef const long[::1] li = np.ascontiguousarray(local_idx, dtype=np.int64)
    cdef const double[::1] dd = np.ascontiguousarray(d, dtype=np.float64)
    cdef const double[::1] ww = np.ascontiguousarray(w, dtype=np.float64)
    cdef long m, b, l
    cdef double w0, t0, wn
    with nogil:
        for m in range(br.shape[0]):
            b = br[m]
            l = li[m]
            w0 = <double>wt[b, l]
            t0 = <double>ts[b, l]
            wn = w0 + ww[m]
            ts[b, l] = <float>((w0 * t0 + ww[m] * dd[m]) / wn)
            wt[b, l] = <float>(wn)


# ---------------------------------------------------------------------------
# Marching cubes


def march_blocks(grid_t, grid_w, keys, double voxel_size, double iso_weight_min):
    """See fallback.march_blocks; identical outputs and ordering."""
    cdef const float[:, :, :, ::1] gt = np.ascontiguousarray(grid_t, dtype=np.float32)
    cdef const float[:, :, :, ::1] gw = np.ascontiguousarray(grid_w, dtype=np.float32)
    cdef const long[:, ::1] kk = np.ascontiguousarray(keys, dtype=np.int64)
    cdef long nb = gt.shape[0]
    if nb == 0:
        return (np.empty((0, 3, 4), dtype=np.int32), np.empty((0, 3, 3)))

    # pass 1: count triangles
    cdef long b, i, j, k, c, case, total = 0
    cdef int ok
    cdef float v
    with nogil:
        for b in range(nb):
            for i in range(8):
                for j in range(8):
                    for k in range(8):
                        ok = 1
                        case = 0
                        for c in range(8):
                            if gw[b, i + C_CORNERS[c, 0], j + C_CORNERS[c, 1],
                                  k + C_CORNERS[c, 2]] < iso_weight_min:
                                ok = 0
                                break
                            if gt[b, i + C_CORNERS[c, 0], j + C_CORNERS[c, 1],
                                  k + C_CORNERS[c, 2]] < 0:
                                case |= 1 << c
                        if ok:
                            total += C_TRI_COUNT[case]

    refs = np.empty((total, 3, 4), dtype=np.int32)
    pos = np.empty((total, 3, 3), dtype=np.float64)
    cdef int[:, :, ::1] refs_v = refs
    cdef double[:, :, ::1] pos_v = pos
    cdef long t = 0, slot, corner, e, axis
    cdef int order[3]
    order[0] = 0
    order[1] = 2
    order[2] = 1  # winding flip: normals toward positive tsdf
    cdef double vals[8]
    cdef double d0, d1, tt
    cdef long gx, gy, gz
    with nogil:
        for b in range(nb):
            for i in range(8):
                for j in range(8):
                    for k in range(8):
                        ok = 1
                        case = 0
                        for c in range(8):
                            if gw[b, i + C_CORNERS[c, 0], j + C_CORNERS[c, 1],
                                  k + C_CORNERS[c, 2]] < iso_weight_min:
                                ok = 0
                                break
                        if not ok:
                            continue
                        for c in range(8):
                            vals[c] = <double>gt[b, i + C_CORNERS[c, 0],
                                                 j + C_CORNERS[c, 1],
                                                 k + C_CORNERS[c, 2]]
                            if vals[c] < 0:
                                case |= 1 << c
                        for slot in range(C_TRI_COUNT[case]):
                            for corner in range(3):
                                e = C_TTABLE[case, slot * 3 + order[corner]]
                                axis = C_ANCHORS[e, 3]
                                gx = kk[b, 0] * 8 + i + C_ANCHORS[e, 0]
                                gy = kk[b, 1] * 8 + j + C_ANCHORS[e, 1]
                                gz = kk[b, 2] * 8 + k + C_ANCHORS[e, 2]
                                refs_v[t, corner, 0] = <int>gx
                                refs_v[t, corner, 1] = <int>gy
                                refs_v[t, corner, 2] = <int>gz
                                refs_v[t, corner, 3] = <int>axis
                                d0 = vals[C_ECORN[e, 0]]
                                d1 = vals[C_ECORN[e, 1]]
                                tt = d0 / (d0 - d1)
                                pos_v[t, corner, 0] = (gx + 0.5) * voxel_size
                                pos_v[t, corner, 1] = (gy + 0.5) * voxel_size
                                pos_v[t, corner, 2] = (gz + 0.5) * voxel_size
                                pos_v[t, corner, axis] = \
                                    (<double>(gx if axis == 0 else
                                              (gy if axis == 1 else gz))
                                     + 0.5 + tt) * voxel_size
                            t += 1
    return refs, pos


# ---------------------------------------------------------------------------
# BVH ray queries


cdef inline bint _aabb_hit(const double[:, ::1] bmin, const double[:, ::1] bmax,
                           long node, double ox, double oy, double oz,
                           double ix, double iy, double iz,
                           double t_lo, double t_hi) noexcept nogil:
    cdef double near = -INFINITY, far = INFINITY
    cdef double t1, t2, lo, hi
    cdef bint any_valid = 0
    cdef int axis
    cdef double o, inv, mn, mx
    for axis in range(3):
        if axis == 0:
            o = ox; inv = ix
        elif axis == 1:
            o = oy; inv = iy
        else:
            o = oz; inv = iz
        mn = bmin[node, axis]
        mx = bmax[node, axis]
        t1 = (mn - o) * inv
        t2 = (mx - o) * inv
        if isnan(t1) or isnan(t2):
            continue  # numpy's nanmax/nanmin skip NaN lanes
        any_valid = 1
        lo = t1 if t1 < t2 else t2
        hi = t1 if t1 > t2 else t2
        if lo > near:
            near = lo
        if hi < far:
            far = hi
    if not any_valid:
        return 0
    return near <= far and far >= t_lo and near <= t_hi


cdef inline double _tri_hit(const double[:, ::1] v0, const double[:, ::1] e1,
                            const double[:, ::1] e2, long f,
                            double ox, double oy, double oz,
                            double dx, double dy, double dz) noexcept nogil:
    cdef double hx = dy * e2[f, 2] - dz * e2[f, 1]
    cdef double hy = dz * e2[f, 0] - dx * e2[f, 2]
    cdef double hz = dx * e2[f, 1] - dy * e2[f, 0]
    cdef double a = e1[f, 0] * hx + e1[f, 1] * hy + e1[f, 2] * hz
    if a < DET_EPS and a > -DET_EPS:
        return INFINITY
    cdef double fi = 1.0 / a
    cdef double sx = ox - v0[f, 0], sy = oy - v0[f, 1], sz = oz - v0[f, 2]
    cdef double u = fi * (sx * hx + sy * hy + sz * hz)
    if u < 0 or u > 1:
        return INFINITY
    cdef double qx = sy * e1[f, 2] - sz * e1[f, 1]
    cdef double qy = sz * e1[f, 0] - sx * e1[f, 2]
    cdef double qz = sx * e1[f, 1] - sy * e1[f, 0]
    cdef double v = fi * (qx * dx + qy * dy + qz * dz)
    if v < 0 or u + v > 1:
        return INFINITY
    return fi * (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz)


def ray_query_all(origins, dirs, t_max, v0, e1, e2, bvh):
    """All hits with t in (1e-9, t_max]; see fallback.ray_query_all."""
    cdef const double[:, ::1] oo = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] DD = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[::1] tm = np.ascontiguousarray(
        np.asarray(t_max, dtype=np.float64).reshape(-1))
    cdef const double[:, ::1] tv0 = np.ascontiguousarray(v0, dtype=np.float64)
    cdef const double[:, ::1] te1 = np.ascontiguousarray(e1, dtype=np.float64)
    cdef const double[:, ::1] te2 = np.ascontiguousarray(e2, dtype=np.float64)
    bmin_a, bmax_a, left_a, right_a, start_a, count_a, order_a = bvh
    cdef const double[:, ::1] bmin = np.ascontiguousarray(bmin_a, dtype=np.float64)
    cdef const double[:, ::1] bmax = np.ascontiguousarray(bmax_a, dtype=np.float64)
    cdef const int[::1] left = np.ascontiguousarray(left_a, dtype=np.int32)
    cdef const int[::1] right = np.ascontiguousarray(right_a, dtype=np.int32)
    cdef const int[::1] start = np.ascontiguousarray(start_a, dtype=np.int32)
    cdef const int[::1] count = np.ascontiguousarray(count_a, dtype=np.int32)
    cdef const int[::1] order = np.ascontiguousarray(order_a, dtype=np.int32)

    out_r, out_f, out_t = [], [], []
    cdef long nr = oo.shape[0]
    cdef long r, node, sp, kk, f
    cdef double ox, oy, oz, dx, dy, dz, ix, iy, iz, th, t
    cdef int stack[160]
    # per-ray hit buffers (worst case: all faces)
    hit_f = np.empty(tv0.shape[0], dtype=np.int64)
    hit_t = np.empty(tv0.shape[0], dtype=np.float64)
    cdef long[::1] hf = hit_f
    cdef double[::1] ht = hit_t
    cdef long nh
    for r in range(nr):
        ox = oo[r, 0]; oy = oo[r, 1]; oz = oo[r, 2]
        dx = DD[r, 0]; dy = DD[r, 1]; dz = DD[r, 2]
        th = tm[r]
        nh = 0
        with nogil:
            ix = 1.0 / dx; iy = 1.0 / dy; iz = 1.0 / dz
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if not _aabb_hit(bmin, bmax, node, ox, oy, oz, ix, iy, iz,
                                 T_MIN, th):
                    continue
                if count[node] > 0:
                    for kk in range(start[node], start[node] + count[node]):
                        f = order[kk]
                        t = _tri_hit(tv0, te1, te2, f, ox, oy, oz, dx, dy, dz)
                        if isfinite(t) and t > T_MIN and t <= th:
                            hf[nh] = f
                            ht[nh] = t
                            nh += 1
                else:
                    stack[sp] = right[node]
                    sp += 1
                    stack[sp] = left[node]
                    sp += 1
        if nh:
            out_r.append(np.full(nh, r, dtype=np.int64))
            out_f.append(hit_f[:nh].copy())
            out_t.append(hit_t[:nh].copy())
    if not out_r:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64),
                np.empty(0))
    return np.concatenate(out_r), np.concatenate(out_f), np.concatenate(out_t)


def ray_any_closer(origins, dirs, t_limit, exclude, v0, e1, e2, bvh):
    """Occlusion test; see fallback.ray_any_closer."""
    cdef const double[:, ::1] oo = np.ascontiguousarray(origins, dtype=np.float64)
    cdef const double[:, ::1] DD = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef const double[::1] tl = np.ascontiguousarray(
        np.asarray(t_limit, dtype=np.float64).reshape(-1))
    cdef const long[::1] ex = np.ascontiguousarray(
        np.asarray(exclude, dtype=np.int64).reshape(-1))
    cdef const double[:, ::1] tv0 = np.ascontiguousarray(v0, dtype=np.float64)
    cdef const double[:, ::1] te1 = np.ascontiguousarray(e1, dtype=np.float64)
    cdef const double[:, ::1] te2 = np.ascontiguousarray(e2, dtype=np.float64)
    bmin_a, bmax_a, left_a, right_a, start_a, count_a, order_a = bvh
    cdef const double[:, ::1] bmin = np.ascontiguousarray(bmin_a, dtype=np.float64)
    cdef const double[:, ::1] bmax = np.ascontiguousarray(bmax_a, dtype=np.float64)
    cdef const int[::1] left = np.ascontiguousarray(left_a, dtype=np.int32)
    cdef const int[::1] right = np.ascontiguousarray(right_a, dtype=np.int32)
    cdef const int[::1] start = np.ascontiguousarray(start_a, dtype=np.int32)
    cdef const int[::1] count = np.ascontiguousarray(count_a, dtype=np.int32)
    cdef const int[::1] order = np.ascontiguousarray(order_a, dtype=np.int32)

    blocked = np.zeros(oo.shape[0], dtype=np.uint8)
    cdef unsigned char[::1] bl = blocked
    cdef long nr = oo.shape[0]
    cdef long r, node, sp, kk, f
    cdef double ox, oy, oz, dx, dy, dz, ix, iy, iz, th, t
    cdef int stack[160]
    with nogil:
        for r in range(nr):
            ox = oo[r, 0]; oy = oo[r, 1]; oz = oo[r, 2]
            dx = DD[r, 0]; dy = DD[r, 1]; dz = DD[r, 2]
            th = tl[r]
            ix = 1.0 / dx; iy = 1.0 / dy; iz = 1.0 / dz
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0 and not bl[r]:
                sp -= 1
                node = stack[sp]
                if not _aabb_hit(bmin, bmax, node, ox, oy, oz, ix, iy, iz,
                                 T_MIN, th):
                    continue
                if count[node] > 0:
                    for kk in range(start[node], start[node] + count[node]):
                        f = order[kk]
                        if f == ex[r]:
                            continue
                        t = _tri_hit(tv0, te1, te2, f, ox, oy, oz, dx, dy, dz)
                        if isfinite(t) and t > T_MIN and t < th:
                            bl[r] = 1
                            break
                else:
                    stack[sp] = right[node]
                    sp += 1
                    stack[sp] = left[node]
                    sp += 1
    return blocked.astype(bool)


# ---------------------------------------------------------------------------
# Triangle rasterization sums


def face_gradient_sums(uv, image):
    """See fallback.face_gradient_sums; identical sampling decisions."""
    cdef const double[:, :, ::1] tri = np.ascontiguousarray(
        np.asarray(uv, dtype=np.float64).reshape(-1, 3, 2))
    cdef const double[:, ::1] img = np.ascontiguousarray(image, dtype=np.float64)
    cdef long h = img.shape[0], w = img.shape[1]
    cdef long p, n = tri.shape[0]
    sums = np.zeros(n, dtype=np.float64)
    counts = np.zeros(n, dtype=np.int64)
    cdef double[::1] sums_v = sums
    cdef long[::1] counts_v = counts
    cdef double ax, ay, bx, by, cx, cy, w0, w1, w2, total, mu, mv
    cdef long x0, x1, y0, y1, gx, gy, cnt, px, py
    cdef double mnx, mxx, mny, mxy
    cdef bint neg, ppos
    with nogil:
        for p in range(n):
            ax = tri[p, 0, 0]; ay = tri[p, 0, 1]
            bx = tri[p, 1, 0]; by = tri[p, 1, 1]
            cx = tri[p, 2, 0]; cy = tri[p, 2, 1]
            mnx = ax
            if bx < mnx: mnx = bx
            if cx < mnx: mnx = cx
            mxx = ax
            if bx > mxx: mxx = bx
            if cx > mxx: mxx = cx
            mny = ay
            if by < mny: mny = by
            if cy < mny: mny = cy
            mxy = ay
            if by > mxy: mxy = by
            if cy > mxy: mxy = cy
            x0 = <long>ceil(mnx)
            if x0 < 0: x0 = 0
            x1 = <long>floor(mxx)
            if x1 > w - 1: x1 = w - 1
            y0 = <long>ceil(mny)
            if y0 < 0: y0 = 0
            y1 = <long>floor(mxy)
            if y1 > h - 1: y1 = h - 1
            total = 0.0
            cnt = 0
            for gy in range(y0, y1 + 1):
                for gx in range(x0, x1 + 1):
                    w0 = (cx - bx) * (gy - by) - (cy - by) * (gx - bx)
                    w1 = (ax - cx) * (gy - cy) - (ay - cy) * (gx - cx)
                    w2 = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
                    ppos = w0 >= 0 and w1 >= 0 and w2 >= 0
                    neg = w0 <= 0 and w1 <= 0 and w2 <= 0
                    if ppos or neg:
                        total += img[gy, gx]
                        cnt += 1
            if cnt == 0:
                mu = (ax + bx + cx) / 3.0
                mv = (ay + by + cy) / 3.0
                px = <long>floor(mu + 0.5)
                if px < 0: px = 0
                if px > w - 1: px = w - 1
                py = <long>floor(mv + 0.5)
                if py < 0: py = 0
                if py > h - 1: py = h - 1
                total = img[py, px]
            sums_v[p] = total
            counts_v[p] = cnt
    return sums, counts
