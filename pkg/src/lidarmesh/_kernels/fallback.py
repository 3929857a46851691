"""Pure-numpy reference implementations of the hot kernels.

Semantics here define the contract: the compiled backend must reproduce
these results (bit-for-bit for the sequential TSDF update, set-exact for
ray queries). Loops over points/rays stay in Python with vectorized inner
work, so this backend is correct but slow on large inputs.
"""

from __future__ import annotations

import numpy as np

from ..mc_tables import CORNER_OFFSETS, EDGE_ANCHORS, EDGE_CORNERS, TRI_TABLE

_T_MIN = 1e-9  # rays ignore hits closer than this
_DET_EPS = 1e-12


# ---------------------------------------------------------------------------
# TSDF carving


def enumerate_updates(points, sensor, eps, back, voxel_size, r_perp):
    """Voxels updated by each measurement.

    A voxel is updated when its center lies within [-back[i], +eps[i]] of
    point i along the ray sensor->point (positive toward the sensor) and
    within `r_perp` of the ray axis. The reach behind the measurement is
    kept shorter than the front band so thin structures do not shine
    through their occluding edges. Returns (voxel int64 (M, 3), signed
    distance (M,), source point index (M,)), emitted per point in C order
    of the candidate grid.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    sensor = np.asarray(sensor, dtype=np.float64).reshape(3)
    eps = np.asarray(eps, dtype=np.float64).reshape(-1)
    back = np.asarray(back, dtype=np.float64).reshape(-1)
    out_vox, out_d, out_src = [], [], []
    r2 = r_perp * r_perp
    for i in range(len(pts)):
        p = pts[i]
        e = eps[i]
        eb = back[i]
        ray = p - sensor
        norm = np.linalg.norm(ray)
        if norm < 1e-12:
            continue
        direction = ray / norm
        a = p - eb * direction
        b = p + e * direction
        lo = np.floor((np.minimum(a, b) - r_perp) / voxel_size).astype(np.int64)
        hi = np.floor((np.maximum(a, b) + r_perp) / voxel_size).astype(np.int64)
        gx, gy, gz = np.meshgrid(
            np.arange(lo[0], hi[0] + 1),
            np.arange(lo[1], hi[1] + 1),
            np.arange(lo[2], hi[2] + 1),
            indexing="ij",
        )
        vox = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        centers = (vox + 0.5) * voxel_size
        q = p[None, :] - centers
        d = q @ direction
        perp2 = np.einsum("ij,ij->i", q, q) - d * d
        keep = (d >= -eb) & (d <= e) & (perp2 <= r2)
        if keep.any():
            out_vox.append(vox[keep])
            out_d.append(np.clip(d[keep], -eb, e))
            out_src.append(np.full(int(keep.sum()), i, dtype=np.int64))
    if not out_vox:
        return (np.empty((0, 3), dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64))
    return np.concatenate(out_vox), np.concatenate(out_d), np.concatenate(out_src)


def apply_updates(tsdf, weight, block_rows, local_idx, d, w):
    """Sequential weighted-average TSDF update, float32 state with float64
    per-step arithmetic (in-place)."""
    br = np.asarray(block_rows)
    li = np.asarray(local_idx)
    for m in range(len(br)):
        b = br[m]
        l = li[m]
        w0 = np.float64(weight[b, l])
        t0 = np.float64(tsdf[b, l])
        wn = w0 + w[m]
        tsdf[b, l] = np.float32((w0 * t0 + w[m] * d[m]) / wn)
        weight[b, l] = np.float32(wn)


# ---------------------------------------------------------------------------
# Marching cubes

_TRI_COUNT = np.count_nonzero(TRI_TABLE >= 0, axis=1) // 3


def march_blocks(grid_t, grid_w, keys, voxel_size, iso_weight_min):
    """Triangles of the zero isosurface over per-block 9x9x9 corner grids.

    grid index [b, x, y, z] holds voxel (keys[b]*8 + (x, y, z)); only cells
    whose 8 corners all carry weight >= iso_weight_min are meshed. Returns
    (edge_refs (T, 3, 4) int32 = global (x, y, z, axis) lattice edge ids,
    positions (T, 3, 3) float64), in C order of (block, cell, triangle).
    """
    grid_t = np.asarray(grid_t, dtype=np.float32)
    grid_w = np.asarray(grid_w, dtype=np.float32)
    keys = np.asarray(keys, dtype=np.int64)
    nb = len(keys)
    if nb == 0:
        return np.empty((0, 3, 4), dtype=np.int32), np.empty((0, 3, 3))

    # corner values for every cell: (B, 8, 8, 8, corner)
    vals = np.empty((nb, 8, 8, 8, 8), dtype=np.float32)
    wts = np.empty((nb, 8, 8, 8, 8), dtype=np.float32)
    for c, (ox, oy, oz) in enumerate(CORNER_OFFSETS):
        vals[..., c] = grid_t[:, ox:ox + 8, oy:oy + 8, oz:oz + 8]
        wts[..., c] = grid_w[:, ox:ox + 8, oy:oy + 8, oz:oz + 8]

    case = (vals < 0).astype(np.int32) @ (1 << np.arange(8, dtype=np.int32))
    gate = (wts >= iso_weight_min).all(axis=-1)
    ntri = np.where(gate, _TRI_COUNT[case], 0)

    flat_ntri = ntri.ravel()
    total = int(flat_ntri.sum())
    if total == 0:
        return np.empty((0, 3, 4), dtype=np.int32), np.empty((0, 3, 3))
    starts = np.concatenate([[0], np.cumsum(flat_ntri)[:-1]])

    active = np.nonzero(flat_ntri)[0]
    # cell coordinates and block of each active cell
    bidx = active // 512
    rem = active % 512
    cell = np.stack([rem // 64, (rem // 8) % 8, rem % 8], axis=1)
    acase = case.ravel()[active]
    acount = flat_ntri[active]

    # expand to one row per output triangle, preserving global order
    tri_slot = np.arange(total) - np.repeat(starts[active], acount)
    row_cell = np.repeat(np.arange(len(active)), acount)
    tri_edges = TRI_TABLE[acase[row_cell], :]  # (T, 16)
    e3 = tri_edges[np.arange(total)[:, None], (tri_slot * 3)[:, None] + np.arange(3)]
    e3 = e3[:, [0, 2, 1]]  # flip winding so normals point toward positive tsdf

    # global anchor voxel and axis per triangle corner
    base = keys[bidx[row_cell]] * 8 + cell[row_cell]  # (T, 3)
    anchors = EDGE_ANCHORS[e3]  # (T, 3, 4): offset xyz + axis
    refs = np.empty((total, 3, 4), dtype=np.int32)
    refs[..., :3] = base[:, None, :] + anchors[..., :3]
    refs[..., 3] = anchors[..., 3]

    # interpolate positions along each referenced lattice edge
    c0 = EDGE_CORNERS[e3, 0]
    c1 = EDGE_CORNERS[e3, 1]
    flat_cells = active[row_cell]
    v_cells = vals.reshape(-1, 8)[flat_cells]  # (T, 8)
    d0 = v_cells[np.arange(total)[:, None], c0].astype(np.float64)
    d1 = v_cells[np.arange(total)[:, None], c1].astype(np.float64)
    t = d0 / (d0 - d1)
    low = (refs[..., :3].astype(np.float64) + 0.5)
    axis_unit = np.zeros((total, 3, 3))
    np.put_along_axis(axis_unit, refs[..., 3][..., None].astype(np.int64), 1.0, axis=2)
    positions = (low + t[..., None] * axis_unit) * voxel_size
    return refs, positions


# ---------------------------------------------------------------------------
# BVH ray queries


def _ray_aabb(origin, inv_dir, bmin, bmax, t_lo, t_hi):
    """Conservative slab test of one ray against (K, 3) boxes."""
    with np.errstate(invalid="ignore"):
        t1 = (bmin - origin) * inv_dir
        t2 = (bmax - origin) * inv_dir
        near = np.nanmax(np.minimum(t1, t2), axis=1)
        far = np.nanmin(np.maximum(t1, t2), axis=1)
    return (near <= far) & (far >= t_lo) & (near <= t_hi)


def _moller_trumbore(origin, direction, v0, e1, e2):
    """Hit parameters of one ray against (K, 3) triangles; t = inf on miss."""
    h = np.cross(direction[None, :], e2)
    a = np.einsum("ij,ij->i", e1, h)
    s = origin[None, :] - v0
    with np.errstate(divide="ignore", invalid="ignore"):
        f = 1.0 / a
        u = f * np.einsum("ij,ij->i", s, h)
        q = np.cross(s, e1)
        v = f * (q @ direction)
        t = f * np.einsum("ij,ij->i", e2, q)
        ok = ((np.abs(a) > _DET_EPS) & (u >= 0) & (u <= 1) & (v >= 0)
              & (u + v <= 1))
    return np.where(ok, t, np.inf)


def _traverse(origin, direction, t_hi, bvh):
    """Leaf face candidates for one ray (indices into the face arrays)."""
    bmin, bmax, left, right, start, count, order = bvh
    with np.errstate(divide="ignore"):
        inv = 1.0 / direction
    hits = []
    stack = [0]
    while stack:
        node = stack.pop()
        if not _ray_aabb(origin, inv, bmin[node:node + 1], bmax[node:node + 1],
                         _T_MIN, t_hi)[0]:
            continue
        if count[node] > 0:
            hits.append(order[start[node]:start[node] + count[node]])
        else:
            stack.append(int(right[node]))
            stack.append(int(left[node]))
    if not hits:
        return np.empty(0, dtype=np.int32)
    return np.concatenate(hits)


def ray_query_all(origins, dirs, t_max, v0, e1, e2, bvh):
    """All ray/triangle intersections with t in (1e-9, t_max].

    Returns (ray index, face index, t) in traversal order per ray.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_max = np.asarray(t_max, dtype=np.float64).reshape(-1)
    out_r, out_f, out_t = [], [], []
    for r in range(len(origins)):
        cand = _traverse(origins[r], dirs[r], t_max[r], bvh)
        if len(cand) == 0:
            continue
        t = _moller_trumbore(origins[r], dirs[r], v0[cand], e1[cand], e2[cand])
        ok = np.isfinite(t) & (t > _T_MIN) & (t <= t_max[r])
        if ok.any():
            out_r.append(np.full(int(ok.sum()), r, dtype=np.int64))
            out_f.append(cand[ok].astype(np.int64))
            out_t.append(t[ok])
    if not out_r:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))
    return np.concatenate(out_r), np.concatenate(out_f), np.concatenate(out_t)


def ray_any_closer(origins, dirs, t_limit, exclude, v0, e1, e2, bvh):
    """True per ray when any face other than exclude[r] is hit with
    t in (1e-9, t_limit[r])."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_limit = np.asarray(t_limit, dtype=np.float64).reshape(-1)
    exclude = np.asarray(exclude, dtype=np.int64).reshape(-1)
    blocked = np.zeros(len(origins), dtype=bool)
    for r in range(len(origins)):
        cand = _traverse(origins[r], dirs[r], t_limit[r], bvh)
        if len(cand) == 0:
            continue
        cand = cand[cand != exclude[r]]
        if len(cand) == 0:
            continue
        t = _moller_trumbore(origins[r], dirs[r], v0[cand], e1[cand], e2[cand])
        blocked[r] = bool((np.isfinite(t) & (t > _T_MIN) & (t < t_limit[r])).any())
    return blocked


# ---------------------------------------------------------------------------
# Triangle rasterization sums


def face_gradient_sums(uv, image):
    """Sum image samples over each projected triangle's interior pixels.

    uv is (P, 3, 2) pixel coordinates; integer pixel centers sit at integer
    coordinates. Faces covering no pixel center fall back to the single
    pixel nearest their centroid (count stays 0 to mark this). Returns
    (sums (P,), counts (P,)).
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 3, 2)
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    sums = np.zeros(len(uv))
    counts = np.zeros(len(uv), dtype=np.int64)
    for p in range(len(uv)):
        (ax, ay), (bx, by), (cx, cy) = uv[p]
        x0 = max(int(np.ceil(min(ax, bx, cx))), 0)
        x1 = min(int(np.floor(max(ax, bx, cx))), w - 1)
        y0 = max(int(np.ceil(min(ay, by, cy))), 0)
        y1 = min(int(np.floor(max(ay, by, cy))), h - 1)
        total = 0.0
        n = 0
        if x1 >= x0 and y1 >= y0:
            gx, gy = np.meshgrid(np.arange(x0, x1 + 1), np.arange(y0, y1 + 1),
                                 indexing="xy")
            w0 = (cx - bx) * (gy - by) - (cy - by) * (gx - bx)
            w1 = (ax - cx) * (gy - cy) - (ay - cy) * (gx - cx)
            w2 = (bx - ax) * (gy - ay) - (by - ay) * (gx - ax)
            inside = ((w0 >= 0) & (w1 >= 0) & (w2 >= 0)) | \
                     ((w0 <= 0) & (w1 <= 0) & (w2 <= 0))
            n = int(inside.sum())
            if n:
                total = float(img[gy[inside], gx[inside]].sum())
        if n == 0:
            # sub-pixel face: nearest pixel to the centroid
            mu = (ax + bx + cx) / 3.0
            mv = (ay + by + cy) / 3.0
            px = min(max(int(np.floor(mu + 0.5)), 0), w - 1)
            py = min(max(int(np.floor(mv + 0.5)), 0), h - 1)
            total = float(img[py, px])
        sums[p] = total
        counts[p] = n
    return sums, counts
