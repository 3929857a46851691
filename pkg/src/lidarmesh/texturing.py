"""Mesh texturing: best-view selection, color correction, seam-free atlas.

Stages, in pipeline order:

1. vignetting_correct  -- radial polynomial gain on every input frame.
2. photo_consistency_filter -- per face, drop views whose mean face color is
   a Mahalanobis outlier in HSV (occlusions, moving objects).
3. select_views -- one frame per face via the MRF: unary is the negated
   gradient-magnitude sum over the face's projected pixels (sharp, close
   views win), Potts smoothness favors contiguous same-frame charts.
4. seam_level -- per (vertex, chart) additive color corrections from a
   sparse least squares: seam terms pull both sides of every chart boundary
   together, a lam-weighted term keeps corrections small and smooth inside
   charts. Corrections are interpolated barycentrically at bake time.
5. bake_atlas -- charts packed into 4096x4096 pages, sampled bilinearly
   from the corrected source frames plus interpolated corrections.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import lsqr

from . import _kernels
from .core import CameraFrame, ImageBuffer, project_points
from .mesher import FaceAdjacency, TriangleMesh
from .mrf import MRFProblem, solve
from .visibility import VisibilityTable

__all__ = [
    "VignettingModel", "vignetting_correct", "face_quality_sums",
    "photo_consistency_filter", "select_views", "seam_level", "bake_atlas",
    "SeamLevelResult", "TextureAtlas", "AtlasOverflowError", "build_charts",
    "NONE_FACE",
]

NONE_FACE = -1  # assignment value for faces visible in no frame


# ---------------------------------------------------------------------------
# Vignetting


@dataclass(frozen=True)
class VignettingModel:
    """Radial gain g(r) = 1 + a r^2 + b r^4 + c r^6 with r normalized so the
    image corners sit at r = 1 (center defaults to the pixel-grid middle)."""

    a: float
    b: float = 0.0
    c: float = 0.0

    def __post_init__(self):
        r = np.linspace(0.0, 1.0, 512)
        if (self.gain(r) <= 0).any():
            raise ValueError("vignetting gain must stay positive on [0, 1]")

    def gain(self, r):
        r2 = np.square(r)
        return 1.0 + self.a * r2 + self.b * r2 * r2 + self.c * r2 * r2 * r2

    def radius_map(self, height: int, width: int) -> np.ndarray:
        cu = (width - 1) / 2.0
        cv = (height - 1) / 2.0
        u = np.arange(width) - cu
        v = np.arange(height) - cv
        return np.sqrt(u[None, :] ** 2 + v[:, None] ** 2) / np.sqrt(cu * cu + cv * cv)


def vignetting_correct(image: ImageBuffer, model: VignettingModel) -> ImageBuffer:
    """Multiply each pixel by g(r); uint8 output saturates at 255."""
    data = image.data
    g = model.gain(model.radius_map(image.height, image.width))[:, :, None]
    out = data.astype(np.float64) * g
    if data.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    else:
        out = np.clip(out, 0.0, 255.0)
    return ImageBuffer(out)


def apply_synthetic_vignette(image: ImageBuffer, model: VignettingModel) -> ImageBuffer:
    """Inverse of vignetting_correct (divides by the gain); used by the
    synthetic benchmark to fabricate vignetted inputs."""
    data = image.data
    g = model.gain(model.radius_map(image.height, image.width))[:, :, None]
    out = data.astype(np.float64) / g
    if data.dtype == np.uint8:
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    return ImageBuffer(out)


# ---------------------------------------------------------------------------
# Shared image helpers


def luma(data: np.ndarray) -> np.ndarray:
    d = data.astype(np.float64)
    if d.shape[2] == 1:
        return d[:, :, 0]
    return 0.299 * d[:, :, 0] + 0.587 * d[:, :, 1] + 0.114 * d[:, :, 2]


def gradient_magnitude(data: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the grayscale image."""
    g = luma(data)
    gx = ndimage.sobel(g, axis=1, mode="nearest")
    gy = ndimage.sobel(g, axis=0, mode="nearest")
    return np.hypot(gx, gy)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB [0,255] -> HSV in [0,1]^3."""
    x = rgb.astype(np.float64) / 255.0
    mx = x.max(axis=-1)
    mn = x.min(axis=-1)
    diff = mx - mn
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(
            diff == 0, 0.0,
            np.where(mx == r, ((g - b) / diff) % 6,
                     np.where(mx == g, (b - r) / diff + 2, (r - g) / diff + 4)))
        s = np.where(mx == 0, 0.0, diff / np.where(mx == 0, 1.0, mx))
    return np.stack([h / 6.0, s, mx], axis=-1)


def bilinear_sample(data: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample (h, w, c) image at continuous pixel coords, clamped borders."""
    h, w = data.shape[:2]
    u = np.clip(u, 0, w - 1)
    v = np.clip(v, 0, h - 1)
    u0 = np.floor(u).astype(np.int64)
    v0 = np.floor(v).astype(np.int64)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[..., None]
    fv = (v - v0)[..., None]
    d = data.astype(np.float64)
    return ((d[v0, u0] * (1 - fu) + d[v0, u1] * fu) * (1 - fv)
            + (d[v1, u0] * (1 - fu) + d[v1, u1] * fu) * fv)


def _project_face_uv(mesh: TriangleMesh, faces: np.ndarray, cam: CameraFrame):
    uv, ok = project_points(cam, mesh.vertices)
    tri_uv = uv[mesh.faces[faces]]
    return tri_uv, ok[mesh.faces[faces]].all(axis=1)


# ---------------------------------------------------------------------------
# View quality (gradient-magnitude sums)


def face_quality_sums(mesh: TriangleMesh, visibility: VisibilityTable,
                      frames: dict) -> np.ndarray:
    """Per visibility row: sum of the Sobel gradient magnitude over the
    face's rasterized projection in that row's frame (sub-pixel faces fall
    back to the nearest pixel)."""
    quality = np.zeros(len(visibility.face_ids))
    for fid, cam in frames.items():
        rows = np.nonzero(visibility.frame_ids == fid)[0]
        if len(rows) == 0:
            continue
        grad = gradient_magnitude(cam.image.data)
        tri_uv, ok = _project_face_uv(mesh, visibility.face_ids[rows], cam)
        sums, _ = _kernels.face_gradient_sums(tri_uv, grad)
        quality[rows] = np.where(ok, sums, 0.0)
    return quality


def face_mean_colors(mesh: TriangleMesh, visibility: VisibilityTable,
                     frames: dict) -> np.ndarray:
    """Per visibility row: mean RGB over the face's projected pixels."""
    colors = np.zeros((len(visibility.face_ids), 3))
    for fid, cam in frames.items():
        rows = np.nonzero(visibility.frame_ids == fid)[0]
        if len(rows) == 0:
            continue
        tri_uv, _ = _project_face_uv(mesh, visibility.face_ids[rows], cam)
        data = cam.image.data.astype(np.float64)
        acc = np.zeros((len(rows), 3))
        counts = None
        for ch in range(3):
            sums, cnt = _kernels.face_gradient_sums(tri_uv, data[:, :, ch])
            acc[:, ch] = sums
            counts = cnt
        denom = np.maximum(counts, 1)[:, None]
        colors[rows] = acc / denom  # count 0 rows hold a single-pixel sample
    return colors


# ---------------------------------------------------------------------------
# Photo consistency


def photo_consistency_filter(view_colors_rgb: np.ndarray, frame_ids: np.ndarray,
                             tau2: float = 9.0, keep_fraction: float = 0.3):
    """Indices of views that survive iterative Mahalanobis screening in HSV.

    Views whose mean face color strays from the consensus (occluders, moving
    objects) are discarded. Each view is scored against the moments of the
    OTHER surviving views (leave-one-out); with shared moments a lone
    outlier can never exceed the (n-1)^2/n masking bound, which sits below
    tau2 = 9 for realistic view counts. A covariance floor of ~13 intensity
    levels keeps small-sample distances from flagging benign spread. Never
    drops below max(2, keep_fraction * V) survivors; faces with <= 2 views
    pass unfiltered.
    """
    v = len(view_colors_rgb)
    if v <= 2:
        return np.arange(v)
    hsv = rgb_to_hsv(np.asarray(view_colors_rgb, dtype=np.float64))
    # cylindrical embedding: hue is an angle, so distances use
    # (s cos 2*pi*h, s sin 2*pi*h, v) to avoid the wrap at h = 0
    ang = 2 * np.pi * hsv[:, 0]
    hsv = np.stack([hsv[:, 1] * np.cos(ang), hsv[:, 1] * np.sin(ang),
                    hsv[:, 2]], axis=1)
    floor = max(2, int(np.ceil(keep_fraction * v)))
    ridge = 0.05 ** 2 * np.eye(3)  # ~13/255 per axis
    alive = np.arange(v)
    while len(alive) > floor:
        x = hsv[alive]
        m2 = np.empty(len(alive))
        for k in range(len(alive)):
            rest = np.delete(x, k, axis=0)
            mu = rest.mean(axis=0)
            dev = rest - mu
            cov = dev.T @ dev / max(len(rest) - 1, 1)
            d = x[k] - mu
            m2[k] = d @ np.linalg.solve(cov + ridge, d)
        out = m2 > tau2
        if not out.any():
            break
        if len(alive) - int(out.sum()) >= floor:
            alive = alive[~out]
        else:
            # drop only the worst offenders down to the floor
            n_drop = len(alive) - floor
            order = np.lexsort((frame_ids[alive], -m2))
            drop = set(alive[order[:n_drop]].tolist())
            alive = np.array([a for a in alive if a not in drop])
            break
    return alive


# ---------------------------------------------------------------------------
# View selection


def select_views(mesh: TriangleMesh, adjacency: FaceAdjacency,
                 visibility: VisibilityTable, frames: dict,
                 lam_view: float = 10.0, quality: np.ndarray = None,
                 allowed_rows: np.ndarray = None) -> np.ndarray:
    """One frame id per face (NONE_FACE when invisible everywhere).

    quality defaults to face_quality_sums; allowed_rows optionally masks
    visibility rows (the photo-consistency filter's survivors).
    """
    if quality is None:
        quality = face_quality_sums(mesh, visibility, frames)
    row_ok = np.ones(len(visibility.face_ids), dtype=bool)
    if allowed_rows is not None:
        row_ok = allowed_rows

    candidates, unaries, node_of_face = [], [], np.full(mesh.n_faces, -1)
    for face in range(mesh.n_faces):
        rows = visibility.rows_of(face)
        ids = visibility.frame_ids[rows][row_ok[rows]]
        q = quality[rows][row_ok[rows]]
        if len(ids) == 0:
            continue
        node_of_face[face] = len(candidates)
        candidates.append(ids)
        unaries.append(-q)

    assignment = np.full(mesh.n_faces, NONE_FACE, dtype=np.int64)
    if not candidates:
        return assignment
    ea = node_of_face[adjacency.pairs[:, 0]] if len(adjacency.pairs) else np.empty(0, int)
    eb = node_of_face[adjacency.pairs[:, 1]] if len(adjacency.pairs) else np.empty(0, int)
    keep = (ea >= 0) & (eb >= 0)
    edges = np.stack([ea[keep], eb[keep]], axis=1)
    problem = MRFProblem(candidates, unaries, edges, lam_view)
    labels, _ = solve(problem)
    assignment[node_of_face >= 0] = labels
    return assignment


# ---------------------------------------------------------------------------
# Charts


def build_charts(mesh: TriangleMesh, adjacency: FaceAdjacency,
                 assignment: np.ndarray):
    """Connected components of same-frame faces.

    Returns (chart_of_face (F,) int64 with -1 for NONE faces, n_charts,
    chart_frame (C,) int64)."""
    textured = assignment != NONE_FACE
    pairs = adjacency.pairs
    if len(pairs):
        same = (assignment[pairs[:, 0]] == assignment[pairs[:, 1]]) \
            & textured[pairs[:, 0]] & textured[pairs[:, 1]]
        pairs = pairs[same]
    n = mesh.n_faces
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    ncomp, comp = connected_components(graph, directed=False)
    # keep only textured components, renumber densely in face order
    chart_of_face = np.full(n, -1, dtype=np.int64)
    remap = {}
    for face in range(n):
        if not textured[face]:
            continue
        c = comp[face]
        if c not in remap:
            remap[c] = len(remap)
        chart_of_face[face] = remap[c]
    n_charts = len(remap)
    chart_frame = np.full(n_charts, NONE_FACE, dtype=np.int64)
    for face in range(n):
        if chart_of_face[face] >= 0:
            chart_frame[chart_of_face[face]] = assignment[face]
    return chart_of_face, n_charts, chart_frame


# ---------------------------------------------------------------------------
# Seam leveling


@dataclass
class SeamLevelResult:
    """Additive corrections per (vertex, chart) instance."""

    vertex_ids: np.ndarray      # (I,)
    chart_ids: np.ndarray       # (I,)
    corrections: np.ndarray     # (I, 3)
    objective_before: np.ndarray  # (3,)
    objective_after: np.ndarray   # (3,)
    normal_residual: np.ndarray   # (3,) ||A^T (A g - b)||_inf per channel
    _lookup: dict = field(default_factory=dict, repr=False)

    def instance_index(self, vertex: int, chart: int) -> int:
        return self._lookup[(vertex, chart)]

    def correction_at(self, vertex: int, chart: int) -> np.ndarray:
        idx = self._lookup.get((vertex, chart))
        if idx is None:
            return np.zeros(3)
        return self.corrections[idx]


def _face_edges_with_adjacency(mesh, adjacency):
    """For each adjacency pair, the shared (u, v) vertex pair."""
    f = mesh.faces
    shared_u = np.empty(len(adjacency.pairs), dtype=np.int64)
    shared_v = np.empty(len(adjacency.pairs), dtype=np.int64)
    for k, (i, j) in enumerate(adjacency.pairs):
        common = np.intersect1d(f[i], f[j])
        shared_u[k], shared_v[k] = common[0], common[-1]
    return shared_u, shared_v


def _sample_edge_color(cam: CameraFrame, p0, p1, n_samples: int = 9):
    """Average color along the projected segment (bilinear samples)."""
    ts = np.linspace(0.0, 1.0, n_samples)
    pts = p0[None, :] * (1 - ts)[:, None] + p1[None, :] * ts[:, None]
    uv, ok = project_points(cam, pts)
    if not ok.any():
        return None
    samp = bilinear_sample(cam.image.data, uv[ok, 0], uv[ok, 1])
    return samp.mean(axis=0)


def seam_level(mesh: TriangleMesh, adjacency: FaceAdjacency,
               assignment: np.ndarray, frames: dict,
               lam_seam: float = 0.1) -> SeamLevelResult:
    """Least-squares additive corrections minimizing color jumps across
    chart seams while keeping corrections small and smooth inside charts.

    Solved per channel with LSQR to the minimum-norm solution, then shifted
    to zero mean per connected component (the objective only pins
    differences)."""
    if lam_seam <= 0:
        raise ValueError("lam_seam must be positive")
    chart_of_face, n_charts, chart_frame = build_charts(mesh, adjacency, assignment)

    # instances: unique (vertex, chart) of every textured face corner
    inst_v, inst_c = [], []
    for face in range(mesh.n_faces):
        c = chart_of_face[face]
        if c < 0:
            continue
        for vtx in mesh.faces[face]:
            inst_v.append(int(vtx))
            inst_c.append(int(c))
    if not inst_v:
        return SeamLevelResult(np.empty(0, np.int64), np.empty(0, np.int64),
                               np.zeros((0, 3)), np.zeros(3), np.zeros(3),
                               np.zeros(3))
    pairs_vc = np.unique(np.stack([inst_v, inst_c], axis=1), axis=0)
    lookup = {(int(v), int(c)): i for i, (v, c) in enumerate(pairs_vc)}
    n_inst = len(pairs_vc)

    su, sv = _face_edges_with_adjacency(mesh, adjacency)
    ca = chart_of_face[adjacency.pairs[:, 0]]
    cb = chart_of_face[adjacency.pairs[:, 1]]
    seam_sel = (ca >= 0) & (cb >= 0) & (ca != cb)

    # f samples: per (instance pair, seam edge) averaged colors on each side
    seam_rows = {}  # (inst_l, inst_r) -> [color_l - color_r samples]
    for k in np.nonzero(seam_sel)[0]:
        cl, cr = int(ca[k]), int(cb[k])
        cam_l = frames[int(chart_frame[cl])]
        cam_r = frames[int(chart_frame[cr])]
        p0 = mesh.vertices[su[k]]
        p1 = mesh.vertices[sv[k]]
        col_l = _sample_edge_color(cam_l, p0, p1)
        col_r = _sample_edge_color(cam_r, p0, p1)
        if col_l is None or col_r is None:
            continue
        for vtx in (int(su[k]), int(sv[k])):
            il = lookup[(vtx, cl)]
            ir = lookup[(vtx, cr)]
            key = (il, ir) if il < ir else (ir, il)
            diff = (col_l - col_r) if il < ir else (col_r - col_l)
            seam_rows.setdefault(key, []).append(diff)

    rows, cols, vals, rhs = [], [], [], []
    for (il, ir), diffs in sorted(seam_rows.items()):
        f_diff = np.mean(diffs, axis=0)  # f_l - f_r
        r = len(rhs)
        rows += [r, r]
        cols += [il, ir]
        vals += [1.0, -1.0]
        rhs.append(-f_diff)  # (f_l + g_l) - (f_r + g_r) = 0

    # regularization: same-chart instance pairs along every face edge of the
    # chart (pulls corrections smooth and small inside charts)
    reg_pairs = set()
    for face in range(mesh.n_faces):
        c = int(chart_of_face[face])
        if c < 0:
            continue
        va, vb, vc = (int(x) for x in mesh.faces[face])
        for u, w_ in ((va, vb), (vb, vc), (vc, va)):
            a = lookup.get((u, c))
            b = lookup.get((w_, c))
            if a is not None and b is not None and a != b:
                reg_pairs.add((min(a, b), max(a, b)))
    sq = np.sqrt(lam_seam)
    for a, b in sorted(reg_pairs):
        r = len(rhs)
        rows += [r, r]
        cols += [a, b]
        vals += [sq, -sq]
        rhs.append(np.zeros(3))

    rhs = np.asarray(rhs).reshape(-1, 3)
    a_mat = coo_matrix((vals, (rows, cols)), shape=(len(rhs), n_inst)).tocsr()

    g = np.zeros((n_inst, 3))
    for ch in range(3):
        if a_mat.nnz == 0:
            break
        g[:, ch] = lsqr(a_mat, rhs[:, ch], atol=1e-14, btol=1e-14,
                        iter_lim=20000)[0]

    # zero-mean per connected component of the instance graph
    inc = coo_matrix((np.ones(len(vals)), (rows, cols)), shape=(len(rhs), n_inst))
    touched = inc.T @ inc
    ncomp, comp = connected_components(touched, directed=False)
    for c in range(ncomp):
        sel = comp == c
        g[sel] -= g[sel].mean(axis=0)

    def objective(gv):
        e = np.zeros(3)
        for r, (il, ir) in enumerate(sorted(seam_rows.keys())):
            f_diff = np.mean(seam_rows[(il, ir)], axis=0)
            e += (f_diff + gv[il] - gv[ir]) ** 2
        for a, b in sorted(reg_pairs):
            e += lam_seam * (gv[a] - gv[b]) ** 2
        return e

    resid = a_mat.T @ (a_mat @ g - rhs)
    return SeamLevelResult(
        vertex_ids=pairs_vc[:, 0], chart_ids=pairs_vc[:, 1], corrections=g,
        objective_before=objective(np.zeros_like(g)),
        objective_after=objective(g),
        normal_residual=np.abs(resid).max(axis=0) if len(rhs) else np.zeros(3),
        _lookup=lookup)


# ---------------------------------------------------------------------------
# Atlas baking


class AtlasOverflowError(RuntimeError):
    """Charts exceed the configured page budget."""


@dataclass
class TextureAtlas:
    """Atlas pages with per-face UVs (top-left origin pixel coords are
    converted to OBJ's bottom-left convention at export)."""

    pages: list                 # list of (S, S, 3) uint8
    face_uv: np.ndarray         # (F, 3, 2) in [0, 1], relative to its page
    face_page: np.ndarray       # (F,) int64, -1 for NONE faces
    none_faces: np.ndarray      # (K,) int64
    page_size: int


def bake_atlas(mesh: TriangleMesh, adjacency: FaceAdjacency,
               assignment: np.ndarray, frames: dict,
               seams: SeamLevelResult = None, page_size: int = 4096,
               max_pages: int = 16, padding: int = 2,
               fallback_color=(128, 128, 128)) -> TextureAtlas:
    """Pack same-frame charts into atlas pages and bake corrected colors.

    Each chart is a 1:1 copy of its source-frame rectangle; every covered
    texel adds the barycentric interpolation of its face's vertex
    corrections. NONE faces map to a small uniform fallback chart.
    """
    chart_of_face, n_charts, chart_frame = build_charts(mesh, adjacency, assignment)
    none_faces = np.nonzero(assignment == NONE_FACE)[0]

    # chart source rectangles
    rects = []  # (chart, u0, v0, w, h)
    uv_cache = {}
    for c in range(n_charts):
        faces = np.nonzero(chart_of_face == c)[0]
        cam = frames[int(chart_frame[c])]
        tri_uv, _ = _project_face_uv(mesh, faces, cam)
        uv_cache[c] = (faces, tri_uv)
        u0 = int(np.floor(tri_uv[..., 0].min())) - padding
        v0 = int(np.floor(tri_uv[..., 1].min())) - padding
        u1 = int(np.ceil(tri_uv[..., 0].max())) + padding
        v1 = int(np.ceil(tri_uv[..., 1].max())) + padding
        w, h = u1 - u0 + 1, v1 - v0 + 1
        if w > page_size or h > page_size:
            raise AtlasOverflowError(f"chart {c} larger than a page")
        rects.append((c, u0, v0, w, h))

    # shelf packing, tallest first; ties by chart id for determinism
    order = sorted(range(n_charts), key=lambda c: (-rects[c][4], -rects[c][3], c))
    fb = 8 + 2 * padding  # fallback chart pixels
    placements = {}
    pages = []
    shelf_x = shelf_y = shelf_h = 0
    page = -1

    def new_page():
        nonlocal page, shelf_x, shelf_y, shelf_h
        page += 1
        if page >= max_pages:
            raise AtlasOverflowError(f"page budget of {max_pages} exceeded")
        pages.append(np.zeros((page_size, page_size, 3), dtype=np.uint8))
        shelf_x = shelf_y = shelf_h = 0

    new_page()
    # reserve the fallback chart at the top-left of page 0
    fallback_rect = (0, 0, 0, fb, fb)
    pages[0][:fb, :fb] = fallback_color
    shelf_x, shelf_h = fb, fb

    for c in order:
        _, u0, v0, w, h = rects[c]
        if shelf_x + w > page_size:
            shelf_y += shelf_h
            shelf_x, shelf_h = 0, 0
        if shelf_y + h > page_size:
            new_page()
        placements[c] = (page, shelf_x, shelf_y)
        shelf_x += w
        shelf_h = max(shelf_h, h)

    face_uv = np.zeros((mesh.n_faces, 3, 2))
    face_page = np.full(mesh.n_faces, -1, dtype=np.int64)

    for c in range(n_charts):
        pg, ax, ay = placements[c]
        _, u0, v0, w, h = rects[c]
        cam = frames[int(chart_frame[c])]
        faces, tri_uv = uv_cache[c]
        img = cam.image.data
        # 1:1 copy of the source rectangle (clamped at frame borders)
        us = np.arange(u0, u0 + w)
        vs = np.arange(v0, v0 + h)
        usc = np.clip(us, 0, cam.image.width - 1)
        vsc = np.clip(vs, 0, cam.image.height - 1)
        patch = img[np.ix_(vsc, usc)].astype(np.float64)

        if seams is not None:
            corr = np.zeros((h, w, 3))
            weight = np.zeros((h, w, 1))
            gx, gy = np.meshgrid(us, vs, indexing="xy")
            for fi, face in enumerate(faces):
                (axp, ayp), (bxp, byp), (cxp, cyp) = tri_uv[fi]
                x0 = max(int(np.ceil(min(axp, bxp, cxp))) - 1, u0)
                x1 = min(int(np.floor(max(axp, bxp, cxp))) + 1, u0 + w - 1)
                y0 = max(int(np.ceil(min(ayp, byp, cyp))) - 1, v0)
                y1 = min(int(np.floor(max(ayp, byp, cyp))) + 1, v0 + h - 1)
                if x1 < x0 or y1 < y0:
                    continue
                sx = slice(y0 - v0, y1 - v0 + 1)
                sy = slice(x0 - u0, x1 - u0 + 1)
                px = gx[sx, sy]
                py = gy[sx, sy]
                den = ((byp - cyp) * (axp - cxp) + (cxp - bxp) * (ayp - cyp))
                if abs(den) < 1e-12:
                    continue
                w0 = ((byp - cyp) * (px - cxp) + (cxp - bxp) * (py - cyp)) / den
                w1 = ((cyp - ayp) * (px - cxp) + (axp - cxp) * (py - cyp)) / den
                w2 = 1.0 - w0 - w1
                inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
                if not inside.any():
                    continue
                g0 = seams.correction_at(int(mesh.faces[face][0]), c)
                g1 = seams.correction_at(int(mesh.faces[face][1]), c)
                g2 = seams.correction_at(int(mesh.faces[face][2]), c)
                val = (w0[..., None] * g0 + w1[..., None] * g1 + w2[..., None] * g2)
                sel = inside & (weight[sx, sy, 0] == 0)
                corr[sx, sy][sel] = val[sel]
                weight[sx, sy, 0][sel] = 1.0
            patch = patch + corr
        baked = np.clip(np.rint(patch), 0, 255).astype(np.uint8)
        pages[pg][ay:ay + h, ax:ax + w] = baked

        # face UVs: source uv -> page pixel -> normalized
        rel = tri_uv - np.array([u0, v0])[None, None, :]
        face_uv[faces] = (rel + np.array([ax, ay])[None, None, :]) / page_size
        face_page[faces] = pg

    if len(none_faces):
        center = (fb / 2) / page_size
        face_uv[none_faces] = center
        face_page[none_faces] = 0
    return TextureAtlas(pages, face_uv, face_page, none_faces, page_size)


# ---------------------------------------------------------------------------
# Export


def export_textured_obj(base_path, mesh: TriangleMesh, atlas: TextureAtlas,
                        assignment: np.ndarray) -> list:
    """Write base.obj + base.mtl + base_page<N>.png + base_faces.json.

    Returns the written paths. The JSON sidecar maps every face to its
    chosen frame id (-1 for fallback-textured faces)."""
    import json
    from pathlib import Path

    from PIL import Image

    base = Path(base_path)
    obj_path = base.with_suffix(".obj")
    mtl_path = base.with_suffix(".mtl")
    written = [obj_path, mtl_path]

    with open(mtl_path, "w") as fh:
        for p in range(len(atlas.pages)):
            fh.write(f"newmtl page{p}\nKa 1 1 1\nKd 1 1 1\n"
                     f"map_Kd {base.name}_page{p}.png\n")
    for p, img in enumerate(atlas.pages):
        png = base.parent / f"{base.name}_page{p}.png"
        Image.fromarray(img).save(png)
        written.append(png)

    with open(obj_path, "w") as fh:
        fh.write(f"mtllib {mtl_path.name}\n")
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in range(mesh.n_faces):
            for k in range(3):
                u, vv = atlas.face_uv[face, k]
                fh.write(f"vt {u:.9g} {1.0 - vv:.9g}\n")
        by_page = np.argsort(atlas.face_page, kind="stable")
        current = None
        for face in by_page:
            pg = atlas.face_page[face]
            if pg != current:
                fh.write(f"usemtl page{max(pg, 0)}\n")
                current = pg
            a, b, c = mesh.faces[face] + 1
            t = 3 * face + 1
            fh.write(f"f {a}/{t} {b}/{t + 1} {c}/{t + 2}\n")

    sidecar = base.parent / f"{base.name}_faces.json"
    with open(sidecar, "w") as fh:
        json.dump({"face_to_frame": [int(x) for x in assignment]}, fh,
                  sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    written.append(sidecar)
    return written


@dataclass(frozen=True)
class TextureConfig:
    lam_view: float = 10.0
    lam_seam: float = 0.1
    vignetting: VignettingModel = VignettingModel(-0.3, 0.0, 0.0)
    consistency_tau2: float = 9.0
    page_size: int = 4096
    max_pages: int = 16


def texture_mesh(mesh: TriangleMesh, adjacency: FaceAdjacency,
                 visibility: VisibilityTable, frames: dict,
                 cfg: TextureConfig = TextureConfig()):
    """Full texturing pass: vignetting correction, photo-consistency
    filtering, view selection, seam leveling, atlas bake.

    Returns (atlas, assignment, seams, corrected frames)."""
    corrected = {fid: CameraFrame(c.fx, c.fy, c.cx, c.cy, c.pose,
                                  vignetting_correct(c.image, cfg.vignetting),
                                  c.frame_id)
                 for fid, c in frames.items()}

    colors = face_mean_colors(mesh, visibility, corrected)
    allowed = np.ones(len(visibility.face_ids), dtype=bool)
    for face in range(mesh.n_faces):
        rows = visibility.rows_of(face)
        ids = visibility.frame_ids[rows]
        if len(ids) == 0:
            continue
        keep = photo_consistency_filter(colors[rows], ids, cfg.consistency_tau2)
        mask = np.zeros(rows.stop - rows.start, dtype=bool)
        mask[keep] = True
        allowed[rows] = mask

    assignment = select_views(mesh, adjacency, visibility, corrected,
                              cfg.lam_view, allowed_rows=allowed)
    seams = seam_level(mesh, adjacency, assignment, corrected, cfg.lam_seam)
    atlas = bake_atlas(mesh, adjacency, assignment, corrected, seams,
                       cfg.page_size, cfg.max_pages)
    return atlas, assignment, seams, corrected
