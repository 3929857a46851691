import numpy as np
import pytest

from conftest import fill_analytic, make_volume, sphere_sdf
from lidarmesh.mesher import (
    EmptyVolumeError,
    FaceAdjacency,
    TriangleMesh,
    build_adjacency,
    extract_mesh,
    read_ply_points,
    write_ply,
    write_ply_points,
)


def trilinear_tsdf(vol, points):
    """Test-side trilinear sampler of the stored tsdf."""
    out = np.empty(len(points))
    for i, p in enumerate(points):
        g = p / vol.voxel_size - 0.5
        base = np.floor(g).astype(int)
        frac = g - base
        acc = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    v = base + [dx, dy, dz]
                    blk = vol.block(v // 8)
                    val = blk.tsdf[tuple(v % 8)]
                    w = ((frac[0] if dx else 1 - frac[0])
                         * (frac[1] if dy else 1 - frac[1])
                         * (frac[2] if dz else 1 - frac[2]))
                    acc += w * float(val)
        out[i] = acc
    return out


class TestExtractMesh:
    def test_sphere_oracle(self, sphere_mesh):
        mesh = sphere_mesh
        assert len(mesh.faces) > 1000
        # every vertex close to the analytic surface
        err = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.5)
        assert err.max() <= 0.05  # one voxel
        # watertight: each edge shared by exactly two faces
        f = mesh.faces.astype(int)
        e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        _, cnt = np.unique(e, axis=0, return_counts=True)
        assert (cnt == 2).all()
        # angular coverage: no holes bigger than a few degrees
        dirs = mesh.vertices / np.linalg.norm(mesh.vertices, axis=1, keepdims=True)
        lat = np.arcsin(np.clip(dirs[:, 2], -1, 1))
        lon = np.arctan2(dirs[:, 1], dirs[:, 0])
        hist, _, _ = np.histogram2d(lat, lon, bins=[8, 16],
                                    range=[[-np.pi / 2, np.pi / 2], [-np.pi, np.pi]])
        assert (hist > 0).all()

    def test_sphere_normals_outward(self, sphere_mesh):
        cen = sphere_mesh.face_centroids()
        out = cen / np.linalg.norm(cen, axis=1, keepdims=True)
        dots = np.einsum("ij,ij->i", sphere_mesh.face_normals, out)
        assert dots.min() > 0.9

    def test_plane_band_normals(self):
        vol = make_volume()
        fill_analytic(vol, lambda p: p[..., 2] - 0.1234, [-0.5] * 3, [0.5] * 3)
        mesh = extract_mesh(vol, iso_weight_min=0.5)
        assert len(mesh.faces) > 100
        cos = mesh.face_normals @ np.array([0, 0, 1.0])
        assert (cos > np.cos(np.deg2rad(5))).all()

    def test_empty_volume_raises(self):
        with pytest.raises(EmptyVolumeError):
            extract_mesh(make_volume())

    def test_vertices_on_interpolated_zero(self):
        vol = make_volume()
        fill_analytic(vol, sphere_sdf(0.4), [-0.7] * 3, [0.7] * 3)
        mesh = extract_mesh(vol, iso_weight_min=0.5)
        rng = np.random.default_rng(0)
        sel = rng.choice(len(mesh.vertices), 200, replace=False)
        vals = trilinear_tsdf(vol, mesh.vertices[sel])
        assert np.abs(vals).max() <= 1e-6 * vol.voxel_size

    def test_deterministic(self):
        vol = make_volume()
        fill_analytic(vol, sphere_sdf(0.3), [-0.5] * 3, [0.5] * 3)
        a = extract_mesh(vol, iso_weight_min=0.5)
        b = extract_mesh(vol, iso_weight_min=0.5)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)

    def test_weight_gate_suppresses_low_confidence(self):
        vol = make_volume()
        fill_analytic(vol, sphere_sdf(0.3), [-0.5] * 3, [0.5] * 3, weight=0.5)
        mesh = extract_mesh(vol, iso_weight_min=1.0)
        assert mesh.n_faces == 0
        assert extract_mesh(vol, iso_weight_min=0.4).n_faces > 0

    def test_no_degenerate_faces(self, sphere_mesh):
        areas = sphere_mesh.face_areas()
        assert (areas >= 1e-12).all()

    def test_chunking_invariant(self):
        vol = make_volume()
        fill_analytic(vol, sphere_sdf(0.35), [-0.6] * 3, [0.6] * 3)
        a = extract_mesh(vol, iso_weight_min=0.5, chunk_blocks=7)
        b = extract_mesh(vol, iso_weight_min=0.5, chunk_blocks=4096)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.faces, b.faces)


def brute_force_adjacency(faces):
    pairs = set()
    f = [set(face) for face in faces.tolist()]
    for i in range(len(f)):
        for j in range(i + 1, len(f)):
            if len(f[i] & f[j]) == 2:
                pairs.add((i, j))
    return pairs


class TestAdjacency:
    def test_two_triangles_one_pair(self):
        mesh = TriangleMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.0]]),
                            np.array([[0, 1, 2], [1, 3, 2]], dtype=np.int32),
                            np.tile([0, 0, 1.0], (2, 1)))
        adj = build_adjacency(mesh)
        assert adj.pairs.tolist() == [[0, 1]]

    def test_tetrahedron_six_pairs(self):
        verts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
        faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]], dtype=np.int32)
        mesh = TriangleMesh(verts, faces, np.tile([0, 0, 1.0], (4, 1)))
        adj = build_adjacency(mesh)
        assert len(adj.pairs) == 6

    def test_matches_brute_force_on_random_mesh(self, sphere_mesh):
        sub = TriangleMesh(sphere_mesh.vertices, sphere_mesh.faces[:400],
                           sphere_mesh.face_normals[:400])
        got = set(map(tuple, build_adjacency(sub).pairs.tolist()))
        assert got == brute_force_adjacency(sub.faces)

    def test_manifold_degree_at_most_three(self, sphere_mesh):
        adj = build_adjacency(sphere_mesh)
        deg = np.bincount(adj.pairs.ravel(), minlength=sphere_mesh.n_faces)
        assert deg.max() <= 3


class TestPlyIO:
    def test_points_roundtrip(self, tmp_path):
        pts = np.random.default_rng(1).normal(size=(100, 3))
        p = tmp_path / "pts.ply"
        write_ply_points(p, pts)
        back = read_ply_points(p)
        assert np.array_equal(back, pts)

    def test_mesh_ply_headers(self, tmp_path, sphere_mesh):
        for binary in (True, False):
            p = tmp_path / f"m{binary}.ply"
            write_ply(p, sphere_mesh, binary=binary)
            head = p.read_bytes()[:200].decode("ascii", "replace")
            assert head.startswith("ply")
            assert f"element vertex {len(sphere_mesh.vertices)}" in head

    def test_mesh_ply_deterministic(self, tmp_path, sphere_mesh):
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        colors = np.zeros((sphere_mesh.n_faces, 3), dtype=np.uint8)
        write_ply(a, sphere_mesh, face_colors=colors, face_classes=colors[:, 0])
        write_ply(b, sphere_mesh, face_colors=colors, face_classes=colors[:, 0])
        assert a.read_bytes() == b.read_bytes()
