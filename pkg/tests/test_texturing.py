import numpy as np
import pytest

from lidarmesh.core import CameraFrame, ImageBuffer, RigidPose
from lidarmesh.mesher import FaceAdjacency, TriangleMesh, build_adjacency
from lidarmesh.texturing import (
    NONE_FACE,
    AtlasOverflowError,
    TextureConfig,
    VignettingModel,
    apply_synthetic_vignette,
    bake_atlas,
    build_charts,
    export_textured_obj,
    face_quality_sums,
    photo_consistency_filter,
    seam_level,
    select_views,
    texture_mesh,
    vignetting_correct,
)
from lidarmesh.visibility import VisibilityTable, build_bvh, compute_visibility
from test_visibility import look_at_pose, make_camera


def flat_camera(image, eye=(0, 0, 3.0), target=(0, 0, 0.0), fx=200.0, frame_id=0):
    return CameraFrame(fx, fx, image.width / 2 - 0.5, image.height / 2 - 0.5,
                       look_at_pose(eye, target), image, frame_id)


class TestVignetting:
    def test_center_pixel_unchanged(self):
        rng = np.random.default_rng(0)
        img = ImageBuffer(rng.integers(0, 255, size=(41, 61, 3)).astype(np.uint8))
        model = VignettingModel(-0.3, 0.05, 0.02)
        out = vignetting_correct(img, model)
        # center of the pixel grid: r = 0, gain = 1
        assert np.array_equal(out.data[20, 30], img.data[20, 30])

    def test_corner_gain(self):
        img = ImageBuffer(np.full((21, 31, 3), 100, dtype=np.uint8))
        a, b, c = -0.2, 0.05, 0.01
        out = vignetting_correct(img, VignettingModel(a, b, c))
        g = 1 + a + b + c
        assert out.data[0, 0, 0] == round(100 * g)
        assert out.data[-1, -1, 0] == round(100 * g)

    def test_identity_model_idempotent(self):
        rng = np.random.default_rng(1)
        img = ImageBuffer(rng.integers(0, 255, size=(31, 33, 3)).astype(np.uint8))
        out = vignetting_correct(img, VignettingModel(0.0, 0.0, 0.0))
        assert np.array_equal(out.data, img.data)

    def test_round_trip_within_one_level(self):
        rng = np.random.default_rng(2)
        img = ImageBuffer(rng.integers(10, 200, size=(120, 160, 3)).astype(np.uint8))
        model = VignettingModel(-0.3, 0.0, 0.0)
        vignetted = apply_synthetic_vignette(img, model)
        restored = vignetting_correct(vignetted, model)
        unsat = (vignetted.data > 0) & (vignetted.data < 255)
        diff = np.abs(restored.data.astype(int) - img.data.astype(int))
        frac = (diff[unsat] <= 1).mean()
        assert frac >= 0.999

    def test_rejects_nonpositive_gain(self):
        with pytest.raises(ValueError):
            VignettingModel(-1.5, 0.0, 0.0)


def two_face_square(z=0.0):
    verts = np.array([[-0.5, -0.5, z], [0.5, -0.5, z], [0.5, 0.5, z],
                      [-0.5, 0.5, z]])
    faces = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int32)
    return TriangleMesh(verts, faces, np.tile([0, 0, 1.0], (2, 1)))


class TestSelectViews:
    def make_scene(self, images):
        mesh = two_face_square()
        cams = [flat_camera(img, fx=50.0, frame_id=i)
                for i, img in enumerate(images)]
        frames = {c.frame_id: c for c in cams}
        vis = compute_visibility(mesh, build_bvh(mesh), cams)
        adj = build_adjacency(mesh)
        return mesh, adj, vis, frames

    def test_single_visible_frame_chosen(self):
        img = ImageBuffer(np.random.default_rng(0).integers(
            0, 255, size=(64, 64, 3)).astype(np.uint8))
        mesh, adj, vis, frames = self.make_scene([img])
        assignment = select_views(mesh, adj, vis, frames, lam_view=0.0)
        assert assignment.tolist() == [0, 0]

    def test_sharp_beats_uniform(self):
        rng = np.random.default_rng(3)
        sharp = ImageBuffer(rng.integers(0, 255, size=(64, 64, 3)).astype(np.uint8))
        gray = ImageBuffer(np.full((64, 64, 3), 77, dtype=np.uint8))
        mesh, adj, vis, frames = self.make_scene([gray, sharp])
        assignment = select_views(mesh, adj, vis, frames, lam_view=0.0)
        assert assignment.tolist() == [1, 1]

    def test_invisible_face_gets_none(self):
        img = ImageBuffer(np.zeros((64, 64, 3), dtype=np.uint8))
        mesh = two_face_square()
        cam = flat_camera(img, eye=(0, 0, -3.0))  # behind: normals face +z
        vis = compute_visibility(mesh, build_bvh(mesh), [cam])
        adj = build_adjacency(mesh)
        assignment = select_views(mesh, adj, vis, {0: cam}, lam_view=1.0)
        assert assignment.tolist() == [NONE_FACE, NONE_FACE]

    def test_smoothness_merges_labels_exhaustive(self):
        # 2 faces, 2 frames with hand-set qualities; high lambda must pick a
        # single frame; verified against the 4-labeling enumeration
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        quality = {(0, 0): 10.0, (0, 1): 9.0, (1, 0): 2.0, (1, 1): 9.5}
        face_ids = np.array([0, 0, 1, 1])
        frame_ids = np.array([0, 1, 0, 1])
        vis = VisibilityTable(face_ids, frame_ids, np.ones(4), np.ones(4),
                              np.array([0, 2, 4]))
        q = np.array([quality[(f, i)] for f, i in zip(face_ids, frame_ids)])
        lam = 100.0
        assignment = select_views(mesh, adj, vis, {}, lam, quality=q)
        best, best_e = None, np.inf
        for a in (0, 1):
            for b in (0, 1):
                e = -quality[(0, a)] - quality[(1, b)] + lam * (a != b)
                if e < best_e:
                    best, best_e = (a, b), e
        assert tuple(assignment.tolist()) == best == (1, 1)

    def test_lambda_zero_argmax_quality(self):
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        vis = VisibilityTable(np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1]),
                              np.ones(4), np.ones(4), np.array([0, 2, 4]))
        q = np.array([5.0, 7.0, 3.0, 1.0])
        assignment = select_views(mesh, adj, vis, {}, 0.0, quality=q)
        assert assignment.tolist() == [1, 0]


class TestPhotoConsistency:
    def test_identical_views_all_kept(self):
        colors = np.tile([200.0, 30.0, 30.0], (6, 1))
        kept = photo_consistency_filter(colors, np.arange(6))
        assert len(kept) == 6

    def test_nine_red_one_green_discards_green(self):
        rng = np.random.default_rng(4)
        reds = np.tile([200.0, 25.0, 25.0], (9, 1)) + rng.normal(0, 2, (9, 3))
        green = np.array([[30.0, 200.0, 30.0]])
        colors = np.vstack([reds, green])
        kept = photo_consistency_filter(colors, np.arange(10))
        assert 9 not in kept.tolist()
        assert len(kept) == 9

    def test_two_views_pass_unfiltered(self):
        colors = np.array([[255.0, 0, 0], [0, 255.0, 0]])
        kept = photo_consistency_filter(colors, np.arange(2))
        assert kept.tolist() == [0, 1]

    def test_never_below_floor(self):
        rng = np.random.default_rng(5)
        colors = rng.uniform(0, 255, size=(10, 3))  # wild spread
        kept = photo_consistency_filter(colors, np.arange(10))
        assert len(kept) >= max(2, int(np.ceil(0.3 * 10)))


def checkerboard(h, w, cell=8):
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    board = ((yy // cell + xx // cell) % 2) * 255
    return np.repeat(board[:, :, None], 3, axis=2).astype(np.uint8)


class TestSeamLevel:
    def two_chart_setup(self, color_left=100, color_right=120):
        # two faces sharing an edge, textured from two uniform frames
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        img_l = ImageBuffer(np.full((64, 64, 3), color_left, dtype=np.uint8))
        img_r = ImageBuffer(np.full((64, 64, 3), color_right, dtype=np.uint8))
        frames = {0: flat_camera(img_l, frame_id=0),
                  1: flat_camera(img_r, frame_id=1)}
        assignment = np.array([0, 1], dtype=np.int64)
        return mesh, adj, assignment, frames

    def test_equal_sides_zero_corrections(self):
        mesh, adj, assignment, frames = self.two_chart_setup(100, 100)
        res = seam_level(mesh, adj, assignment, frames, lam_seam=0.1)
        assert np.abs(res.corrections).max() < 1e-9

    def test_constant_offset_split_symmetrically(self):
        mesh, adj, assignment, frames = self.two_chart_setup(100, 120)
        res = seam_level(mesh, adj, assignment, frames, lam_seam=1e-9)
        chart_l = 0 if res.chart_ids[0] == 0 else 1
        for vtx in (0, 2):  # shared edge vertices
            gl = res.correction_at(vtx, 0)[0]
            gr = res.correction_at(vtx, 1)[0]
            assert abs(gl - gr) == pytest.approx(20.0, abs=1e-5)
            assert {round(gl), round(gr)} == {10, -10}
        # the regularization spreads each chart's shift to its free corner
        charts = {}
        for i, (v, c) in enumerate(zip(res.vertex_ids, res.chart_ids)):
            charts.setdefault(int(c), []).append(res.corrections[i, 0])
        vals = {c: np.mean(v) for c, v in charts.items()}
        lo, hi = min(vals.values()), max(vals.values())
        assert hi - lo == pytest.approx(20.0, abs=1e-4)

    def test_objective_not_worse_than_zero(self):
        mesh, adj, assignment, frames = self.two_chart_setup(90, 135)
        res = seam_level(mesh, adj, assignment, frames, lam_seam=0.1)
        assert (res.objective_after <= res.objective_before + 1e-12).all()

    def test_normal_equation_residual(self):
        mesh, adj, assignment, frames = self.two_chart_setup(64, 192)
        res = seam_level(mesh, adj, assignment, frames, lam_seam=0.5)
        assert res.normal_residual.max() <= 1e-8

    def test_random_system_against_dense_oracle(self):
        # random per-chart frames over a 4x4 grid mesh
        rng = np.random.default_rng(6)
        n = 5
        xs, ys = np.meshgrid(np.linspace(-0.5, 0.5, n), np.linspace(-0.5, 0.5, n))
        verts = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
        faces = []
        for i in range(n - 1):
            for j in range(n - 1):
                a = i * n + j
                faces.append([a, a + 1, a + n])
                faces.append([a + 1, a + n + 1, a + n])
        faces = np.array(faces, dtype=np.int32)
        mesh = TriangleMesh(verts, faces, np.tile([0, 0, 1.0], (len(faces), 1)))
        adj = build_adjacency(mesh)
        imgs = [ImageBuffer(rng.integers(40, 220, size=(80, 80, 3)).astype(np.uint8))
                for _ in range(3)]
        frames = {i: flat_camera(img, frame_id=i) for i, img in enumerate(imgs)}
        assignment = rng.integers(0, 3, size=len(faces)).astype(np.int64)
        res = seam_level(mesh, adj, assignment, frames, lam_seam=0.3)
        assert res.normal_residual.max() <= 1e-6
        assert (res.objective_after <= res.objective_before + 1e-9).all()


class TestBakeAtlas:
    def test_uniform_frame_uniform_chart(self):
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        img = ImageBuffer(np.full((64, 64, 3), 142, dtype=np.uint8))
        frames = {0: flat_camera(img, frame_id=0)}
        assignment = np.zeros(2, dtype=np.int64)
        atlas = bake_atlas(mesh, adj, assignment, frames, page_size=256)
        page = atlas.pages[0]
        # sample the baked face centers through the stored UVs
        uv = atlas.face_uv[0].mean(axis=0) * atlas.page_size
        val = page[int(uv[1]), int(uv[0])]
        assert np.all(np.abs(val.astype(int) - 142) <= 1)

    def test_checkerboard_ncc(self):
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        img = ImageBuffer(checkerboard(128, 128))
        cam = flat_camera(img, fx=100.0)
        frames = {0: cam}
        assignment = np.zeros(2, dtype=np.int64)
        atlas = bake_atlas(mesh, adj, assignment, frames, page_size=256)
        # compare the atlas content against the source rectangle it copied
        from lidarmesh.core import project_points
        uv, _ = project_points(cam, mesh.vertices)
        u0 = int(np.floor(uv[:, 0].min())) - 2
        v0 = int(np.floor(uv[:, 1].min())) - 2
        u1 = int(np.ceil(uv[:, 0].max())) + 2
        v1 = int(np.ceil(uv[:, 1].max())) + 2
        src = img.data[v0:v1 + 1, u0:u1 + 1].astype(np.float64)
        # chart was placed somewhere on page 0; find it via the face UV
        base_uv = atlas.face_uv[0, 0] * atlas.page_size  # vertex 0 position
        ax = int(round(base_uv[0] - (uv[0, 0] - u0)))
        ay = int(round(base_uv[1] - (uv[0, 1] - v0)))
        got = atlas.pages[0][ay:ay + src.shape[0], ax:ax + src.shape[1]] \
            .astype(np.float64)
        a = src.ravel() - src.mean()
        b = got.ravel() - got.mean()
        ncc = (a @ b) / np.sqrt((a @ a) * (b @ b))
        assert ncc >= 0.99

    def test_all_none_faces(self):
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        assignment = np.full(2, NONE_FACE, dtype=np.int64)
        atlas = bake_atlas(mesh, adj, assignment, {}, page_size=128)
        assert atlas.none_faces.tolist() == [0, 1]
        # fallback chart is mid-gray
        uv = atlas.face_uv[0, 0] * atlas.page_size
        assert atlas.pages[0][int(uv[1]), int(uv[0])].tolist() == [128, 128, 128]

    def test_page_overflow_raises(self):
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        img = ImageBuffer(np.zeros((512, 512, 3), dtype=np.uint8))
        frames = {0: flat_camera(img, fx=300.0, frame_id=0)}
        assignment = np.zeros(2, dtype=np.int64)
        with pytest.raises(AtlasOverflowError):
            bake_atlas(mesh, adj, assignment, frames, page_size=16, max_pages=1)


class TestEndToEnd:
    def test_texture_mesh_and_export(self, tmp_path):
        rng = np.random.default_rng(7)
        mesh = two_face_square()
        adj = build_adjacency(mesh)
        imgs = [ImageBuffer(rng.integers(0, 255, (96, 96, 3)).astype(np.uint8))
                for _ in range(2)]
        cams = [flat_camera(img, eye=(0.3 * i, 0, 3.0), frame_id=i)
                for i, img in enumerate(imgs)]
        vis = compute_visibility(mesh, build_bvh(mesh), cams)
        frames = {c.frame_id: c for c in cams}
        atlas, assignment, seams, corrected = texture_mesh(
            mesh, adj, vis, frames, TextureConfig(page_size=512))
        assert set(assignment.tolist()) <= {0, 1}
        paths = export_textured_obj(tmp_path / "model", mesh, atlas, assignment)
        for p in paths:
            assert p.exists()
        obj_text = (tmp_path / "model.obj").read_text()
        assert obj_text.count("\nf ") == 2
        assert "mtllib model.mtl" in obj_text
