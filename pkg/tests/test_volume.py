import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lidarmesh.volume import (
    AllocationLimitError,
    BlockStatistics,
    DegenerateStatisticsError,
    EmptyMergeError,
    TruncationConfig,
    TsdfVolume,
    adaptive_truncation,
    estimate_plane,
    measurement_weight,
    merge_statistics,
    statistics_of,
)


def batch_oracle(points):
    """Independent batch statistics via numpy's own mean/cov."""
    pts = np.asarray(points, dtype=np.float64)
    mean = pts.mean(axis=0)
    if len(pts) < 2:
        return len(pts), mean, np.zeros((3, 3))
    cov = np.cov(pts, rowvar=False, ddof=1)
    return len(pts), mean, cov


class TestMergeStatistics:
    def test_single_point(self):
        p0 = np.array([1.0, -2.0, 3.0])
        s = statistics_of(p0[None, :])
        assert s.n == 1
        assert np.array_equal(s.mean, p0)
        assert np.array_equal(s.covariance, np.zeros((3, 3)))

    def test_merge_with_empty_is_identity(self):
        s = statistics_of(np.random.default_rng(0).normal(size=(5, 3)))
        merged = merge_statistics(s, BlockStatistics.empty())
        assert merged.n == s.n
        assert np.array_equal(merged.mean, s.mean)
        assert np.array_equal(merged.covariance, s.covariance)

    def test_empty_merge_raises(self):
        with pytest.raises(EmptyMergeError):
            merge_statistics(BlockStatistics.empty(), BlockStatistics.empty())

    def test_hand_worked_union(self):
        p1 = np.array([[0, 0, 0], [2, 0, 0]], dtype=float)
        p2 = np.array([[0, 2, 0], [0, 4, 0]], dtype=float)
        m = merge_statistics(statistics_of(p1), statistics_of(p2))
        assert m.n == 4
        assert np.allclose(m.mean, [0.5, 1.5, 0.0])
        assert m.covariance[0, 0] == pytest.approx(1.0)
        assert m.covariance[1, 1] == pytest.approx(11.0 / 3.0)
        assert m.covariance[0, 1] == pytest.approx(-1.0)
        assert np.allclose(m.covariance[2], 0) and np.allclose(m.covariance[:, 2], 0)

    def test_commutative(self):
        rng = np.random.default_rng(1)
        a = statistics_of(rng.normal(size=(7, 3)))
        b = statistics_of(rng.normal(size=(13, 3)))
        ab = merge_statistics(a, b)
        ba = merge_statistics(b, a)
        assert np.allclose(ab.mean, ba.mean, rtol=1e-12)
        assert np.allclose(ab.covariance, ba.covariance, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_random_partition_matches_batch(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(rng.integers(10, 2000), 3)) * rng.uniform(0.1, 10)
        cuts = np.sort(rng.integers(0, len(pts), size=rng.integers(1, 8)))
        acc = BlockStatistics.empty()
        for chunk in np.split(pts, cuts):
            if len(chunk):
                acc = merge_statistics(acc, statistics_of(chunk))
        n, mean, cov = batch_oracle(pts)
        assert acc.n == n
        assert np.allclose(acc.mean, mean, rtol=1e-9, atol=1e-12)
        assert np.allclose(acc.covariance, cov, rtol=1e-9, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 200), st.integers(1, 200), st.integers(0, 2**32 - 1))
    def test_associative_property(self, n1, n2, seed):
        rng = np.random.default_rng(seed)
        a = statistics_of(rng.normal(size=(n1, 3)))
        b = statistics_of(rng.normal(size=(n2, 3)))
        c = statistics_of(rng.normal(size=(5, 3)))
        left = merge_statistics(merge_statistics(a, b), c)
        right = merge_statistics(a, merge_statistics(b, c))
        assert np.allclose(left.mean, right.mean, rtol=1e-9)
        assert np.allclose(left.covariance, right.covariance, rtol=1e-9, atol=1e-12)


class TestEstimatePlane:
    def test_plane_points_flatness_one(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100),
                               np.zeros(100)])
        est = estimate_plane(statistics_of(pts), np.array([0, 0, 5.0]))
        assert np.allclose(np.abs(est.normal), [0, 0, 1], atol=1e-9)
        assert est.normal[2] > 0
        assert est.flatness == pytest.approx(1.0)

    def test_sensor_side_flips_normal(self):
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(-1, 1, 100), rng.uniform(-1, 1, 100),
                               np.zeros(100)])
        est = estimate_plane(statistics_of(pts), np.array([0, 0, -5.0]))
        assert est.normal[2] < 0

    def test_isotropic_ball_flatness_near_zero(self):
        rng = np.random.default_rng(9)
        # uniform in a ball: rejection sample
        pts = rng.uniform(-1, 1, size=(20000, 3))
        pts = pts[np.linalg.norm(pts, axis=1) <= 1][:5000]
        est = estimate_plane(statistics_of(pts), np.array([0, 0, 10.0]))
        # eigen-decomposition oracle on the sampled covariance
        evals = np.linalg.eigvalsh(np.cov(pts, rowvar=False, ddof=1))
        assert est.flatness == pytest.approx(1 - evals[0] / evals[1], abs=1e-9)
        assert est.flatness < 0.1

    def test_too_few_points(self):
        with pytest.raises(DegenerateStatisticsError):
            estimate_plane(statistics_of(np.zeros((2, 3))), np.array([0, 0, 1.0]))

    def test_collinear_degenerate(self):
        pts = np.column_stack([np.linspace(0, 1, 50), np.zeros(50), np.zeros(50)])
        with pytest.raises(DegenerateStatisticsError):
            estimate_plane(statistics_of(pts), np.array([0, 0, 1.0]))

    def test_normal_points_toward_sensor_property(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            pts = rng.normal(size=(50, 3)) * [1, 1, 0.01]
            sensor = rng.normal(size=3) * 5
            stats = statistics_of(pts)
            est = estimate_plane(stats, sensor)
            assert est.normal @ (sensor - stats.mean) > 0
            assert np.linalg.norm(est.normal) == pytest.approx(1.0, abs=1e-9)


class TestAdaptiveTruncation:
    CFG = TruncationConfig(0.10, 0.30, k=64.0)

    def test_flat_and_n_equal_k_gives_max(self):
        assert adaptive_truncation(1.0, 64, self.CFG) == pytest.approx(0.30)

    def test_zero_flatness_gives_min(self):
        for n in (1, 5, 1000):
            assert adaptive_truncation(0.0, n, self.CFG) == pytest.approx(0.10)

    def test_suv_range_bounds(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            eps = adaptive_truncation(rng.uniform(0, 1), int(rng.integers(0, 10000)),
                                      self.CFG)
            assert 0.10 <= eps <= 0.30

    @settings(max_examples=60, deadline=None)
    @given(st.floats(0, 1), st.integers(1, 100000))
    def test_monotone_in_n_and_flatness(self, flat, n):
        eps = adaptive_truncation(flat, n, self.CFG)
        assert adaptive_truncation(flat, n + 1, self.CFG) <= eps
        assert adaptive_truncation(min(flat + 0.1, 1.0), n, self.CFG) >= eps

    def test_empty_block_gets_max(self):
        assert adaptive_truncation(0.7, 0, self.CFG) == self.CFG.eps_max

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TruncationConfig(0.3, 0.1)
        with pytest.raises(ValueError):
            TruncationConfig(0.1, 0.3, k=0)


class TestMeasurementWeight:
    def test_head_on(self):
        w = measurement_weight(np.array([0, 0, 1.0]), np.array([0, 0, 5.0]),
                               np.array([0, 0, 0.0]))
        assert w == pytest.approx(1.0)

    def test_grazing_floors_at_min(self):
        ang = np.deg2rad(89.9)
        sensor = np.array([np.sin(ang), 0, np.cos(ang)]) * 5
        w = measurement_weight(np.array([0, 0, 1.0]), sensor, np.zeros(3))
        assert w == pytest.approx(0.05)

    def test_sixty_degrees(self):
        ang = np.deg2rad(60.0)
        sensor = np.array([np.sin(ang), 0, np.cos(ang)]) * 2
        w = measurement_weight(np.array([0, 0, 1.0]), sensor, np.zeros(3))
        assert w == pytest.approx(0.5, abs=1e-12)


def make_volume(voxel=0.25, eps_min=0.5, eps_max=1.0, **kw):
    return TsdfVolume(voxel, TruncationConfig(eps_min, eps_max), **kw)


class TestIntegrateScan:
    def test_single_point_band(self):
        vol = make_volume()
        p = np.array([[0.0, 0.0, 3.0]])
        sensor = np.array([0.0, 0.0, 0.0])
        vol.integrate_scan(p, sensor)
        assert vol.n_blocks >= 1
        # voxel nearest the point: tsdf ~ 0 within half a voxel
        coord = np.floor(p[0] / vol.voxel_size).astype(int)
        blk = vol.block(coord // 8)
        local = coord % 8
        tsdf = blk.tsdf[tuple(local)]
        assert blk.weight[tuple(local)] > 0
        assert abs(tsdf) <= vol.voxel_size / 2

        # observed voxels all lie within eps along the ray and r_perp of it
        eps = vol.truncation.eps_max
        for bc in vol.block_coords():
            blk = vol.block(bc)
            occ = np.argwhere(blk.weight > 0)
            for ijk in occ:
                centers = (bc * 8 + ijk + 0.5) * vol.voxel_size
                d = (p[0] - centers) @ np.array([0, 0, 1.0])
                perp = np.linalg.norm((p[0] - centers) - d * np.array([0, 0, 1.0]))
                assert abs(d) <= eps + 1e-12
                assert perp <= vol.R_PERP_FACTOR * vol.voxel_size + 1e-12

    def test_repeated_plane_scans_converge(self):
        rng = np.random.default_rng(4)
        vol = make_volume(voxel=0.1, eps_min=0.2, eps_max=0.4)
        sensor = np.array([0.0, 0.0, 4.0])
        base = np.column_stack([rng.uniform(-1, 1, 400), rng.uniform(-1, 1, 400),
                                np.zeros(400)])
        deltas = []
        prev = None
        for _ in range(6):
            vol.integrate_scan(base, sensor)
            snap = {tuple(c): vol.block(c).tsdf.copy() for c in vol.block_coords()}
            if prev is not None:
                common = [k for k in snap if k in prev]
                deltas.append(max(np.abs(snap[k] - prev[k]).max() for k in common))
            prev = snap
        assert deltas[-1] < deltas[0]
        assert deltas[-1] < 0.02

        # scalar oracle: running weighted average of a constant is constant
        # -> with identical scans, values stop moving
        assert deltas[-1] < 1e-6 or deltas[-1] < deltas[-2]

    def test_weight_monotone_and_tsdf_bounded(self):
        rng = np.random.default_rng(5)
        vol = make_volume()
        sensor = np.array([0, 0, 5.0])
        w_before = {}
        for _ in range(3):
            pts = rng.uniform(-1, 1, size=(50, 3))
            vol.integrate_scan(pts, sensor)
            for c in vol.block_coords():
                blk = vol.block(c)
                key = tuple(c)
                if key in w_before:
                    assert (blk.weight >= w_before[key] - 1e-6).all()
                w_before[key] = blk.weight.copy()
                assert (np.abs(blk.tsdf) <= vol.truncation.eps_max + 1e-6).all()

    def test_point_order_insensitive(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(-1, 1, size=(300, 3))
        sensor = np.array([0, 0, 5.0])
        va = make_volume()
        vb = make_volume()
        va.integrate_scan(pts, sensor)
        vb.integrate_scan(pts[::-1], sensor)
        assert set(map(tuple, va.block_coords().tolist())) == \
            set(map(tuple, vb.block_coords().tolist()))
        for c in va.block_coords():
            a, b = va.block(c), vb.block(c)
            assert np.allclose(a.tsdf, b.tsdf, atol=1e-6)
            assert np.allclose(a.weight, b.weight, atol=1e-6)
            assert np.allclose(a.stats.mean, b.stats.mean, atol=1e-9)

    def test_translation_covariance(self):
        rng = np.random.default_rng(7)
        # points on a 2^-10 lattice so the shift is floating-point exact
        pts = np.round(rng.uniform(-1, 1, size=(200, 3)) * 1024) / 1024
        sensor = np.array([0.5, 0.25, 4.0])
        shift = np.array([2.0, -4.0, 8.0])  # block size = 8 * 0.25 = 2.0
        va = make_volume()
        vb = make_volume()
        va.integrate_scan(pts, sensor)
        vb.integrate_scan(pts + shift, sensor + shift)
        block_shift = (shift / (8 * va.voxel_size)).astype(int)
        ca = sorted(map(tuple, va.block_coords().tolist()))
        cb = sorted(map(tuple, vb.block_coords().tolist()))
        assert cb == [tuple(np.array(c) + block_shift) for c in ca]
        for c in ca:
            a = va.block(c)
            b = vb.block(np.array(c) + block_shift)
            assert np.array_equal(a.tsdf, b.tsdf)
            assert np.array_equal(a.weight, b.weight)

    def test_allocation_limit(self):
        vol = make_volume(max_blocks=4)
        rng = np.random.default_rng(8)
        with pytest.raises(AllocationLimitError):
            vol.integrate_scan(rng.uniform(-20, 20, size=(200, 3)),
                               np.array([0, 0, 50.0]))

    def test_statistics_accumulated_per_block(self):
        vol = make_volume(voxel=0.25)
        pts = np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [1.0, 1.0, 1.0]])
        vol.integrate_scan(pts, np.array([0, 0, 10.0]))
        blk = vol.block((0, 0, 0))
        assert blk.stats.n == 3
        assert np.allclose(blk.stats.mean, pts.mean(axis=0))


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        vol = make_volume()
        for _ in range(3):
            vol.integrate_scan(rng.uniform(-2, 2, size=(200, 3)), np.array([0, 0, 6.0]))
        path = tmp_path / "vol.atsf"
        vol.save(path)
        back = TsdfVolume.load(path)
        assert back.voxel_size == vol.voxel_size
        assert back.truncation == vol.truncation
        assert back.n_blocks == vol.n_blocks
        for c in vol.block_coords():
            a, b = vol.block(c), back.block(c)
            assert np.array_equal(a.tsdf, b.tsdf)
            assert np.array_equal(a.weight, b.weight)
            assert a.stats.n == b.stats.n
            assert np.array_equal(a.stats.mean, b.stats.mean)
            assert np.allclose(a.stats.covariance, b.stats.covariance, atol=0)

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(10)
        pts = rng.uniform(-2, 2, size=(100, 3))
        blobs = []
        for run in range(2):
            vol = make_volume()
            vol.integrate_scan(pts, np.array([1, 2, 6.0]))
            p = tmp_path / f"v{run}.atsf"
            vol.save(p)
            blobs.append(p.read_bytes())
        assert blobs[0] == blobs[1]

    def test_rejects_bad_magic(self, tmp_path):
        p = tmp_path / "bad.atsf"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            TsdfVolume.load(p)
