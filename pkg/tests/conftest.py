import numpy as np
import pytest

from lidarmesh.volume import TruncationConfig, TsdfVolume


def fill_analytic(vol: TsdfVolume, sdf, lo, hi, weight: float = 1.0):
    """Populate a volume from an analytic signed-distance function (positive
    outside), fully observed over the [lo, hi] box."""
    bs = 8 * vol.voxel_size
    bl = np.floor(np.array(lo, dtype=float) / bs).astype(int)
    bh = np.floor(np.array(hi, dtype=float) / bs).astype(int)
    coords = np.stack(
        np.meshgrid(*[np.arange(bl[i], bh[i] + 1) for i in range(3)], indexing="ij"),
        axis=-1).reshape(-1, 3)
    vol.allocate(coords)
    ii, jj, kk = np.meshgrid(np.arange(8), np.arange(8), np.arange(8), indexing="ij")
    local = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    eps = vol.truncation.eps_max
    for c in coords:
        centers = (c * 8 + local + 0.5) * vol.voxel_size
        d = np.clip(sdf(centers), -eps, eps)
        blk = vol.block(c)
        blk.tsdf[...] = d.reshape(8, 8, 8).astype(np.float32)
        blk.weight[...] = weight


def sphere_sdf(radius, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=float)
    return lambda p: np.linalg.norm(p - c, axis=-1) - radius


def make_volume(voxel=0.05, eps_min=0.1, eps_max=0.2, **kw):
    return TsdfVolume(voxel, TruncationConfig(eps_min, eps_max), **kw)


@pytest.fixture
def sphere_mesh():
    from lidarmesh.mesher import extract_mesh

    vol = make_volume()
    fill_analytic(vol, sphere_sdf(0.5), [-0.8] * 3, [0.8] * 3)
    return extract_mesh(vol, iso_weight_min=0.5)
