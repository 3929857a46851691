"""Hashed voxel-block TSDF volume with adaptive truncation.

The volume is a sparse map from integer block coordinates to dense 8x8x8
voxel bricks. Each brick carries, besides the truncated signed distance and
accumulated weight per voxel, the running statistics (count, mean,
covariance) of the measurement points that fell inside it. Those statistics
drive a per-block PCA plane fit whose flatness, together with the point
count, sets the local truncation distance: sparse or curved blocks carve a
wide band for completeness, dense flat blocks a narrow one for detail.

Voxel (i, j, k) of a block occupies flat slot i*64 + j*8 + k; the center of
global voxel v is (v + 0.5) * voxel_size. Signed distances are measured
along the sensor ray, positive between sensor and measurement.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _kernels

BLOCK_SHIFT = 3
BLOCK_SIZE = 1 << BLOCK_SHIFT  # 8 voxels per block edge
VOXELS_PER_BLOCK = BLOCK_SIZE ** 3
MAX_BLOCK_COORD = 1 << 20  # keeps packed block keys unique

_MAGIC = b"ATSF"
_VERSION = 1


class EmptyMergeError(ValueError):
    """Both statistics operands are empty."""


class DegenerateStatisticsError(ValueError):
    """Too few points or no usable second principal axis."""


class AllocationLimitError(RuntimeError):
    """The volume exceeded its configured block budget."""


@dataclass(frozen=True)
class BlockStatistics:
    """Running point statistics of one voxel block.

    `covariance` uses the sample (n-1) denominator and is the zero matrix
    whenever n <= 1.
    """

    n: int
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64).reshape(3))
        object.__setattr__(self, "covariance",
                           np.asarray(self.covariance, dtype=np.float64).reshape(3, 3))
        if self.n < 0:
            raise ValueError("point count must be nonnegative")

    @staticmethod
    def empty() -> "BlockStatistics":
        return BlockStatistics(0, np.zeros(3), np.zeros((3, 3)))


def statistics_of(points: np.ndarray) -> BlockStatistics:
    """Batch statistics of an (N, 3) point set."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    if n == 0:
        return BlockStatistics.empty()
    mean = pts.mean(axis=0)
    if n == 1:
        return BlockStatistics(1, mean, np.zeros((3, 3)))
    dev = pts - mean
    cov = dev.T @ dev / (n - 1)
    return BlockStatistics(n, mean, cov)


def _merge_arrays(n1, e1, c1, n2, e2, c2):
    """Vectorized merge of two statistics batches (leading dims broadcast)."""
    n1 = np.asarray(n1, dtype=np.float64)
    n2 = np.asarray(n2, dtype=np.float64)
    n = n1 + n2
    em = (n1[..., None] * e1 + n2[..., None] * e2) / n[..., None]
    d1 = em - e1
    d2 = em - e2
    outer1 = d1[..., :, None] * d1[..., None, :]
    outer2 = d2[..., :, None] * d2[..., None, :]
    num = ((n1 - 1)[..., None, None] * c1 + (n2 - 1)[..., None, None] * c2
           + n1[..., None, None] * outer1 + n2[..., None, None] * outer2)
    denom = n - 1
    cm = np.where((denom > 0)[..., None, None], num / np.maximum(denom, 1)[..., None, None], 0.0)
    return n.astype(np.int64), em, cm


def merge_statistics(a: BlockStatistics, b: BlockStatistics) -> BlockStatistics:
    """Combine two point-set statistics into the statistics of their union."""
    if a.n + b.n == 0:
        raise EmptyMergeError("cannot merge two empty statistics")
    if a.n == 0:
        return b
    if b.n == 0:
        return a
    n, mean, cov = _merge_arrays(a.n, a.mean, a.covariance, b.n, b.mean, b.covariance)
    return BlockStatistics(int(n), mean, cov)


@dataclass(frozen=True)
class PlaneEstimate:
    """PCA plane fit: unit normal oriented toward the sensor, flatness in
    [0, 1] (1 for a perfect plane) and eigenvalues in descending order."""

    normal: np.ndarray
    flatness: float
    eigenvalues: np.ndarray


def estimate_plane(stats: BlockStatistics, sensor_pos: np.ndarray,
                   tol: float = 1e-12) -> PlaneEstimate:
    """Fit a plane to block statistics.

    The normal is the least dominant covariance eigenvector, sign-flipped so
    it points toward the sensor. Raises DegenerateStatisticsError when fewer
    than 3 points were seen or the second eigenvalue is below `tol` (the
    caller then falls back to the maximum truncation distance).
    """
    if stats.n < 3:
        raise DegenerateStatisticsError(f"need >= 3 points, have {stats.n}")
    evals, evecs = np.linalg.eigh(stats.covariance)  # ascending
    evals = np.maximum(evals, 0.0)
    lam3, lam2, lam1 = evals[0], evals[1], evals[2]
    if lam2 <= tol:
        raise DegenerateStatisticsError("second principal axis is degenerate")
    normal = evecs[:, 0]
    if normal @ (np.asarray(sensor_pos, dtype=np.float64) - stats.mean) <= 0:
        normal = -normal
    flatness = 1.0 - lam3 / lam2
    return PlaneEstimate(normal, float(flatness), np.array([lam1, lam2, lam3]))


@dataclass(frozen=True)
class TruncationConfig:
    """Bounds and flatness weight of the adaptive truncation distance."""

    eps_min: float
    eps_max: float
    k: float = 64.0

    def __post_init__(self):
        if not (0 < self.eps_min <= self.eps_max):
            raise ValueError("need 0 < eps_min <= eps_max")
        if self.k <= 0:
            raise ValueError("k must be positive")


def adaptive_truncation(flatness: float, n: int, cfg: TruncationConfig) -> float:
    """Truncation distance from surface flatness and point density.

    eps = clamp(k * flatness / n * eps_max, eps_min, eps_max); empty blocks
    (n = 0) always get eps_max so the first measurements carve a wide band.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n == 0:
        return cfg.eps_max
    raw = cfg.k * flatness / n * cfg.eps_max
    return float(min(max(raw, cfg.eps_min), cfg.eps_max))


DEFAULT_W_MIN = 0.05


def measurement_weight(normal: np.ndarray, sensor_pos: np.ndarray,
                       point: np.ndarray, w_min: float = DEFAULT_W_MIN) -> float:
    """Incidence-based measurement weight in [w_min, 1].

    The weight is the cosine between the surface normal and the direction
    back to the sensor, so head-on returns weigh fully and grazing returns
    are floored at w_min instead of being discarded.
    """
    ray = np.asarray(sensor_pos, dtype=np.float64) - np.asarray(point, dtype=np.float64)
    norm = np.linalg.norm(ray)
    if norm < 1e-12:
        raise ValueError("sensor position coincides with the measurement")
    cos = float(np.asarray(normal, dtype=np.float64) @ (ray / norm))
    return min(max(cos, w_min), 1.0)


def pack_block_keys(coords: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer block coordinates into unique int64 keys."""
    c = np.asarray(coords, dtype=np.int64)
    if np.any(np.abs(c) >= MAX_BLOCK_COORD):
        raise AllocationLimitError("block coordinate outside the addressable range")
    off = c + MAX_BLOCK_COORD
    return (off[..., 0] << 42) | (off[..., 1] << 21) | off[..., 2]


@dataclass
class VoxelBlock:
    """Read/write view of one 8x8x8 brick and its statistics."""

    coord: tuple
    tsdf: np.ndarray
    weight: np.ndarray
    stats: BlockStatistics


class TsdfVolume:
    """Sparse TSDF volume (block map plus per-block statistics).

    One `integrate_scan` call per LiDAR frame: it first folds the frame's
    points into the per-block statistics, then carves the truncation band
    around every measurement along its sensor ray using the per-block
    adaptive truncation distance and incidence weight.

    Writes must not overlap reads; `snapshot()` returns an isolated copy for
    concurrent extraction.
    """

    # perpendicular carving reach: half a voxel diagonal around the ray
    R_PERP_FACTOR = np.sqrt(3.0) / 2.0
    # reach behind the measurement relative to eps: a full band in front
    # keeps sparse regions complete, a half band behind stops thin
    # structures from shining phantom surfaces through occluding edges
    BACK_FRACTION = 0.5
    MIN_BACK_VOXELS = 2.0

    def __init__(self, voxel_size: float, truncation: TruncationConfig,
                 max_blocks: int = 1 << 24, w_min: float = DEFAULT_W_MIN):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        self.voxel_size = float(voxel_size)
        self.truncation = truncation
        self.max_blocks = int(max_blocks)
        self.w_min = float(w_min)
        self._index: dict = {}  # (bx, by, bz) -> row in the arrays below
        cap = 64
        self._keys = np.zeros((cap, 3), dtype=np.int32)
        self._tsdf = np.zeros((cap, VOXELS_PER_BLOCK), dtype=np.float32)
        self._weight = np.zeros((cap, VOXELS_PER_BLOCK), dtype=np.float32)
        self._n = np.zeros(cap, dtype=np.int64)
        self._mean = np.zeros((cap, 3), dtype=np.float64)
        self._cov = np.zeros((cap, 3, 3), dtype=np.float64)

    # -- storage ---------------------------------------------------------

    @property
    def n_blocks(self) -> int:
        return len(self._index)

    def block_coords(self) -> np.ndarray:
        """(B, 3) coordinates of allocated blocks, insertion order."""
        return self._keys[: self.n_blocks].copy()

    def _grow(self, need: int) -> None:
        cap = len(self._n)
        if need <= cap:
            return
        new = max(need, cap * 2)
        for name in ("_keys", "_tsdf", "_weight", "_n", "_mean", "_cov"):
            arr = getattr(self, name)
            grown = np.zeros((new,) + arr.shape[1:], dtype=arr.dtype)
            grown[:cap] = arr
            setattr(self, name, grown)

    def allocate(self, coords: np.ndarray) -> np.ndarray:
        """Rows for (N, 3) block coords, allocating missing blocks in the
        given order. Raises AllocationLimitError over the block budget."""
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        if np.any(np.abs(coords) >= MAX_BLOCK_COORD):
            raise AllocationLimitError("block coordinate outside the addressable range")
        rows = np.empty(len(coords), dtype=np.int64)
        idx = self._index
        nb = len(idx)
        for i, c in enumerate(map(tuple, coords.tolist())):
            row = idx.get(c)
            if row is None:
                row = nb
                idx[c] = row
                nb += 1
                self._grow(nb)
                self._keys[row] = c
            rows[i] = row
        if nb > self.max_blocks:
            raise AllocationLimitError(f"block budget of {self.max_blocks} exceeded")
        return rows

    def block(self, coord) -> VoxelBlock:
        row = self._index[tuple(int(c) for c in coord)]
        return VoxelBlock(
            coord=tuple(self._keys[row]),
            tsdf=self._tsdf[row].reshape(BLOCK_SIZE, BLOCK_SIZE, BLOCK_SIZE),
            weight=self._weight[row].reshape(BLOCK_SIZE, BLOCK_SIZE, BLOCK_SIZE),
            stats=BlockStatistics(int(self._n[row]), self._mean[row].copy(),
                                  self._cov[row].copy()),
        )

    def has_block(self, coord) -> bool:
        return tuple(int(c) for c in coord) in self._index

    def snapshot(self) -> "TsdfVolume":
        """Deep copy acting as a read barrier for concurrent extraction."""
        out = TsdfVolume(self.voxel_size, self.truncation, self.max_blocks,
                         self.w_min)
        out._index = dict(self._index)
        for name in ("_keys", "_tsdf", "_weight", "_n", "_mean", "_cov"):
            setattr(out, name, getattr(self, name).copy())
        return out

    # -- integration -----------------------------------------------------

    def block_of_points(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points, dtype=np.float64)
                        / (BLOCK_SIZE * self.voxel_size)).astype(np.int64)

    def _merge_scan_statistics(self, points: np.ndarray) -> np.ndarray:
        """Fold scan points into their blocks' statistics; returns per-point
        block row indices."""
        blocks = self.block_of_points(points)
        keys = pack_block_keys(blocks)
        order = np.argsort(keys, kind="stable")
        sk, starts = np.unique(keys[order], return_index=True)
        group_of_point = np.searchsorted(sk, keys)
        uniq_coords = blocks[order[starts]]
        rows = self.allocate(uniq_coords)

        pts = points[order]
        counts = np.diff(np.append(starts, len(pts)))
        sums = np.add.reduceat(pts, starts, axis=0)
        means = sums / counts[:, None]
        dev = pts - np.repeat(means, counts, axis=0)
        outer = dev[:, :, None] * dev[:, None, :]
        covs = np.add.reduceat(outer, starts, axis=0)
        denom = np.maximum(counts - 1, 1).astype(np.float64)
        covs = np.where((counts > 1)[:, None, None], covs / denom[:, None, None], 0.0)

        n_new, mean_new, cov_new = _merge_arrays(
            self._n[rows], self._mean[rows], self._cov[rows],
            counts, means, covs)
        self._n[rows] = n_new
        self._mean[rows] = mean_new
        self._cov[rows] = cov_new
        return rows[group_of_point]

    def _per_block_carving_params(self, rows: np.ndarray, sensor_pos: np.ndarray):
        """(eps, normal, degenerate) for the distinct block rows given."""
        n = self._n[rows]
        cov = self._cov[rows]
        mean = self._mean[rows]
        eps = np.full(len(rows), self.truncation.eps_max)
        normals = np.zeros((len(rows), 3))
        degenerate = np.ones(len(rows), dtype=bool)
        fit = n >= 3
        if fit.any():
            evals, evecs = np.linalg.eigh(cov[fit])
            evals = np.maximum(evals, 0.0)
            lam2 = evals[:, 1]
            ok = lam2 > 1e-12
            nrm = evecs[:, :, 0]
            flip = np.einsum("ij,ij->i", nrm, sensor_pos[None, :] - mean[fit]) <= 0
            nrm[flip] = -nrm[flip]
            flat = np.where(ok, 1.0 - evals[:, 0] / np.where(ok, lam2, 1.0), 0.0)
            raw = self.truncation.k * flat / n[fit] * self.truncation.eps_max
            eps_fit = np.clip(raw, self.truncation.eps_min, self.truncation.eps_max)
            eps_fit = np.where(ok, eps_fit, self.truncation.eps_max)
            fit_idx = np.nonzero(fit)[0]
            eps[fit_idx] = eps_fit
            normals[fit_idx] = nrm
            degenerate[fit_idx] = ~ok
        return eps, normals, degenerate

    def integrate_scan(self, points: np.ndarray, sensor_pos: np.ndarray,
                       chunk: int = 8192) -> None:
        """Fuse one scan: statistics first, then weighted band carving."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            return
        if not np.isfinite(pts).all():
            raise ValueError("scan points must be finite")
        sensor = np.asarray(sensor_pos, dtype=np.float64).reshape(3)

        keep = np.linalg.norm(pts - sensor, axis=1) > 1e-9
        pts = pts[keep]
        if len(pts) == 0:
            return

        rows_per_point = self._merge_scan_statistics(pts)
        uniq_rows, inv = np.unique(rows_per_point, return_inverse=True)
        eps_b, normal_b, degen_b = self._per_block_carving_params(uniq_rows, sensor)

        eps_pt = eps_b[inv]
        ray = sensor[None, :] - pts
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        cos = np.einsum("ij,ij->i", normal_b[inv], ray)
        # degenerate blocks carry no usable normal: carve the widest band for
        # completeness but at the floor weight, so the first wide strokes act
        # as provisional evidence that real observations easily override
        w_pt = np.where(degen_b[inv], self.w_min, np.clip(cos, self.w_min, 1.0))

        r_perp = self.R_PERP_FACTOR * self.voxel_size
        back_pt = np.minimum(
            eps_pt, np.maximum(self.BACK_FRACTION * eps_pt,
                               self.MIN_BACK_VOXELS * self.voxel_size))
        for s in range(0, len(pts), chunk):
            e = min(s + chunk, len(pts))
            vox, d, src = _kernels.enumerate_updates(
                pts[s:e], sensor, eps_pt[s:e], back_pt[s:e], self.voxel_size,
                r_perp)
            if len(d) == 0:
                continue
            bcoords = vox >> BLOCK_SHIFT
            local = vox - (bcoords << BLOCK_SHIFT)
            local_idx = (local[:, 0] * BLOCK_SIZE + local[:, 1]) * BLOCK_SIZE + local[:, 2]
            uk, first = np.unique(pack_block_keys(bcoords), return_index=True)
            rows = self.allocate(bcoords[first])
            lookup = np.searchsorted(uk, pack_block_keys(bcoords))
            # behind the measurement the confidence ramps down linearly, so
            # band tails that poke through occluding edges stay too weak to
            # pass the meshing weight gate
            w_upd = w_pt[s:e][src]
            back_upd = back_pt[s:e][src]
            behind = d < 0
            ramp = np.ones(len(d))
            ramp[behind] = np.maximum(1.0 + d[behind] / back_upd[behind], 0.0)
            _kernels.apply_updates(self._tsdf, self._weight,
                                   rows[lookup], local_idx, d, w_upd * ramp)

    def gather_overlap_grids(self):
        """Per-block 9x9x9 corner grids with a one-voxel overlap read from
        +x/+y/+z neighbors, blocks sorted by packed key.

        Returns (keys (B, 3) int64, tsdf (B, 9, 9, 9) f32, weight (B, 9, 9, 9)
        f32); grid slots without a neighbor keep weight 0 (unobserved).
        """
        nb = self.n_blocks
        if nb == 0:
            empty = np.zeros((0, 9, 9, 9), dtype=np.float32)
            return np.zeros((0, 3), dtype=np.int64), empty, empty.copy()
        keys = self._keys[:nb].astype(np.int64)
        order = np.argsort(pack_block_keys(keys))
        keys = keys[order]
        packed = pack_block_keys(keys)
        bs = BLOCK_SIZE
        gt = np.zeros((nb, bs + 1, bs + 1, bs + 1), dtype=np.float32)
        gw = np.zeros_like(gt)
        own_t = self._tsdf[:nb][order].reshape(nb, bs, bs, bs)
        own_w = self._weight[:nb][order].reshape(nb, bs, bs, bs)
        gt[:, :bs, :bs, :bs] = own_t
        gw[:, :bs, :bs, :bs] = own_w
        slices = {
            (1, 0, 0): (np.s_[bs, :bs, :bs], np.s_[0, :, :]),
            (0, 1, 0): (np.s_[:bs, bs, :bs], np.s_[:, 0, :]),
            (0, 0, 1): (np.s_[:bs, :bs, bs], np.s_[:, :, 0]),
            (1, 1, 0): (np.s_[bs, bs, :bs], np.s_[0, 0, :]),
            (1, 0, 1): (np.s_[bs, :bs, bs], np.s_[0, :, 0]),
            (0, 1, 1): (np.s_[:bs, bs, bs], np.s_[:, 0, 0]),
            (1, 1, 1): (np.s_[bs, bs, bs], np.s_[0, 0, 0]),
        }
        for off, (dst, src) in slices.items():
            nkeys = pack_block_keys(keys + np.asarray(off, dtype=np.int64))
            pos = np.searchsorted(packed, nkeys)
            pos = np.clip(pos, 0, nb - 1)
            exists = packed[pos] == nkeys
            rows = np.nonzero(exists)[0]
            nrow = order[pos[rows]]
            gt[(rows,) + dst] = self._tsdf[nrow].reshape(-1, bs, bs, bs)[(np.s_[:],) + src]
            gw[(rows,) + dst] = self._weight[nrow].reshape(-1, bs, bs, bs)[(np.s_[:],) + src]
        return keys, gt, gw

    # -- serialization ---------------------------------------------------

    def save(self, path) -> None:
        """Write the documented little-endian binary format (see README)."""
        nb = self.n_blocks
        order = np.argsort(pack_block_keys(self._keys[:nb].astype(np.int64)))
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<IQdddd", _VERSION, nb, self.voxel_size,
                                self.truncation.eps_min, self.truncation.eps_max,
                                self.truncation.k))
            iu = np.triu_indices(3)
            for row in order:
                f.write(self._keys[row].astype("<i4").tobytes())
                inter = np.empty(2 * VOXELS_PER_BLOCK, dtype="<f4")
                inter[0::2] = self._tsdf[row]
                inter[1::2] = self._weight[row]
                f.write(inter.tobytes())
                f.write(struct.pack("<q", int(self._n[row])))
                f.write(self._mean[row].astype("<f8").tobytes())
                f.write(self._cov[row][iu].astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "TsdfVolume":
        with open(path, "rb") as f:
            if f.read(4) != _MAGIC:
                raise ValueError("not a TSDF volume file")
            version, nb, vs, emin, emax, k = struct.unpack("<IQdddd", f.read(44))
            if version != _VERSION:
                raise ValueError(f"unsupported volume format version {version}")
            vol = cls(vs, TruncationConfig(emin, emax, k))
            iu = np.triu_indices(3)
            rec = 12 + 8 * VOXELS_PER_BLOCK + 8 + 24 + 48
            buf = f.read(nb * rec)
        if len(buf) != nb * rec:
            raise ValueError("truncated volume file")
        vol._grow(nb)
        for b in range(nb):
            o = b * rec
            key = np.frombuffer(buf, "<i4", 3, o)
            inter = np.frombuffer(buf, "<f4", 2 * VOXELS_PER_BLOCK, o + 12)
            o2 = o + 12 + 8 * VOXELS_PER_BLOCK
            (n,) = struct.unpack_from("<q", buf, o2)
            mean = np.frombuffer(buf, "<f8", 3, o2 + 8)
            tri = np.frombuffer(buf, "<f8", 6, o2 + 32)
            cov = np.zeros((3, 3))
            cov[iu] = tri
            cov.T[iu] = tri
            vol._index[tuple(int(c) for c in key)] = b
            vol._keys[b] = key
            vol._tsdf[b] = inter[0::2]
            vol._weight[b] = inter[1::2]
            vol._n[b] = n
            vol._mean[b] = mean
            vol._cov[b] = cov
        return vol
