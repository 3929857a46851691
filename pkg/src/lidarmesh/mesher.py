"""Zero-isosurface extraction from the TSDF volume and face adjacency.

Marching cubes with the standard 256-case table runs per block over a
one-voxel neighbor overlap; vertices are welded across block seams by
global lattice-edge identity, which makes the output crack-free and
bit-deterministic for a given volume. Only cells whose eight corners all
reach the weight gate are meshed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .volume import TsdfVolume

__all__ = [
    "TriangleMesh",
    "FaceAdjacency",
    "EmptyVolumeError",
    "extract_mesh",
    "build_adjacency",
    "write_ply",
    "read_ply_points",
    "write_ply_points",
]


class EmptyVolumeError(RuntimeError):
    """No observed voxel in the volume."""


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh with outward per-face unit normals."""

    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray     # (F, 3) int32
    face_normals: np.ndarray  # (F, 3) float64

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def face_areas(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(
            np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass(frozen=True)
class FaceAdjacency:
    """Unordered face-index pairs sharing a mesh edge."""

    pairs: np.ndarray  # (E, 2) int64, pairs[i, 0] < pairs[i, 1]


def _face_geometry(vertices, faces):
    tri = vertices[faces]
    cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    area2 = np.linalg.norm(cross, axis=1)
    return cross, area2


def extract_mesh(volume: TsdfVolume, iso_weight_min: float = 1.0,
                 chunk_blocks: int = 2048) -> TriangleMesh:
    """Marching-cubes mesh of the tsdf = 0 surface.

    Cells participate only when all 8 corners carry weight >= iso_weight_min
    (default one full-confidence observation, suppressing single grazing
    rays). Raises EmptyVolumeError when no voxel is observed.
    """
    keys, grid_t, grid_w = volume.gather_overlap_grids()
    if len(keys) == 0 or not (grid_w > 0).any():
        raise EmptyVolumeError("volume has no observed voxels")

    refs_parts, pos_parts = [], []
    for s in range(0, len(keys), chunk_blocks):
        e = min(s + chunk_blocks, len(keys))
        refs, pos = _kernels.march_blocks(grid_t[s:e], grid_w[s:e], keys[s:e],
                                          volume.voxel_size, iso_weight_min)
        if len(refs):
            refs_parts.append(refs)
            pos_parts.append(pos)
    if not refs_parts:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int32),
                            np.zeros((0, 3)))
    refs = np.concatenate(refs_parts)   # (T, 3, 4) global edge ids
    pos = np.concatenate(pos_parts)     # (T, 3, 3)

    flat_refs = refs.reshape(-1, 4)
    uniq, first, inverse = np.unique(flat_refs, axis=0, return_index=True,
                                     return_inverse=True)
    vertices = pos.reshape(-1, 3)[first]
    faces = inverse.reshape(-1, 3).astype(np.int32)

    # drop degenerate output (repeated vertex or numerically zero area)
    distinct = ((faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2])
                & (faces[:, 0] != faces[:, 2]))
    faces = faces[distinct]
    cross, area2 = _face_geometry(vertices, faces)
    ok = area2 >= 2e-12
    faces = faces[ok]
    cross = cross[ok]
    area2 = area2[ok]

    # referenced vertices only, in first-use order of the unique set
    used = np.zeros(len(vertices), dtype=bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    vertices = vertices[used]
    faces = remap[faces].astype(np.int32)

    normals = cross / area2[:, None]
    return TriangleMesh(vertices, faces, normals)


def build_adjacency(mesh: TriangleMesh) -> FaceAdjacency:
    """Face pairs sharing exactly one mesh edge (two vertex indices)."""
    f = mesh.faces.astype(np.int64)
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    face_of = np.tile(np.arange(len(f)), 3)
    key = edges[:, 0] * (f.max() + 1 if len(f) else 1) + edges[:, 1]
    order = np.argsort(key, kind="stable")
    key = key[order]
    face_of = face_of[order]
    pairs = []
    starts = np.nonzero(np.diff(key, prepend=key[0] - 1 if len(key) else 0))[0]
    bounds = np.append(starts, len(key))
    for s, e in zip(bounds[:-1], bounds[1:]):
        if e - s > 1:
            group = np.sort(face_of[s:e])
            for i in range(len(group)):
                for j in range(i + 1, len(group)):
                    if group[i] != group[j]:
                        pairs.append((group[i], group[j]))
    if not pairs:
        return FaceAdjacency(np.zeros((0, 2), dtype=np.int64))
    out = np.unique(np.asarray(pairs, dtype=np.int64), axis=0)
    return FaceAdjacency(out)


# ---------------------------------------------------------------------------
# PLY input/output


def write_ply(path, mesh: TriangleMesh, binary: bool = True,
              face_colors=None, face_classes=None) -> None:
    """Mesh to PLY; optional per-face uchar RGB and class id properties."""
    v = np.asarray(mesh.vertices, dtype="<f4")
    f = np.asarray(mesh.faces, dtype="<i4")
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(v)}",
              "property float x", "property float y", "property float z",
              f"element face {len(f)}",
              "property list uchar int vertex_indices"]
    if face_colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    if face_classes is not None:
        header += ["property uchar class_id"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(v.tobytes())
            face_dt = [("n", "u1"), ("idx", "<i4", 3)]
            if face_colors is not None:
                face_dt.append(("rgb", "u1", 3))
            if face_classes is not None:
                face_dt.append(("cls", "u1"))
            rec = np.empty(len(f), dtype=face_dt)
            rec["n"] = 3
            rec["idx"] = f
            if face_colors is not None:
                rec["rgb"] = np.asarray(face_colors, dtype=np.uint8)
            if face_classes is not None:
                rec["cls"] = np.asarray(face_classes, dtype=np.uint8)
            fh.write(rec.tobytes())
        else:
            for p in v:
                fh.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n".encode())
            cols = np.asarray(face_colors, dtype=np.uint8) if face_colors is not None else None
            cls = np.asarray(face_classes, dtype=np.uint8) if face_classes is not None else None
            for i, idx in enumerate(f):
                line = f"3 {idx[0]} {idx[1]} {idx[2]}"
                if cols is not None:
                    line += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
                if cls is not None:
                    line += f" {cls[i]}"
                fh.write((line + "\n").encode())


def write_ply_points(path, points: np.ndarray) -> None:
    """Point cloud to binary little-endian PLY (double precision)."""
    pts = np.asarray(points, dtype="<f8").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property double x\nproperty double y\nproperty double z\n"
              "end_header\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(pts.tobytes())


def read_ply_points(path) -> np.ndarray:
    """Read a point cloud written by write_ply_points."""
    with open(path, "rb") as fh:
        header = b""
        while not header.endswith(b"end_header\n"):
            chunk = fh.readline()
            if not chunk:
                raise ValueError("truncated PLY header")
            header += chunk
        text = header.decode("ascii").splitlines()
        if text[0] != "ply" or "format binary_little_endian 1.0" not in text[1]:
            raise ValueError("expected binary little-endian PLY")
        count = 0
        for line in text:
            if line.startswith("element vertex"):
                count = int(line.split()[-1])
        data = np.frombuffer(fh.read(count * 24), dtype="<f8")
    return data.reshape(count, 3).astype(np.float64)
