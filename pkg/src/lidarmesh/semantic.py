"""Semantic face labeling from posed label images.

Each visible (face, frame) pair casts one vote: the class id at the
projected face centroid, weighted by the face's projected area in that
frame. Row-normalized vote sums act as per-class probabilities; faces seen
by no camera get a uniform row, leaving their class entirely to the MRF
smoothness term, which propagates the surrounding region's label into
coverage gaps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import project_points
from .mesher import FaceAdjacency, TriangleMesh, write_ply
from .mrf import MRFProblem, solve
from .visibility import VisibilityTable

__all__ = ["ClassPalette", "LabelVotes", "UnknownClassError",
           "accumulate_votes", "fuse_labels", "export_labeled_ply",
           "write_label_report"]


class UnknownClassError(ValueError):
    """A label image pixel holds a class id outside the palette."""


@dataclass(frozen=True)
class ClassPalette:
    """Dense class table: ids 0..N-1 with names and display colors."""

    names: tuple
    colors: np.ndarray  # (N, 3) uint8

    def __post_init__(self):
        colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
        if len(self.names) != len(colors):
            raise ValueError("names/colors length mismatch")
        if len(self.names) < 2:
            raise ValueError("palette needs at least 2 classes")
        colors.setflags(write=False)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "colors", colors)

    @property
    def n_classes(self) -> int:
        return len(self.names)

    def to_json(self, path) -> None:
        entries = [{"id": i, "name": n, "color": [int(c) for c in col]}
                   for i, (n, col) in enumerate(zip(self.names, self.colors))]
        with open(path, "w") as fh:
            json.dump({"classes": entries}, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "ClassPalette":
        with open(path) as fh:
            doc = json.load(fh)
        entries = sorted(doc["classes"], key=lambda e: e["id"])
        ids = [e["id"] for e in entries]
        if ids != list(range(len(ids))):
            raise ValueError("palette ids must be dense 0..N-1")
        return ClassPalette(tuple(e["name"] for e in entries),
                            np.array([e["color"] for e in entries], dtype=np.uint8))


@dataclass(frozen=True)
class LabelVotes:
    """Per-face accumulated projected area per class (pixels^2)."""

    areas: np.ndarray  # (F, N) float64

    def normalized(self) -> np.ndarray:
        """Probability rows; faces without any vote get the uniform row."""
        sums = self.areas.sum(axis=1, keepdims=True)
        n = self.areas.shape[1]
        with np.errstate(invalid="ignore"):
            rows = np.where(sums > 0, self.areas / np.where(sums > 0, sums, 1.0),
                            1.0 / n)
        return rows


def accumulate_votes(mesh: TriangleMesh, visibility: VisibilityTable,
                     label_frames: dict, palette: ClassPalette) -> LabelVotes:
    """Area-weighted centroid-pixel votes over all visible (face, frame)
    pairs. Raises UnknownClassError on ids outside the palette."""
    n = palette.n_classes
    votes = np.zeros((mesh.n_faces, n))
    centroids = mesh.face_centroids()
    for fid, cam in label_frames.items():
        rows = np.nonzero(visibility.frame_ids == fid)[0]
        if len(rows) == 0:
            continue
        faces = visibility.face_ids[rows]
        uv, ok = project_points(cam, centroids[faces])
        px = np.clip(np.floor(uv[:, 0] + 0.5).astype(np.int64), 0,
                     cam.image.width - 1)
        py = np.clip(np.floor(uv[:, 1] + 0.5).astype(np.int64), 0,
                     cam.image.height - 1)
        cls = cam.image.data[py, px, 0].astype(np.int64)
        if (cls >= n).any():
            bad = int(cls[cls >= n][0])
            raise UnknownClassError(f"label image holds class {bad} >= {n}")
        sel = ok  # centroid of a fully projecting face projects too
        np.add.at(votes, (faces[sel], cls[sel]), visibility.areas_px2[rows][sel])
    return LabelVotes(votes)


def fuse_labels(mesh: TriangleMesh, adjacency: FaceAdjacency,
                votes: LabelVotes, lam_sem: float = 0.5):
    """MRF fusion over the full class set; returns (classes, confidence).

    Unaries are negated vote probabilities; invisible faces carry the
    uniform row, so only smoothness decides them (their confidence is 1/N).
    """
    prob_rows = votes.normalized()
    nf, n = prob_rows.shape
    labels_all = np.arange(n, dtype=np.int64)
    problem = MRFProblem([labels_all] * nf, list(-prob_rows),
                         adjacency.pairs, lam_sem)
    labels, _ = solve(problem)
    confidence = prob_rows[np.arange(nf), labels]
    return labels, confidence


def export_labeled_ply(path, mesh: TriangleMesh, classes: np.ndarray,
                       palette: ClassPalette, binary: bool = True) -> None:
    colors = palette.colors[np.asarray(classes, dtype=np.int64)]
    write_ply(path, mesh, binary=binary, face_colors=colors,
              face_classes=np.asarray(classes, dtype=np.uint8))


def write_label_report(path, classes: np.ndarray, confidence: np.ndarray,
                       palette: ClassPalette) -> None:
    """JSON per-face (class, confidence) report."""
    doc = {
        "n_classes": palette.n_classes,
        "class_names": list(palette.names),
        "faces": [[int(c), round(float(p), 9)]
                  for c, p in zip(classes, confidence)],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
