"""Synthetic benchmark: analytic scenes, scan simulation, rendering, error
evaluation.

Scenes are unions of solid primitives (sphere, box, half-space "plane",
capped cylinder) with exact signed distances and ray intersections, so
reconstructions can be scored against ground truth without any reference
mesh. The scan simulator reproduces the orbit protocol used for accuracy
experiments: a beam fan swept over full azimuth from poses on a circle,
with Gaussian range noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import CameraFrame, ImageBuffer, RigidPose
from .mesher import TriangleMesh

__all__ = [
    "Primitive", "SceneSpec", "BeamPattern", "ErrorReport",
    "simulate_scan", "render_frames", "mesh_error", "orbit_poses",
    "orbit_cameras", "look_at_pose", "benchmark_scene",
]

_KINDS = ("sphere", "box", "plane", "cylinder")


@dataclass(frozen=True)
class Primitive:
    """Solid primitive in its own local frame.

    dims by kind: sphere (radius,), box (hx, hy, hz) half extents,
    plane () -- the half-space z <= 0 with surface z = 0, cylinder
    (radius, half_height) along local z.
    """

    kind: str
    pose: RigidPose
    dims: tuple
    color: tuple
    class_id: int

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        need = {"sphere": 1, "box": 3, "plane": 0, "cylinder": 2}[self.kind]
        if len(self.dims) != need:
            raise ValueError(f"{self.kind} needs {need} dims")
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))

    # -- signed distance ------------------------------------------------

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = self.pose.inverse().apply(np.asarray(points, dtype=np.float64))
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.dims[0]
        if self.kind == "plane":
            return p[..., 2]
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.dims)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        # capped cylinder
        r, hh = self.dims
        dr = np.hypot(p[..., 0], p[..., 1]) - r
        dz = np.abs(p[..., 2]) - hh
        d = np.stack([dr, dz], axis=-1)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(d.max(axis=-1), 0.0)
        return outside + inside

    # -- ray intersection -------------------------------------------------

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """(t, world normal) of the nearest positive hit; t = inf on miss."""
        with np.errstate(all="ignore"):
            return self._raycast_local(origins, dirs)

    def _raycast_local(self, origins, dirs):
        inv = self.pose.inverse()
        o = inv.apply(origins)
        d = dirs @ self.pose.rotation  # rotation only
        t = np.full(len(o), np.inf)
        nrm = np.zeros_like(o)
        if self.kind == "sphere":
            r = self.dims[0]
            b = np.einsum("ij,ij->i", o, d)
            c = np.einsum("ij,ij->i", o, o) - r * r
            disc = b * b - c
            ok = disc >= 0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            tt = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
            t = np.where(ok, tt, np.inf)
            nrm = o + t[:, None] * d
        elif self.kind == "plane":
            dz = d[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                tt = -o[:, 2] / dz
            t = np.where((np.abs(dz) > 1e-12) & (tt > 1e-9), tt, np.inf)
            nrm = np.tile([0.0, 0.0, 1.0], (len(o), 1))
        elif self.kind == "box":
            h = np.asarray(self.dims)
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-h - o) / d
                t2 = (h - o) / d
            tn = np.nanmax(np.minimum(t1, t2), axis=1)
            tf = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tn <= tf) & (tf > 1e-9)
            t = np.where(hit & (tn > 1e-9), tn, np.where(hit, tf, np.inf))
            p_loc = o + t[:, None] * d
            # face normal: dominant axis of |p|/h
            ax = np.argmax(np.abs(p_loc) / h[None, :], axis=1)
            nrm = np.zeros_like(o)
            nrm[np.arange(len(o)), ax] = np.sign(p_loc[np.arange(len(o)), ax])
        else:  # cylinder
            r, hh = self.dims
            a = d[:, 0] ** 2 + d[:, 1] ** 2
            b = o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1]
            c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
            with np.errstate(divide="ignore", invalid="ignore"):
                disc = b * b - a * c
                sq = np.sqrt(np.where(disc >= 0, disc, 0.0))
                ts0 = (-b - sq) / a
                ts1 = (-b + sq) / a
            for ts in (ts0, ts1):
                z = o[:, 2] + ts * d[:, 2]
                ok = (disc >= 0) & (a > 1e-12) & (ts > 1e-9) & (np.abs(z) <= hh)
                t = np.where(ok & (ts < t), ts, t)
            # caps
            for zc in (-hh, hh):
                with np.errstate(divide="ignore", invalid="ignore"):
                    tc = (zc - o[:, 2]) / d[:, 2]
                pxy = o[:, :2] + tc[:, None] * d[:, :2]
                ok = (np.abs(d[:, 2]) > 1e-12) & (tc > 1e-9) \
                    & (np.einsum("ij,ij->i", pxy, pxy) <= r * r)
                t = np.where(ok & (tc < t), tc, t)
            p_loc = o + t[:, None] * d
            side = np.abs(np.hypot(p_loc[:, 0], p_loc[:, 1]) - r) \
                < np.abs(np.abs(p_loc[:, 2]) - hh)
            nrm = np.where(side[:, None],
                           np.concatenate([p_loc[:, :2], np.zeros((len(o), 1))], axis=1),
                           np.concatenate([np.zeros((len(o), 2)),
                                           np.sign(p_loc[:, 2:3])], axis=1))
        nrm = np.where(np.isfinite(t)[:, None], nrm, 0.0)
        lens = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.where(lens > 1e-12, nrm / np.where(lens > 0, lens, 1.0), nrm)
        return t, nrm @ self.pose.rotation.T


@dataclass(frozen=True)
class SceneSpec:
    """Union of primitives plus the reserved sky class."""

    primitives: tuple
    sky_class: int = 0
    sky_color: tuple = (70, 130, 180)

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        if not self.primitives:
            return
        for p in self.primitives:
            if p.class_id == self.sky_class:
                raise ValueError("primitive may not use the sky class id")

    def sdf(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        if not self.primitives:
            return np.full(pts.shape[:-1], np.inf)
        vals = np.stack([p.sdf(pts) for p in self.primitives], axis=0)
        return vals.min(axis=0)

    def raycast(self, origins: np.ndarray, dirs: np.ndarray):
        """(t, hit primitive index or -1, world normal) per ray."""
        n = len(origins)
        best_t = np.full(n, np.inf)
        best_i = np.full(n, -1, dtype=np.int64)
        best_n = np.zeros((n, 3))
        for i, prim in enumerate(self.primitives):
            t, nrm = prim.raycast(origins, dirs)
            closer = t < best_t
            best_t[closer] = t[closer]
            best_i[closer] = i
            best_n[closer] = nrm[closer]
        return best_t, best_i, best_n

    # -- JSON ------------------------------------------------------------

    def to_json(self, path) -> None:
        def pose_doc(pose):
            return {"rotation": [[float(x) for x in row] for row in pose.rotation],
                    "translation": [float(x) for x in pose.translation]}
        doc = {
            "sky_class": self.sky_class,
            "sky_color": list(self.sky_color),
            "primitives": [
                {"kind": p.kind, "pose": pose_doc(p.pose), "dims": list(p.dims),
                 "color": list(p.color), "class_id": p.class_id}
                for p in self.primitives],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def from_json(path) -> "SceneSpec":
        with open(path) as fh:
            doc = json.load(fh)
        prims = []
        for e in doc["primitives"]:
            pose = RigidPose(np.asarray(e["pose"]["rotation"]),
                             np.asarray(e["pose"]["translation"]))
            prims.append(Primitive(e["kind"], pose, tuple(e["dims"]),
                                   tuple(e["color"]), int(e["class_id"])))
        return SceneSpec(tuple(prims), int(doc.get("sky_class", 0)),
                         tuple(doc.get("sky_color", (70, 130, 180))))


@dataclass(frozen=True)
class BeamPattern:
    """Beam fan: one ray per (elevation, azimuth step) with range noise."""

    elevations: np.ndarray            # radians
    azimuth_step: float               # radians
    range_sigma: float = 0.0          # meters
    max_range: float = 60.0           # meters

    def __post_init__(self):
        elev = np.asarray(self.elevations, dtype=np.float64).reshape(-1)
        if not (1 <= len(elev) <= 256):
            raise ValueError("need between 1 and 256 beams")
        if self.range_sigma < 0:
            raise ValueError("range noise must be nonnegative")
        if self.azimuth_step <= 0 or self.max_range <= 0:
            raise ValueError("azimuth step and max range must be positive")
        elev.setflags(write=False)
        object.__setattr__(self, "elevations", elev)

    @staticmethod
    def uniform(n_beams: int = 128, lo_deg: float = -25.0, hi_deg: float = 15.0,
                azimuth_step_deg: float = 0.5, range_sigma: float = 0.0,
                max_range: float = 60.0) -> "BeamPattern":
        """Uniformly spaced elevations (stand-in for a real 128-beam table)."""
        return BeamPattern(np.deg2rad(np.linspace(lo_deg, hi_deg, n_beams)),
                           np.deg2rad(azimuth_step_deg), range_sigma, max_range)


def simulate_scan(scene: SceneSpec, sensor_pose: RigidPose,
                  pattern: BeamPattern, seed: int = 0) -> np.ndarray:
    """One simulated scan as an (N, 3) world point cloud.

    Rays sweep the full azimuth circle at each elevation; the nearest
    analytic intersection gets Gaussian range noise along the ray; misses
    (or hits beyond max_range) are dropped. Bit-deterministic per seed.
    """
    az = np.arange(0.0, 2 * np.pi - 1e-12, pattern.azimuth_step)
    el = pattern.elevations
    ael, aaz = np.meshgrid(el, az, indexing="ij")
    ce = np.cos(ael.ravel())
    dirs_local = np.stack([ce * np.cos(aaz.ravel()),
                           ce * np.sin(aaz.ravel()),
                           np.sin(ael.ravel())], axis=1)
    dirs = dirs_local @ sensor_pose.rotation.T
    origin = sensor_pose.translation
    origins = np.broadcast_to(origin, dirs.shape)
    if not scene.primitives:
        return np.zeros((0, 3))
    t, _, _ = scene.raycast(origins, dirs)
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, pattern.range_sigma, size=len(t)) \
        if pattern.range_sigma > 0 else np.zeros(len(t))
    ranges = t + noise
    keep = np.isfinite(t) & (t <= pattern.max_range) & (ranges > 0)
    return origin[None, :] + ranges[keep, None] * dirs[keep]


_LIGHT = np.array([0.45, 0.35, 0.82])
_LIGHT_DIR = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.35


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> RigidPose:
    """Camera-to-world pose looking from eye toward target (+z forward,
    +x right, +y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, [0.0, 1.0, 0.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return RigidPose(np.column_stack([right, down, fwd]), eye)


def render_frames(scene: SceneSpec, poses, mode: str = "color",
                  width: int = 512, height: int = 384, fx: float = None,
                  first_frame_id: int = 0) -> list:
    """Ray-cast frames from camera-to-world poses.

    mode "color": Lambert-shaded primitive colors, sky background.
    mode "label": single-channel class ids, sky class background.
    """
    if mode not in ("color", "label"):
        raise ValueError("mode must be 'color' or 'label'")
    fx = fx or 0.8 * width
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    us, vs = np.meshgrid(np.arange(width), np.arange(height), indexing="xy")
    rays_cam = np.stack([(us.ravel() - cx) / fx, (vs.ravel() - cy) / fx,
                         np.ones(width * height)], axis=1)
    rays_cam /= np.linalg.norm(rays_cam, axis=1, keepdims=True)

    frames = []
    for k, pose in enumerate(poses):
        dirs = rays_cam @ pose.rotation.T
        origins = np.broadcast_to(pose.translation, dirs.shape)
        t, prim_idx, normals = scene.raycast(origins, dirs)
        hit = np.isfinite(t)
        if mode == "label":
            img = np.full(width * height, scene.sky_class, dtype=np.uint8)
            for i, prim in enumerate(scene.primitives):
                img[hit & (prim_idx == i)] = prim.class_id
            buf = ImageBuffer(img.reshape(height, width, 1))
        else:
            img = np.empty((width * height, 3), dtype=np.float64)
            img[:] = scene.sky_color
            shade = _AMBIENT + (1 - _AMBIENT) * np.maximum(
                normals @ _LIGHT_DIR, 0.0)
            for i, prim in enumerate(scene.primitives):
                sel = hit & (prim_idx == i)
                img[sel] = np.asarray(prim.color, dtype=np.float64) * shade[sel, None]
            buf = ImageBuffer(np.clip(np.rint(img), 0, 255).astype(np.uint8)
                              .reshape(height, width, 3))
        frames.append(CameraFrame(fx, fx, cx, cy, pose, buf,
                                  frame_id=first_frame_id + k))
    return frames


def orbit_poses(radius: float = 10.0, speed: float = 5.0, rate_hz: float = 10.0,
                height: float = 2.3, revolutions: float = 1.0,
                center=(0.0, 0.0)) -> list:
    """Sensor poses of the circular orbit protocol (axis-aligned sensor)."""
    omega = speed / radius
    n = int(np.ceil(2 * np.pi * revolutions / (omega / rate_hz)))
    poses = []
    for i in range(n):
        th = omega * i / rate_hz
        poses.append(RigidPose(np.eye(3),
                               [center[0] + radius * np.cos(th),
                                center[1] + radius * np.sin(th), height]))
    return poses


def orbit_cameras(scene_center, radius: float, height: float, n_cameras: int,
                  **render_kw):
    """Evenly spaced inward-looking camera poses on a circle."""
    target = np.asarray(scene_center, dtype=np.float64)
    poses = []
    for i in range(n_cameras):
        th = 2 * np.pi * i / n_cameras
        eye = np.array([target[0] + radius * np.cos(th),
                        target[1] + radius * np.sin(th), height])
        poses.append(look_at_pose(eye, target))
    return poses


@dataclass(frozen=True)
class ErrorReport:
    """Per-vertex unsigned distances to the ground-truth surface."""

    distances: np.ndarray
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    @property
    def max(self) -> float:
        return float(self.distances.max()) if len(self.distances) else 0.0

    @property
    def mean(self) -> float:
        return float(self.distances.mean()) if len(self.distances) else 0.0

    @property
    def rms(self) -> float:
        return float(np.sqrt(np.mean(self.distances ** 2))) \
            if len(self.distances) else 0.0

    def to_json(self, path) -> None:
        doc = {"max": self.max, "mean": self.mean, "rms": self.rms,
               "n_vertices": int(len(self.distances))}
        with open(path, "w") as fh:
            json.dump(doc, fh, sort_keys=True, indent=1)
            fh.write("\n")

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for i, c in enumerate(self.hist_counts):
                fh.write(f"{self.hist_edges[i]:.9g},{self.hist_edges[i + 1]:.9g},"
                         f"{int(c)}\n")


def mesh_error(mesh: TriangleMesh, scene: SceneSpec, bins: int = 50) -> ErrorReport:
    """Distance of every mesh vertex to the analytic scene surface."""
    d = np.abs(scene.sdf(mesh.vertices)) if len(mesh.vertices) else np.zeros(0)
    hi = float(d.max()) if len(d) else 1.0
    counts, edges = np.histogram(d, bins=bins, range=(0.0, max(hi, 1e-9)))
    return ErrorReport(d, counts, edges)


def benchmark_scene(ground_class: int = 1, sphere_class: int = 2,
                    box_class: int = 3) -> SceneSpec:
    """Ground plane + 2 m sphere + 1x2x4 m box, the accuracy-benchmark scene.

    The sphere sits tangent to the ground, offset from the orbit center so
    beam rings sweep across its surface as the sensor circles.
    """
    ground = Primitive("plane", RigidPose.identity(), (), (120, 118, 110),
                       ground_class)
    sphere = Primitive("sphere", RigidPose(np.eye(3), [2.0, 0.0, 2.0]), (2.0,),
                       (180, 40, 40), sphere_class)
    box = Primitive("box", RigidPose(np.eye(3), [-2.5, 0.5, 0.5]),
                    (2.0, 1.0, 0.5), (50, 90, 190), box_class)
    return SceneSpec((ground, sphere, box))
