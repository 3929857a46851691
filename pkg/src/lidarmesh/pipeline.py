"""Pipeline orchestration: config, stage execution, artifacts.

Stages run in the fixed order reconstruct -> mesh -> visibility -> texture
-> semantic -> evaluate, each reading the previous stage's serialized
artifact and writing its own plus a JSON metrics record, so any prefix can
run and later stages resume from disk. Outputs carry no timestamps and all
randomness is seeded from the config: reruns are byte-identical. A failing
stage leaves its outputs with a .partial suffix and surfaces a
machine-readable error report.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import CameraFrame, ImageBuffer, RigidPose
from .mesher import (TriangleMesh, build_adjacency, extract_mesh,
                     read_ply_points, write_ply, write_ply_points)
from .semantic import (ClassPalette, accumulate_votes, export_labeled_ply,
                       fuse_labels, write_label_report)
from .synthbench import (BeamPattern, SceneSpec, benchmark_scene, mesh_error,
                         orbit_cameras, orbit_poses, render_frames,
                         simulate_scan)
from .texturing import (TextureConfig, VignettingModel,
                        apply_synthetic_vignette, export_textured_obj,
                        texture_mesh)
from .visibility import (VisibilityConfig, VisibilityTable, build_bvh,
                         compute_visibility)
from .volume import TruncationConfig, TsdfVolume

__all__ = ["PipelineConfig", "ConfigError", "StageError", "run_pipeline",
           "STAGES", "load_config"]

STAGES = ("reconstruct", "mesh", "visibility", "texture", "semantic", "evaluate")

ENV_PREFIX = "LIDARMESH_"


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    """Everything a run needs; see README for the file format."""

    # volume
    voxel_size: float = 0.05
    eps_min: float = 0.2
    eps_max: float = 0.6
    k_flatness: float = 64.0
    max_blocks: int = 1 << 24
    # mesh
    iso_weight_min: float = 1.0
    # mrf weights
    lam_view: float = 10.0
    lam_seam: float = 0.1
    lam_sem: float = 0.5
    # vignetting correction coefficients
    vignetting: tuple = (-0.3, 0.0, 0.0)
    # visibility
    min_cos: float = 0.05
    occlusion_bias: float = 1e-4
    # inputs (simulate fills these in)
    scans_dir: str = ""
    trajectory: str = ""
    frames_manifest: str = ""
    labels_manifest: str = ""
    palette: str = ""
    scene: str = ""  # ground-truth scene JSON, needed by evaluate/simulate
    # run control
    output_dir: str = "out"
    seed: int = 0
    threads: int = 1
    stages: dict = field(default_factory=lambda: {s: True for s in STAGES})
    # simulate-stage knobs
    sim: dict = field(default_factory=dict)

    def validate(self, for_stages=None) -> None:
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        if not (0 < self.eps_min <= self.eps_max):
            raise ConfigError("need 0 < eps_min <= eps_max")
        if self.k_flatness <= 0:
            raise ConfigError("k_flatness must be positive")
        if self.iso_weight_min < 0 or self.lam_view < 0 or self.lam_seam <= 0 \
                or self.lam_sem < 0:
            raise ConfigError("smoothness weights out of range")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        for s in self.stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}")
        need = for_stages if for_stages is not None else \
            [s for s in STAGES if self.stages.get(s, True)]
        if "reconstruct" in need:
            for path, name in ((self.scans_dir, "scans_dir"),
                               (self.trajectory, "trajectory")):
                if not path or not Path(path).exists():
                    raise ConfigError(f"{name} path missing: {path!r}")
        if "texture" in need and (not self.frames_manifest
                                  or not Path(self.frames_manifest).exists()):
            raise ConfigError("frames_manifest path missing")
        if "semantic" in need:
            for path, name in ((self.labels_manifest, "labels_manifest"),
                               (self.palette, "palette")):
                if not path or not Path(path).exists():
                    raise ConfigError(f"{name} path missing: {path!r}")
        if "evaluate" in need and (not self.scene or not Path(self.scene).exists()):
            raise ConfigError("scene path missing (evaluate needs ground truth)")

    def truncation(self) -> TruncationConfig:
        return TruncationConfig(self.eps_min, self.eps_max, self.k_flatness)


def load_config(path, overrides: dict = None) -> PipelineConfig:
    """Read TOML or JSON config; environment variables LIDARMESH_SEED,
    LIDARMESH_THREADS and LIDARMESH_OUTPUT_DIR override the file, explicit
    CLI overrides win over both."""
    text = Path(path).read_bytes()
    if str(path).endswith(".json"):
        doc = json.loads(text)
    else:
        try:
            import tomllib
        except ImportError:
            import tomli as tomllib
        doc = tomllib.loads(text.decode())
    known = {f.name for f in PipelineConfig.__dataclass_fields__.values()}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "vignetting" in doc:
        doc["vignetting"] = tuple(doc["vignetting"])
    cfg = PipelineConfig(**doc)
    env_map = {"SEED": ("seed", int), "THREADS": ("threads", int),
               "OUTPUT_DIR": ("output_dir", str)}
    for env, (attr, convert) in env_map.items():
        val = os.environ.get(ENV_PREFIX + env)
        if val:
            cfg = replace(cfg, **{attr: convert(val)})
    for key, val in (overrides or {}).items():
        cfg = replace(cfg, **{key: val})
    return cfg


# ---------------------------------------------------------------------------
# Input loaders (documented formats)


def read_trajectory(path) -> list:
    """One pose per line: 'timestamp tx ty tz qx qy qz qw'."""
    poses = []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 8:
                raise ValueError("trajectory lines need 8 fields")
            _, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            poses.append(RigidPose.from_quaternion(qx, qy, qz, qw, (tx, ty, tz)))
    return poses


def write_trajectory(path, poses, rate_hz: float = 10.0) -> None:
    with open(path, "w") as fh:
        for i, pose in enumerate(poses):
            q = [float(v) for v in _quaternion_of(pose.rotation)]
            t = [float(v) for v in pose.translation]
            fh.write(f"{i / rate_hz:.6f} {t[0]!r} {t[1]!r} {t[2]!r} "
                     f"{q[0]!r} {q[1]!r} {q[2]!r} {q[3]!r}\n")


def _quaternion_of(r: np.ndarray):
    """Rotation matrix to (qx, qy, qz, qw)."""
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        return ((r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
                (r[1, 0] - r[0, 1]) / s, 0.25 * s)
    i = int(np.argmax(np.diag(r)))
    j, k = (i + 1) % 3, (i + 2) % 3
    s = np.sqrt(max(r[i, i] - r[j, j] - r[k, k] + 1.0, 0.0)) * 2
    q = [0.0, 0.0, 0.0, (r[k, j] - r[j, k]) / s]
    q[i] = 0.25 * s
    q[j] = (r[j, i] + r[i, j]) / s
    q[k] = (r[k, i] + r[i, k]) / s
    return (q[0], q[1], q[2], q[3])


def read_frames_manifest(path) -> dict:
    """JSON manifest binding image files to poses and intrinsics."""
    from PIL import Image

    base = Path(path).parent
    with open(path) as fh:
        doc = json.load(fh)
    frames = {}
    for e in doc["frames"]:
        img = np.asarray(Image.open(base / e["file"]))
        pose = RigidPose.from_quaternion(*e["pose"]["q"], translation=e["pose"]["t"])
        cam = CameraFrame(e["fx"], e["fy"], e["cx"], e["cy"], pose,
                          ImageBuffer(img), int(e["frame_id"]))
        frames[cam.frame_id] = cam
    return frames


def write_frames_manifest(path, cameras, files) -> None:
    doc = {"frames": [
        {"file": name, "frame_id": cam.frame_id, "fx": cam.fx, "fy": cam.fy,
         "cx": cam.cx, "cy": cam.cy,
         "pose": {"t": [float(x) for x in cam.pose.translation],
                  "q": [float(x) for x in _quaternion_of(cam.pose.rotation)]}}
        for cam, name in zip(cameras, files)]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Stage runner


class _Run:
    """Holds paths and lazily loaded intermediates of one pipeline run."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self._mesh = None
        self._adjacency = None

    def path(self, name: str) -> Path:
        return self.out / name

    def write_metrics(self, stage: str, metrics: dict) -> None:
        with open(self.path(f"{stage}.metrics.json"), "w") as fh:
            json.dump({"stage": stage, **metrics}, fh, sort_keys=True,
                      separators=(",", ":"))
            fh.write("\n")

    def mesh(self) -> TriangleMesh:
        if self._mesh is None:
            data = self.path("mesh.npz")
            if not data.exists():
                raise StageError("mesh", FileNotFoundError(
                    "mesh.npz not found; run the reconstruct stage first"))
            z = np.load(data)
            self._mesh = TriangleMesh(z["vertices"], z["faces"], z["normals"])
        return self._mesh

    def adjacency(self):
        if self._adjacency is None:
            self._adjacency = build_adjacency(self.mesh())
        return self._adjacency


def _atomic(path: Path):
    """Partial-file guard: returns the temp path; caller renames on success."""
    return path.with_suffix(path.suffix + ".partial")


def stage_simulate(run: _Run) -> dict:
    """Generate scans, trajectory, frames, labels and palette from a scene."""
    from PIL import Image

    cfg = run.cfg
    sim = dict(cfg.sim)
    scene = SceneSpec.from_json(cfg.scene) if cfg.scene else benchmark_scene()
    scene_path = run.path("scene.json")
    scene.to_json(_atomic(scene_path))
    _atomic(scene_path).rename(scene_path)

    poses = orbit_poses(radius=sim.get("orbit_radius", 10.0),
                        speed=sim.get("speed", 5.0),
                        rate_hz=sim.get("rate_hz", 10.0),
                        height=sim.get("sensor_height", 2.3),
                        revolutions=sim.get("revolutions", 1.0))
    pattern = BeamPattern.uniform(
        n_beams=sim.get("beams", 128),
        azimuth_step_deg=sim.get("azimuth_step_deg", 0.5),
        range_sigma=sim.get("range_sigma", 0.01),
        max_range=sim.get("max_range", 25.0))

    scans_dir = run.path("scans")
    scans_dir.mkdir(exist_ok=True)
    n_points = 0
    for i, pose in enumerate(poses):
        pts = simulate_scan(scene, pose, pattern, seed=cfg.seed + i)
        roi = sim.get("roi_half_extent")
        if roi:
            keep = (np.abs(pts[:, 0]) <= roi) & (np.abs(pts[:, 1]) <= roi)
            pts = pts[keep]
        n_points += len(pts)
        write_ply_points(scans_dir / f"scan_{i:06d}.ply", pts)
    write_trajectory(run.path("trajectory.txt"), poses,
                     rate_hz=sim.get("rate_hz", 10.0))

    # posed cameras on a wider ring, color and label renders
    n_cams = sim.get("cameras", 10)
    cam_poses = orbit_cameras(sim.get("camera_target", (0.0, 0.0, 1.0)),
                              sim.get("camera_radius", 9.0),
                              sim.get("camera_height", 3.0), n_cams)
    wh = sim.get("image_size", (512, 384))
    color = render_frames(scene, cam_poses, "color", wh[0], wh[1])
    labels = render_frames(scene, cam_poses, "label", wh[0], wh[1])
    vig = VignettingModel(*cfg.vignetting)
    files_c, files_l = [], []
    for cam in color:
        img = apply_synthetic_vignette(cam.image, vig) \
            if sim.get("apply_vignette", True) else cam.image
        name = f"frame_{cam.frame_id:04d}.png"
        Image.fromarray(img.data).save(run.path(name))
        files_c.append(name)
    for cam in labels:
        name = f"label_{cam.frame_id:04d}.png"
        Image.fromarray(cam.image.data[:, :, 0]).save(run.path(name))
        files_l.append(name)
    write_frames_manifest(run.path("frames.json"), color, files_c)
    write_frames_manifest(run.path("labels.json"), labels, files_l)

    classes = sorted({p.class_id for p in scene.primitives} | {scene.sky_class})
    names = []
    colors = []
    for cid in range(max(classes) + 1):
        prim = next((p for p in scene.primitives if p.class_id == cid), None)
        if cid == scene.sky_class:
            names.append("sky")
            colors.append(scene.sky_color)
        elif prim is not None:
            names.append(f"{prim.kind}_{cid}")
            colors.append(prim.color)
        else:
            names.append(f"class_{cid}")
            colors.append((0, 0, 0))
    ClassPalette(tuple(names), np.array(colors, dtype=np.uint8)) \
        .to_json(run.path("palette.json"))

    run.cfg.scans_dir = str(scans_dir)
    run.cfg.trajectory = str(run.path("trajectory.txt"))
    run.cfg.frames_manifest = str(run.path("frames.json"))
    run.cfg.labels_manifest = str(run.path("labels.json"))
    run.cfg.palette = str(run.path("palette.json"))
    run.cfg.scene = str(scene_path)
    return {"scans": len(poses), "points": int(n_points), "cameras": n_cams}


def stage_reconstruct(run: _Run) -> dict:
    cfg = run.cfg
    poses = read_trajectory(cfg.trajectory)
    scans = sorted(Path(cfg.scans_dir).glob("scan_*.ply"))
    if len(scans) != len(poses):
        raise ValueError(f"{len(scans)} scans but {len(poses)} trajectory poses")
    vol = TsdfVolume(cfg.voxel_size, cfg.truncation(), cfg.max_blocks)
    n_points = 0
    for scan, pose in zip(scans, poses):
        pts = read_ply_points(scan)
        n_points += len(pts)
        vol.integrate_scan(pts, pose.translation)
    out = run.path("volume.atsf")
    vol.save(_atomic(out))
    _atomic(out).rename(out)
    return {"scans": len(scans), "points": n_points, "blocks": vol.n_blocks}


def stage_mesh(run: _Run) -> dict:
    cfg = run.cfg
    vol = TsdfVolume.load(run.path("volume.atsf"))
    mesh = extract_mesh(vol, cfg.iso_weight_min)
    npz = run.path("mesh.npz")
    with open(_atomic(npz), "wb") as fh:
        np.savez(fh, vertices=mesh.vertices, faces=mesh.faces,
                 normals=mesh.face_normals)
    _atomic(npz).rename(npz)
    ply = run.path("mesh.ply")
    write_ply(_atomic(ply), mesh)
    _atomic(ply).rename(ply)
    run._mesh = mesh
    return {"vertices": len(mesh.vertices), "faces": mesh.n_faces}


def stage_visibility(run: _Run) -> dict:
    cfg = run.cfg
    mesh = run.mesh()
    cams = list(read_frames_manifest(cfg.frames_manifest).values()) \
        if cfg.frames_manifest else []
    if cfg.labels_manifest:
        # label cameras share poses with color ones in the synthetic bench;
        # visibility only depends on geometry, so one pass covers both
        label_cams = read_frames_manifest(cfg.labels_manifest)
        seen = {c.frame_id for c in cams}
        cams += [c for fid, c in sorted(label_cams.items()) if fid not in seen]
    if not cams:
        raise ValueError("no camera frames; provide frames_manifest or labels_manifest")
    cams.sort(key=lambda c: c.frame_id)
    bvh = build_bvh(mesh)
    table = compute_visibility(mesh, bvh, cams,
                               VisibilityConfig(cfg.min_cos, cfg.occlusion_bias),
                               threads=cfg.threads)
    out = run.path("visibility.csv")
    table.to_csv(_atomic(out))
    _atomic(out).rename(out)
    visible_faces = int((np.diff(table.offsets) > 0).sum())
    return {"rows": len(table.face_ids), "visible_faces": visible_faces,
            "cameras": len(cams)}


def stage_texture(run: _Run) -> dict:
    cfg = run.cfg
    mesh = run.mesh()
    frames = read_frames_manifest(cfg.frames_manifest)
    table = VisibilityTable.from_csv(run.path("visibility.csv"),
                                     n_faces=mesh.n_faces)
    # restrict to color frames (the table may also hold label-camera rows)
    keep = np.isin(table.frame_ids, list(frames.keys()))
    table = _filter_table(table, keep, mesh.n_faces)
    tex_cfg = TextureConfig(lam_view=cfg.lam_view, lam_seam=cfg.lam_seam,
                            vignetting=VignettingModel(*cfg.vignetting))
    atlas, assignment, seams, _ = texture_mesh(mesh, run.adjacency(), table,
                                               frames, tex_cfg)
    paths = export_textured_obj(run.path("textured"), mesh, atlas, assignment)
    return {"faces": mesh.n_faces,
            "none_faces": int(len(atlas.none_faces)),
            "pages": len(atlas.pages),
            "charts_objective_drop": float(
                (seams.objective_before - seams.objective_after).sum()),
            "artifacts": sorted(p.name for p in paths)}


def _filter_table(table: VisibilityTable, keep: np.ndarray, n_faces: int):
    face = table.face_ids[keep]
    offsets = np.zeros(n_faces + 1, dtype=np.int64)
    np.add.at(offsets, face + 1, 1)
    return VisibilityTable(face, table.frame_ids[keep], table.areas_px2[keep],
                           table.cosines[keep], np.cumsum(offsets))


def stage_semantic(run: _Run) -> dict:
    cfg = run.cfg
    mesh = run.mesh()
    palette = ClassPalette.from_json(cfg.palette)
    label_frames = read_frames_manifest(cfg.labels_manifest)
    table = VisibilityTable.from_csv(run.path("visibility.csv"),
                                     n_faces=mesh.n_faces)
    keep = np.isin(table.frame_ids, list(label_frames.keys()))
    table = _filter_table(table, keep, mesh.n_faces)
    votes = accumulate_votes(mesh, table, label_frames, palette)
    classes, conf = fuse_labels(mesh, run.adjacency(), votes, cfg.lam_sem)
    ply = run.path("labeled.ply")
    export_labeled_ply(_atomic(ply), mesh, classes, palette)
    _atomic(ply).rename(ply)
    rep = run.path("labels.json")
    write_label_report(_atomic(rep), classes, conf, palette)
    _atomic(rep).rename(rep)
    counts = np.bincount(classes, minlength=palette.n_classes)
    return {"faces": mesh.n_faces,
            "class_counts": {palette.names[i]: int(c) for i, c in enumerate(counts)},
            "mean_confidence": round(float(conf.mean()), 9)}


def stage_evaluate(run: _Run) -> dict:
    cfg = run.cfg
    scene = SceneSpec.from_json(cfg.scene)
    mesh = run.mesh()
    rep = mesh_error(mesh, scene)
    out = run.path("error.json")
    rep.to_json(_atomic(out))
    _atomic(out).rename(out)
    rep.to_csv(run.path("error_hist.csv"))
    return {"max": rep.max, "mean": rep.mean, "rms": rep.rms,
            "vertices": int(len(rep.distances))}


_STAGE_FN = {
    "reconstruct": stage_reconstruct,
    "mesh": stage_mesh,
    "visibility": stage_visibility,
    "texture": stage_texture,
    "semantic": stage_semantic,
    "evaluate": stage_evaluate,
}


def run_pipeline(cfg: PipelineConfig, only=None, simulate_first: bool = False):
    """Execute the enabled stages in order; returns the metrics per stage.

    Raises StageError (with a machine-readable report written to the output
    directory) when a stage fails.
    """
    run = _Run(cfg)
    results = {}
    if simulate_first:
        results["simulate"] = _execute(run, "simulate", stage_simulate)
    wanted = [s for s in STAGES if cfg.stages.get(s, True)]
    if only is not None:
        wanted = [s for s in wanted if s in only]
    cfg.validate(for_stages=wanted)
    for stage in wanted:
        results[stage] = _execute(run, stage, _STAGE_FN[stage])
    return results


def _execute(run: _Run, stage: str, fn) -> dict:
    try:
        metrics = fn(run)
    except Exception as exc:  # noqa: BLE001 - converted to a stage report
        report = {"stage": stage, "error_type": type(exc).__name__,
                  "message": str(exc)}
        with open(run.path("error_report.json"), "w") as fh:
            json.dump(report, fh, sort_keys=True)
            fh.write("\n")
        raise StageError(stage, exc) from exc
    run.write_metrics(stage, metrics)
    return metrics
