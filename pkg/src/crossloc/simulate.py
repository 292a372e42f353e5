"""Synthetic multi-device scene generator with full ground truth.

Descriptors are synthetic latent vectors (no rendering): each world point
carries a latent descriptor; a device observes it through a fixed
device-specific offset plus noise, which makes cross-device matching
measurably harder than same-device matching. All arrays that the
interchange format stores as float32 are quantized to float32 at
generation time, so exported scenes reproduce in-memory runs bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from crossloc.geometry import (
    CameraIntrinsics,
    DepthMap,
    Pose,
    Rotation,
    project_points,
)
from crossloc.mapstore import (
    MapDatabase,
    MapFrame,
    _intrinsics_from_json,
    _intrinsics_to_json,
    _pose_from_json,
    _pose_to_json,
    save as save_map,
)
from crossloc.matching import Keypoint, Match, MatchSet


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    tag: str
    intrinsics: CameraIntrinsics
    has_depth: bool = False
    domain_gap: float = 0.0  # fixed descriptor-space offset magnitude


def default_devices() -> tuple[DeviceSpec, ...]:
    return (
        DeviceSpec("ios", CameraIntrinsics(450, 450, 320, 240, 640, 480), False, 0.0),
        DeviceSpec("hl", CameraIntrinsics(380, 380, 240, 180, 480, 360), False, 0.15),
        DeviceSpec("spot", CameraIntrinsics(350, 350, 320, 240, 640, 480), True, 0.25),
    )


@dataclass(frozen=True)
class SceneConfig:
    num_points: int = 400
    extent: float = 10.0
    devices: tuple[DeviceSpec, ...] = field(default_factory=default_devices)
    frames_per_device: int = 40
    queries_per_device: int = 20
    trajectory: str = "orbit"  # orbit | corridor
    descriptor_dim: int = 16
    pixel_noise: float = 0.3
    descriptor_noise: float = 0.05
    outlier_rate: float = 0.02
    global_descriptor_noise: float = 0.05
    depth_noise: float = 0.01
    depth_salt_rate: float = 0.01
    min_visible_points: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.num_points < 1 or self.frames_per_device < 1 or not self.devices:
            raise ValueError("counts must be >= 1 and devices non-empty")
        for rate in (self.outlier_rate, self.depth_salt_rate):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("rates must lie in [0, 1]")
        if self.trajectory not in ("orbit", "corridor"):
            raise ValueError(f"unknown trajectory {self.trajectory!r}")


@dataclass(frozen=True)
class QueryFrame:
    query_id: str
    device: str
    intrinsics: CameraIntrinsics
    gt_pose: Pose
    keypoints: tuple[Keypoint, ...]
    local_descriptors: np.ndarray
    global_descriptor: np.ndarray
    depth: DepthMap | None = None


@dataclass(frozen=True)
class SyntheticScene:
    config: SceneConfig
    points: np.ndarray
    latents: np.ndarray
    map_frames: tuple[MapFrame, ...]
    queries: tuple[QueryFrame, ...]
    # frame_id -> per-keypoint world point index, -1 for injected outliers
    labels: dict[str, np.ndarray]

    def gt_pair_matches(self) -> list[tuple[str, str, MatchSet]]:
        """Exact inter-map-frame matches from the ground-truth labels."""
        out = []
        frames = self.map_frames
        for a in range(len(frames)):
            la = self.labels[frames[a].frame_id]
            index_a = {int(p): i for i, p in enumerate(la) if p >= 0}
            for b in range(a + 1, len(frames)):
                lb = self.labels[frames[b].frame_id]
                matches = tuple(
                    Match(index_a[int(p)], i, 1.0)
                    for i, p in enumerate(lb)
                    if p >= 0 and int(p) in index_a
                )
                if matches:
                    out.append((
                        frames[a].frame_id,
                        frames[b].frame_id,
                        MatchSet(frames[a].frame_id, frames[b].frame_id, matches),
                    ))
        return out


def _look_at(center: np.ndarray, target: np.ndarray) -> Pose:
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.95 else np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose(Rotation.from_matrix(R), -R @ center)


def _camera_poses(cfg: SceneConfig, n: int, phase: float, rng) -> list[Pose]:
    poses = []
    r = 0.9 * cfg.extent
    for i in range(n):
        if cfg.trajectory == "orbit":
            ang = 2 * np.pi * i / n + phase
            center = np.array([
                r * np.cos(ang),
                r * np.sin(ang),
                0.25 * cfg.extent + 0.05 * cfg.extent * np.sin(3 * ang + phase),
            ])
            target = np.zeros(3)
        else:  # corridor: walk along x, look across
            x = (i / max(n - 1, 1) - 0.5) * 2.0 * cfg.extent + phase
            center = np.array([x, -0.9 * cfg.extent, 0.2 * cfg.extent])
            target = np.array([x, 0.0, 0.0])
        poses.append(_look_at(center, target))
    return poses


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _observe(
    cfg: SceneConfig,
    dev: DeviceSpec,
    pose: Pose,
    points: np.ndarray,
    latents: np.ndarray,
    device_offset: np.ndarray,
    rng,
):
    """One frame's keypoints, descriptors, labels, depth for a posed camera."""
    K = dev.intrinsics
    uv, ok = project_points(K, pose, points)
    ok = ok.copy()
    ok &= np.nan_to_num(uv[:, 0], nan=-1) >= 0
    ok &= np.nan_to_num(uv[:, 0], nan=1e9) < K.width
    ok &= np.nan_to_num(uv[:, 1], nan=-1) >= 0
    ok &= np.nan_to_num(uv[:, 1], nan=1e9) < K.height
    vis = np.nonzero(ok)[0]
    if len(vis) < cfg.min_visible_points:
        raise SceneGenerationError(
            f"camera sees only {len(vis)} points (< {cfg.min_visible_points}); "
            "increase num_points or extent, or move the trajectory closer"
        )
    kps, descs, labels = [], [], []
    cam_pts = pose.apply(points[vis])
    for k, j in enumerate(vis):
        noisy = uv[j] + rng.normal(0, cfg.pixel_noise, size=2)
        noisy = np.clip(noisy, [0, 0], [K.width - 1e-3, K.height - 1e-3])
        if rng.random() < cfg.outlier_rate:
            kps.append(Keypoint(*(float(x) for x in _f32(
                rng.uniform([0, 0], [K.width, K.height])))))
            descs.append(rng.normal(size=cfg.descriptor_dim))
            labels.append(-1)
        else:
            kps.append(Keypoint(float(_f32(noisy[0:1])[0]), float(_f32(noisy[1:2])[0])))
            descs.append(
                latents[j] + device_offset + rng.normal(0, cfg.descriptor_noise,
                                                        size=cfg.descriptor_dim)
            )
            labels.append(int(j))
    g = latents[vis].mean(axis=0)
    g = g + rng.normal(0, cfg.global_descriptor_noise, size=cfg.descriptor_dim)
    g = g / np.linalg.norm(g)
    g32 = np.asarray(g, dtype=np.float32)
    g32 = g32 / np.float32(np.linalg.norm(g32.astype(np.float64)))

    depth = None
    if dev.has_depth:
        vals = np.full((K.height, K.width), -1.0)
        for k, j in enumerate(vis):
            if labels[k] < 0:
                continue
            u_i = int(kps[k].u)
            v_i = int(kps[k].v)
            d = cam_pts[k][2] * (1.0 + rng.normal(0, cfg.depth_noise))
            if rng.random() < cfg.depth_salt_rate:
                d *= 10.0
            vals[v_i, u_i] = max(d, 1e-3)
        depth = DepthMap(_f32(vals))

    return (
        tuple(kps),
        np.asarray(descs, dtype=np.float32).reshape(len(kps), cfg.descriptor_dim),
        g32,
        np.asarray(labels, dtype=np.int64),
        depth,
    )


def generate_scene(cfg: SceneConfig) -> SyntheticScene:
    rng = np.random.default_rng(cfg.seed)
    half = 0.5 * cfg.extent
    if cfg.trajectory == "orbit":
        points = rng.uniform(
            [-half, -half, -0.3 * half], [half, half, 0.6 * half], size=(cfg.num_points, 3)
        )
    else:
        points = rng.uniform(
            [-2 * half, -half * 0.4, -0.3 * half],
            [2 * half, half * 0.4, 0.6 * half],
            size=(cfg.num_points, 3),
        )
    latents = rng.normal(size=(cfg.num_points, cfg.descriptor_dim))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)

    offsets = {
        d.tag: d.domain_gap * rng.normal(size=cfg.descriptor_dim) for d in cfg.devices
    }

    map_frames: list[MapFrame] = []
    queries: list[QueryFrame] = []
    labels: dict[str, np.ndarray] = {}
    for dev in cfg.devices:
        for i, pose in enumerate(_camera_poses(cfg, cfg.frames_per_device, 0.0, rng)):
            fid = f"map_{dev.tag}_{i:04d}"
            kps, descs, g, lab, depth = _observe(
                cfg, dev, pose, points, latents, offsets[dev.tag], rng
            )
            map_frames.append(MapFrame(fid, dev.tag, dev.intrinsics, pose,
                                       kps, descs, g, depth))
            labels[fid] = lab
        phase = np.pi / cfg.frames_per_device  # queries interleave map viewpoints
        for i, pose in enumerate(
            _camera_poses(cfg, cfg.queries_per_device, phase, rng)
        ):
            qid = f"query_{dev.tag}_{i:04d}"
            kps, descs, g, lab, depth = _observe(
                cfg, dev, pose, points, latents, offsets[dev.tag], rng
            )
            queries.append(QueryFrame(qid, dev.tag, dev.intrinsics, pose,
                                      kps, descs, g, depth))
            labels[qid] = lab

    return SyntheticScene(cfg, points, latents, tuple(map_frames), tuple(queries), labels)


# --- export ------------------------------------------------------------------


def export_scene(scene: SyntheticScene, path: str | Path) -> None:
    """Write map/, queries/, matches.json, gt_poses.json under path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    db = MapDatabase({f.frame_id: f for f in scene.map_frames}, (), {})
    save_map(db, path / "map")

    matches_json = [
        {
            "frame_a": fa,
            "frame_b": fb,
            "matches": [[m.query_idx, m.map_idx, m.confidence, m.source]
                        for m in ms.matches],
        }
        for fa, fb, ms in scene.gt_pair_matches()
    ]
    (path / "matches.json").write_text(
        json.dumps({"format_version": 1, "pairs": matches_json}, sort_keys=True) + "\n"
    )

    qdb = MapDatabase(
        {
            q.query_id: MapFrame(q.query_id, q.device, q.intrinsics, q.gt_pose,
                                 q.keypoints, q.local_descriptors,
                                 q.global_descriptor, q.depth)
            for q in scene.queries
        },
        (),
        {},
    )
    save_map(qdb, path / "queries")

    gt = {
        "format_version": 1,
        "pose_convention": "camera-from-world",
        "queries": [
            {
                "query_id": q.query_id,
                "device": q.device,
                "pose": _pose_to_json(q.gt_pose),
            }
            for q in scene.queries
        ],
    }
    (path / "gt_poses.json").write_text(json.dumps(gt, indent=1, sort_keys=True) + "\n")


def load_pair_matches(path: str | Path) -> list[tuple[str, str, MatchSet]]:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != 1:
        raise ValueError(f"unsupported matches format_version {data.get('format_version')!r}")
    out = []
    for p in data["pairs"]:
        ms = MatchSet(p["frame_a"], p["frame_b"], tuple(
            Match(int(q), int(m), float(c), str(s)) for q, m, c, s in p["matches"]
        ))
        out.append((p["frame_a"], p["frame_b"], ms))
    return out


def load_gt_poses(path: str | Path) -> dict[str, tuple[str, Pose]]:
    data = json.loads(Path(path).read_text())
    return {
        q["query_id"]: (q["device"], _pose_from_json(q["pose"]))
        for q in data["queries"]
    }
