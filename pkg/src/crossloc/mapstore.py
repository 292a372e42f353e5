"""Persistent 3D map: posed frames, features, triangulated landmarks.

On-disk layout is a directory holding a diffable JSON manifest plus raw
little-endian float32 array files:

    map_dir/
      manifest.json            ids, devices, intrinsics, poses (camera-from-
                               world, quaternion w,x,y,z + translation in
                               meters), landmark tracks, format_version
      arrays/<id>.kpts.f32     num_keypoints x 3 (u px, v px, score)
      arrays/<id>.desc.f32     num_keypoints x descriptor_dim
      arrays/<id>.global.f32   global descriptor, unit norm
      arrays/<id>.depth.d32    height x width depth in meters (optional)
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
    project,
    triangulate_multiview,
)
from crossloc.matching import Keypoint, MatchSet

FORMAT_VERSION = 1


class StoreError(Exception):
    pass


class StoreVersionError(StoreError):
    pass


class StoreCorruptError(StoreError):
    pass


class StoreTruncatedError(StoreError):
    pass


class MapBuildError(ValueError):
    pass


@dataclass(frozen=True)
class MapFrame:
    """One posed, calibrated database image with features and optional depth."""

    frame_id: str
    device: str
    intrinsics: CameraIntrinsics
    pose: Pose
    keypoints: tuple[Keypoint, ...]
    local_descriptors: np.ndarray
    global_descriptor: np.ndarray
    depth: DepthMap | None = None

    def __post_init__(self):
        desc = np.asarray(self.local_descriptors, dtype=np.float32)
        if desc.ndim != 2 or desc.shape[0] != len(self.keypoints):
            raise MapBuildError(
                f"frame {self.frame_id}: descriptor rows must equal keypoint count"
            )
        g = np.asarray(self.global_descriptor, dtype=np.float32)
        n = float(np.linalg.norm(g.astype(np.float64)))
        if abs(n - 1.0) > 1e-5:
            raise MapBuildError(f"frame {self.frame_id}: global descriptor not unit norm")
        object.__setattr__(self, "local_descriptors", desc)
        object.__setattr__(self, "global_descriptor", g)
        desc.setflags(write=False)
        g.setflags(write=False)

    def keypoint_xy(self) -> np.ndarray:
        return np.array([[k.u, k.v] for k in self.keypoints]).reshape(-1, 2)


@dataclass(frozen=True)
class Landmark:
    point: np.ndarray
    track: tuple[tuple[str, int], ...]
    mean_reproj_error: float

    def __post_init__(self):
        if len(self.track) < 2:
            raise MapBuildError("landmark track needs at least two views")
        p = np.asarray(self.point, dtype=np.float64).reshape(3)
        object.__setattr__(self, "point", p)
        p.setflags(write=False)


@dataclass(frozen=True)
class MapDatabase:
    frames: dict[str, MapFrame]
    landmarks: tuple[Landmark, ...]
    observation_index: dict[tuple[str, int], int]

    def device_subset(self, device: str) -> "MapDatabase":
        """Restrict to one device's frames; keeps landmarks still seen twice."""
        frames = {fid: f for fid, f in self.frames.items() if f.device == device}
        landmarks = []
        obs: dict[tuple[str, int], int] = {}
        for lm in self.landmarks:
            track = tuple(t for t in lm.track if t[0] in frames)
            if len(track) < 2:
                continue
            idx = len(landmarks)
            landmarks.append(Landmark(lm.point, track, lm.mean_reproj_error))
            for t in track:
                obs[t] = idx
        return MapDatabase(frames, tuple(landmarks), obs)


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, a):
        root = a
        while self.parent.setdefault(root, root) != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_map(
    frames: list[MapFrame],
    pair_matches: list[tuple[str, str, MatchSet]],
    max_reproj_error: float = 4.0,
    min_angle_deg: float = 1.5,
) -> MapDatabase:
    """Merge matches into tracks (union-find) and triangulate landmarks.

    Tracks containing two keypoints of one frame are conflicted and dropped.
    A landmark is kept iff its mean reprojection error stays within
    max_reproj_error px and its triangulation angle reaches min_angle_deg.
    """
    frame_map: dict[str, MapFrame] = {}
    for f in frames:
        if f.frame_id in frame_map:
            raise MapBuildError(f"duplicate frame_id {f.frame_id!r}")
        frame_map[f.frame_id] = f

    uf = _UnionFind()
    for fid_a, fid_b, ms in pair_matches:
        if fid_a not in frame_map or fid_b not in frame_map:
            raise MapBuildError(f"match pair references unknown frame {fid_a!r}/{fid_b!r}")
        for m in ms.matches:
            uf.union((fid_a, m.query_idx), (fid_b, m.map_idx))

    tracks: dict = {}
    for obs in list(uf.parent):
        tracks.setdefault(uf.find(obs), []).append(obs)

    landmarks: list[Landmark] = []
    obs_index: dict[tuple[str, int], int] = {}
    for members in tracks.values():
        members = sorted(members)
        if len(members) < 2:
            continue
        seen_frames = [fid for fid, _ in members]
        if len(set(seen_frames)) != len(seen_frames):
            continue  # conflicted track: one frame observed twice
        obs_list = []
        for fid, kidx in members:
            f = frame_map[fid]
            kp = f.keypoints[kidx]
            obs_list.append((f.intrinsics, f.pose, np.array([kp.u, kp.v])))
        X = triangulate_multiview(obs_list, min_angle_deg=min_angle_deg)
        if X is None:
            continue
        errors = []
        ok = True
        for K, T, px in obs_list:
            uv = project(K, T, X)
            if uv is None:
                ok = False
                break
            errors.append(float(np.linalg.norm(uv - px)))
        if not ok:
            continue
        mean_err = float(np.mean(errors))
        if mean_err > max_reproj_error:
            continue
        idx = len(landmarks)
        landmarks.append(Landmark(X, tuple(members), mean_err))
        for obs in members:
            obs_index[obs] = idx

    return MapDatabase(frame_map, tuple(landmarks), obs_index)


# --- serialization -----------------------------------------------------------


def _pose_to_json(p: Pose) -> dict:
    return {"q": [float(x) for x in p.rotation.q],
            "t": [float(x) for x in p.translation]}


def _pose_from_json(d: dict) -> Pose:
    return Pose(Rotation(np.array(d["q"], dtype=np.float64)),
                np.array(d["t"], dtype=np.float64))


def _intrinsics_to_json(k: CameraIntrinsics) -> dict:
    return {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
            "width": k.width, "height": k.height}


def _intrinsics_from_json(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                            width=d["width"], height=d["height"])


def write_f32(path: Path, arr: np.ndarray) -> None:
    np.asarray(arr, dtype="<f4").tofile(path)


def read_f32(path: Path, shape: tuple[int, ...]) -> np.ndarray:
    if not path.exists():
        raise StoreCorruptError(f"missing array file {path.name}")
    data = np.fromfile(path, dtype="<f4")
    expected = int(np.prod(shape))
    if data.size != expected:
        raise StoreTruncatedError(
            f"{path.name}: expected {expected} float32 values, found {data.size}"
        )
    return data.reshape(shape)


def save(db: MapDatabase, path: str | Path) -> None:
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    frames_json = []
    for fid in sorted(db.frames):
        f = db.frames[fid]
        frames_json.append({
            "frame_id": fid,
            "device": f.device,
            "intrinsics": _intrinsics_to_json(f.intrinsics),
            "pose": _pose_to_json(f.pose),
            "num_keypoints": len(f.keypoints),
            "descriptor_dim": int(f.local_descriptors.shape[1]),
            "global_dim": int(f.global_descriptor.shape[0]),
            "has_depth": f.depth is not None,
        })
        kpts = np.array([[k.u, k.v, k.score] for k in f.keypoints],
                        dtype=np.float32).reshape(-1, 3)
        write_f32(path / "arrays" / f"{fid}.kpts.f32", kpts)
        write_f32(path / "arrays" / f"{fid}.desc.f32", f.local_descriptors)
        write_f32(path / "arrays" / f"{fid}.global.f32", f.global_descriptor)
        if f.depth is not None:
            write_f32(path / "arrays" / f"{fid}.depth.d32", f.depth.values)

    manifest = {
        "format_version": FORMAT_VERSION,
        "pose_convention": "camera-from-world",
        "units": {"pixels": "keypoints, intrinsics", "meters": "translation, depth"},
        "endianness": "little",
        "frames": frames_json,
        "landmarks": [
            {
                "point": [float(x) for x in lm.point],
                "track": [[fid, kidx] for fid, kidx in lm.track],
                "mean_reproj_error": lm.mean_reproj_error,
            }
            for lm in db.landmarks
        ],
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    )


def load(path: str | Path) -> MapDatabase:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise StoreCorruptError(f"no manifest.json in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise StoreCorruptError(f"manifest is not valid JSON: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise StoreVersionError(
            f"unsupported format_version {version!r} (expected {FORMAT_VERSION})"
        )

    frames: dict[str, MapFrame] = {}
    for fj in manifest["frames"]:
        fid = fj["frame_id"]
        n = fj["num_keypoints"]
        kpts = read_f32(path / "arrays" / f"{fid}.kpts.f32", (n, 3))
        desc = read_f32(path / "arrays" / f"{fid}.desc.f32", (n, fj["descriptor_dim"]))
        gdesc = read_f32(path / "arrays" / f"{fid}.global.f32", (fj["global_dim"],))
        intr = _intrinsics_from_json(fj["intrinsics"])
        depth = None
        if fj["has_depth"]:
            depth = DepthMap(
                read_f32(path / "arrays" / f"{fid}.depth.d32",
                         (intr.height, intr.width)).astype(np.float64)
            )
        frames[fid] = MapFrame(
            frame_id=fid,
            device=fj["device"],
            intrinsics=intr,
            pose=_pose_from_json(fj["pose"]),
            keypoints=tuple(Keypoint(float(u), float(v), float(s)) for u, v, s in kpts),
            local_descriptors=desc,
            global_descriptor=gdesc,
            depth=depth,
        )

    landmarks = []
    obs_index: dict[tuple[str, int], int] = {}
    for i, lj in enumerate(manifest["landmarks"]):
        track = tuple((fid, int(kidx)) for fid, kidx in lj["track"])
        for fid, kidx in track:
            if fid not in frames or kidx >= len(frames[fid].keypoints):
                raise StoreCorruptError(f"landmark {i} track references unknown observation")
            obs_index[(fid, kidx)] = i
        landmarks.append(
            Landmark(np.array(lj["point"]), track, lj["mean_reproj_error"])
        )
    return MapDatabase(frames, tuple(landmarks), obs_index)
