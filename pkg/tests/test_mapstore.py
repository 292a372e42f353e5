import numpy as np
import pytest

from crossloc.geometry import CameraIntrinsics, DepthMap, Pose, Rotation, project
from crossloc.mapstore import (
    MapBuildError,
    MapFrame,
    StoreCorruptError,
    StoreTruncatedError,
    StoreVersionError,
    build_map,
    load,
    save,
)
from crossloc.matching import Keypoint, Match, MatchSet

K = CameraIntrinsics(fx=400, fy=400, cx=160, cy=120, width=320, height=240)


def look_at_origin(center):
    center = np.asarray(center, dtype=float)
    z = -center / np.linalg.norm(center)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.vstack([x, y, z])
    return Pose(Rotation.from_matrix(R), -R @ center)


def make_scene(n_points=50, n_frames=3, seed=0, with_depth=False):
    """Exact synthetic views of shared world points with exact matches."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1.5, 1.5, size=(n_points, 3))
    frames = []
    visible = []  # per frame: list of (point_idx, kp_idx)
    for i in range(n_frames):
        angle = 2 * np.pi * i / 16
        pose = look_at_origin([6 * np.cos(angle), 6 * np.sin(angle), 1.5])
        kps, vis, descs = [], [], []
        for j, X in enumerate(pts):
            uv = project(K, pose, X)
            if uv is None or not (0 <= uv[0] < K.width and 0 <= uv[1] < K.height):
                continue
            vis.append((j, len(kps)))
            kps.append(Keypoint(float(np.float32(uv[0])), float(np.float32(uv[1]))))
            descs.append(rng.normal(size=8))
        g = rng.normal(size=16).astype(np.float32)
        g /= np.float32(np.linalg.norm(g.astype(np.float64)))
        depth = DepthMap(rng.uniform(1, 5, (K.height, K.width))) if with_depth else None
        frames.append(MapFrame(
            frame_id=f"f{i:03d}", device="sim", intrinsics=K, pose=pose,
            keypoints=tuple(kps),
            local_descriptors=np.array(descs, dtype=np.float32).reshape(len(kps), 8),
            global_descriptor=g, depth=depth,
        ))
        visible.append(dict(vis))
    matches = []
    for a in range(n_frames):
        for b in range(a + 1, n_frames):
            shared = set(visible[a]) & set(visible[b])
            ms = MatchSet(frames[a].frame_id, frames[b].frame_id, tuple(
                Match(visible[a][j], visible[b][j], 1.0) for j in sorted(shared)
            ))
            matches.append((frames[a].frame_id, frames[b].frame_id, ms))
    return pts, frames, matches


class TestBuildMap:
    def test_exact_scene_all_landmarks(self):
        pts, frames, matches = make_scene()
        db = build_map(frames, matches)
        # every point seen by >=2 frames should become a landmark
        assert len(db.landmarks) >= 40
        assert all(lm.mean_reproj_error < 1e-3 for lm in db.landmarks)
        for lm in db.landmarks:
            for fid, kidx in lm.track:
                f = db.frames[fid]
                uv = project(f.intrinsics, f.pose, lm.point)
                assert uv is not None
                kp = f.keypoints[kidx]
                assert np.hypot(uv[0] - kp.u, uv[1] - kp.v) <= 4.0

    def test_zero_matches_zero_landmarks(self):
        _, frames, _ = make_scene()
        db = build_map(frames, [])
        assert len(db.landmarks) == 0

    def test_duplicate_frame_id_rejected(self):
        _, frames, _ = make_scene(n_frames=2)
        with pytest.raises(MapBuildError):
            build_map(frames + [frames[0]], [])

    def test_outlier_edge_gated_or_split(self):
        pts, frames, matches = make_scene()
        clean_count = len(build_map(frames, matches).landmarks)
        # contaminate one edge with a wrong correspondence
        fa, fb, ms = matches[0]
        good = ms.matches[0]
        wrong = Match(good.query_idx, (good.map_idx + 7) % len(frames[1].keypoints), 1.0)
        bad_ms = MatchSet(ms.query_id, ms.map_id, (wrong,) + ms.matches[1:])
        dirty = [(fa, fb, bad_ms)] + matches[1:]
        dirty_count = len(build_map(frames, dirty).landmarks)
        assert dirty_count <= clean_count

    def test_deterministic(self):
        _, frames, matches = make_scene()
        a = build_map(frames, matches)
        b = build_map(frames, matches)
        assert len(a.landmarks) == len(b.landmarks)
        for la, lb in zip(a.landmarks, b.landmarks):
            assert np.array_equal(la.point, lb.point)
            assert la.track == lb.track

    def test_observation_index_consistent(self):
        _, frames, matches = make_scene()
        db = build_map(frames, matches)
        for i, lm in enumerate(db.landmarks):
            for obs in lm.track:
                assert db.observation_index[obs] == i
        for obs, i in db.observation_index.items():
            assert obs in db.landmarks[i].track


class TestPersistence:
    def test_round_trip_structural(self, tmp_path):
        _, frames, matches = make_scene(with_depth=True)
        db = build_map(frames, matches)
        save(db, tmp_path / "map")
        db2 = load(tmp_path / "map")
        assert set(db2.frames) == set(db.frames)
        for fid, f in db.frames.items():
            f2 = db2.frames[fid]
            assert np.array_equal(f.pose.rotation.q, f2.pose.rotation.q)
            assert np.array_equal(f.pose.translation, f2.pose.translation)
            assert np.array_equal(f.local_descriptors, f2.local_descriptors)
            assert np.array_equal(f.global_descriptor, f2.global_descriptor)
            assert f.keypoints == f2.keypoints
            assert np.array_equal(
                np.float32(f.depth.values), np.float32(f2.depth.values)
            )
        assert len(db2.landmarks) == len(db.landmarks)
        for la, lb in zip(db.landmarks, db2.landmarks):
            assert np.array_equal(la.point, lb.point)
            assert la.track == lb.track
        assert db2.observation_index == db.observation_index

    def test_resave_byte_identical(self, tmp_path):
        _, frames, matches = make_scene()
        db = build_map(frames, matches)
        save(db, tmp_path / "a")
        save(load(tmp_path / "a"), tmp_path / "b")
        for rel in ["manifest.json"] + sorted(
            p.name for p in (tmp_path / "a" / "arrays").iterdir()
        ):
            pa = tmp_path / "a" / rel if rel == "manifest.json" else tmp_path / "a" / "arrays" / rel
            pb = tmp_path / "b" / rel if rel == "manifest.json" else tmp_path / "b" / "arrays" / rel
            assert pa.read_bytes() == pb.read_bytes(), rel

    def test_unknown_version(self, tmp_path):
        _, frames, matches = make_scene(n_frames=2)
        db = build_map(frames, matches)
        save(db, tmp_path / "map")
        manifest = tmp_path / "map" / "manifest.json"
        manifest.write_text(manifest.read_text().replace('"format_version": 1',
                                                         '"format_version": 99'))
        with pytest.raises(StoreVersionError):
            load(tmp_path / "map")

    def test_missing_array_file(self, tmp_path):
        _, frames, matches = make_scene(n_frames=2)
        save(build_map(frames, matches), tmp_path / "map")
        (tmp_path / "map" / "arrays" / "f000.desc.f32").unlink()
        with pytest.raises(StoreCorruptError):
            load(tmp_path / "map")

    def test_truncated_array(self, tmp_path):
        _, frames, matches = make_scene(n_frames=2)
        save(build_map(frames, matches), tmp_path / "map")
        f = tmp_path / "map" / "arrays" / "f000.desc.f32"
        f.write_bytes(f.read_bytes()[:-8])
        with pytest.raises(StoreTruncatedError):
            load(tmp_path / "map")

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StoreCorruptError):
            load(tmp_path / "nope")
