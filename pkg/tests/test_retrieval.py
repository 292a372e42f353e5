import numpy as np
import pytest

from crossloc.geometry import CameraIntrinsics, Pose
from crossloc.mapstore import MapFrame
from crossloc.retrieval import RetrievalError, RetrievalIndex, index_build

K = CameraIntrinsics(fx=100, fy=100, cx=50, cy=50, width=100, height=100)


def frame_with_descriptor(fid, g):
    g = np.asarray(g, dtype=np.float64)
    g = (g / np.linalg.norm(g)).astype(np.float32)
    return MapFrame(
        frame_id=fid, device="sim", intrinsics=K, pose=Pose.identity(),
        keypoints=(), local_descriptors=np.empty((0, 4), dtype=np.float32),
        global_descriptor=g,
    )


def random_frames(n, dim, seed=0):
    rng = np.random.default_rng(seed)
    return [frame_with_descriptor(f"f{i:04d}", rng.normal(size=dim)) for i in range(n)]


class TestIndexBuild:
    def test_shape(self):
        idx = index_build(random_frames(3, 4))
        assert len(idx) == 3
        assert idx.dim == 4

    def test_rows_unit_norm(self):
        idx = index_build(random_frames(100, 256, seed=1))
        assert np.allclose(np.linalg.norm(idx.descriptors_, axis=1), 1.0, atol=1e-6)

    def test_zero_vector_rejected(self):
        bad = frame_with_descriptor("z", [1, 0, 0, 0])
        object.__setattr__(bad, "global_descriptor", np.zeros(4, dtype=np.float32))
        with pytest.raises(RetrievalError):
            index_build([bad])

    def test_dim_mismatch_rejected(self):
        frames = random_frames(2, 4) + random_frames(1, 8, seed=2)
        with pytest.raises(RetrievalError):
            index_build(frames)

    def test_duplicate_ids_rejected(self):
        f = random_frames(1, 4)[0]
        with pytest.raises(RetrievalError):
            index_build([f, f])


class TestQueryTopK:
    def test_self_similarity_rank_one(self):
        frames = random_frames(20, 16, seed=3)
        idx = index_build(frames)
        result = idx.query_topk(frames[7].global_descriptor, k=5)
        assert result[0][0] == "f0007"
        assert result[0][1] == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal_query_ordered_by_id(self):
        frames = [
            frame_with_descriptor("b", [1, 0, 0, 0]),
            frame_with_descriptor("a", [0, 1, 0, 0]),
            frame_with_descriptor("c", [1, 1, 0, 0]),
        ]
        idx = index_build(frames)
        result = idx.query_topk(np.array([0, 0, 0, 1.0]), k=3)
        assert [fid for fid, _ in result] == ["a", "b", "c"]
        assert all(abs(s) < 1e-12 for _, s in result)

    def test_k_larger_than_index(self):
        idx = index_build(random_frames(5, 8, seed=4))
        assert len(idx.query_topk(np.ones(8), k=50)) == 5

    def test_dim_mismatch(self):
        idx = index_build(random_frames(5, 8, seed=5))
        with pytest.raises(RetrievalError):
            idx.query_topk(np.ones(4))

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        frames = random_frames(200, 32, seed=6)
        idx = index_build(frames)
        for _ in range(20):
            q = rng.normal(size=32)
            result = idx.query_topk(q, k=10)
            qn = q / np.linalg.norm(q)
            scores = {
                f.frame_id: float(f.global_descriptor.astype(np.float64)
                                  / np.linalg.norm(f.global_descriptor.astype(np.float64)) @ qn)
                for f in frames
            }
            expected = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
            assert [fid for fid, _ in result] == [fid for fid, _ in expected]
            for (_, sa), (_, sb) in zip(result, expected):
                assert sa == pytest.approx(sb, abs=1e-9)

    def test_topk_prefix_property(self):
        idx = index_build(random_frames(50, 16, seed=7))
        q = np.random.default_rng(8).normal(size=16)
        top5 = idx.query_topk(q, k=5)
        top6 = idx.query_topk(q, k=6)
        assert top6[:5] == top5

    def test_scores_in_range(self):
        idx = index_build(random_frames(50, 16, seed=9))
        q = np.random.default_rng(10).normal(size=16)
        assert all(-1.0 - 1e-9 <= s <= 1.0 + 1e-9 for _, s in idx.query_topk(q, k=50))

    def test_get_params(self):
        assert RetrievalIndex(default_k=7).get_params()["default_k"] == 7
